//! `CSL1` split container (little-endian) plus a JSON descriptor sidecar.
//!
//! ```text
//! header : "CSL1" | image_size u32 | num_classes u32 | count u32
//! sample : content_seed u64 | domain_len u32 | domain utf-8
//!          | modality u8 | contrast f64 | noise_kind u8 | noise_level f64
//!          | bias_strength f64 | artifact_bits u8
//!          | image f32 x S*S | mask u8 x S*S
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Artifact, Dataset, DatasetConfig, Modality, NoiseKind, Result, Sample, StyleDescriptor, SynthError};

pub const DATASET_MAGIC: &[u8; 4] = b"CSL1";

#[derive(Serialize, Deserialize)]
struct SidecarEntry<'a> {
    content_seed: u64,
    domain: std::borrow::Cow<'a, str>,
    descriptor: std::borrow::Cow<'a, StyleDescriptor>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn encode_split(samples: &[Sample], image_size: usize, num_classes: usize) -> Vec<u8> {
    let pixels = image_size * image_size;
    let mut out = Vec::with_capacity(16 + samples.len() * (64 + pixels * 5));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(image_size as u32).to_le_bytes());
    out.extend_from_slice(&(num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        assert_eq!(s.size, image_size, "sample size differs from container size");
        out.extend_from_slice(&s.content_seed.to_le_bytes());
        out.extend_from_slice(&(s.domain.len() as u32).to_le_bytes());
        out.extend_from_slice(s.domain.as_bytes());
        let d = &s.descriptor;
        out.push(d.modality.code());
        out.extend_from_slice(&d.contrast.to_le_bytes());
        out.push(d.noise_kind.code());
        out.extend_from_slice(&d.noise_level.to_le_bytes());
        out.extend_from_slice(&d.bias_strength.to_le_bytes());
        let bits = d.artifacts.iter().fold(0u8, |b, a| b | (1 << a.code()));
        out.push(bits);
        for v in &s.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.mask);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(SynthError::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Returns `(image_size, num_classes, samples)`.
pub fn decode_split(buf: &[u8]) -> Result<(usize, usize, Vec<Sample>)> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != DATASET_MAGIC {
        return Err(SynthError::Format("bad magic, expected CSL1".into()));
    }
    let size = c.u32("image_size")? as usize;
    let classes = c.u32("num_classes")? as usize;
    let count = c.u32("count")? as usize;
    let pixels = size * size;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let content_seed = c.u64("content_seed")?;
        let len = c.u32("domain length")? as usize;
        let domain = std::str::from_utf8(c.take(len, "domain")?)
            .map_err(|e| SynthError::Format(format!("domain name: {e}")))?
            .to_string();
        let modality = Modality::from_code(c.u8("modality")?)
            .ok_or_else(|| SynthError::Format("modality code".into()))?;
        let contrast = c.f64("contrast")?;
        let noise_kind = NoiseKind::from_code(c.u8("noise_kind")?)
            .ok_or_else(|| SynthError::Format("noise kind code".into()))?;
        let noise_level = c.f64("noise_level")?;
        let bias_strength = c.f64("bias_strength")?;
        let bits = c.u8("artifacts")?;
        let artifacts: BTreeSet<Artifact> = Artifact::ALL
            .iter()
            .copied()
            .filter(|a| bits & (1 << a.code()) != 0)
            .collect();
        let image = c
            .take(pixels * 4, "image")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let mask = c.take(pixels, "mask")?.to_vec();
        if mask.iter().any(|&m| m as usize >= classes) {
            return Err(SynthError::Format("mask label out of range".into()));
        }
        samples.push(Sample {
            size,
            image,
            mask,
            descriptor: StyleDescriptor {
                modality,
                contrast,
                noise_kind,
                noise_level,
                bias_strength,
                artifacts,
            },
            domain,
            content_seed,
        });
    }
    if c.pos != buf.len() {
        return Err(SynthError::Format(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok((size, classes, samples))
}

/// Writes one split and its `.json` sidecar.
pub fn write_split(path: &Path, samples: &[Sample], image_size: usize, num_classes: usize) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_split(samples, image_size, num_classes))?;
    let entries: Vec<SidecarEntry> = samples
        .iter()
        .map(|s| SidecarEntry {
            content_seed: s.content_seed,
            domain: (&s.domain[..]).into(),
            descriptor: std::borrow::Cow::Borrowed(&s.descriptor),
        })
        .collect();
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&entries)?)?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<(usize, usize, Vec<Sample>)> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_split(&buf)
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    config: DatasetConfig,
    train: String,
    id_test: String,
    /// OOD domain name to file name.
    ood_tests: BTreeMap<String, String>,
}

/// Writes every split under `dir` plus a `dataset.json` index.
pub fn write_dataset(dir: &Path, data: &Dataset, cfg: &DatasetConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let (size, k) = (cfg.image_size, cfg.num_classes);
    let mut files = Vec::new();
    let mut put = |name: String, samples: &[Sample]| -> Result<String> {
        let path = dir.join(&name);
        write_split(&path, samples, size, k)?;
        files.push(path.clone());
        files.push(sidecar_path(&path));
        Ok(name)
    };
    let train = put("train.csl".into(), &data.train)?;
    let id_test = put("id_test.csl".into(), &data.id_test)?;
    let mut ood = BTreeMap::new();
    for (i, (name, samples)) in data.ood_tests.iter().enumerate() {
        ood.insert(name.clone(), put(format!("ood_{i}.csl"), samples)?);
    }
    let index = DatasetIndex {
        config: cfg.clone(),
        train,
        id_test,
        ood_tests: ood,
    };
    let index_path = dir.join("dataset.json");
    fs::write(&index_path, serde_json::to_vec_pretty(&index)?)?;
    files.push(index_path);
    Ok(files)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetConfig, Dataset)> {
    let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
    let load = |name: &str| read_split(&dir.join(name)).map(|(_, _, s)| s);
    let mut ood_tests = BTreeMap::new();
    for (domain, file) in &index.ood_tests {
        ood_tests.insert(domain.clone(), load(file)?);
    }
    Ok((
        index.config,
        Dataset {
            train: load(&index.train)?,
            id_test: load(&index.id_test)?,
            ood_tests,
        },
    ))
}
