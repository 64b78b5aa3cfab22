//! `CSLM1` model container.
//!
//! ```text
//! "CSLM1" | u32 section count | sections...
//! section: u32 name len | name | u64 payload len | payload | sha256(payload)
//! ```
//!
//! Weight payloads are `u8 frozen | u32 count | tensors`, each tensor being
//! `u32 name len | name | u32 rank | u64 dims.. | f64 data..`. All integers
//! and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::layers::{Adapter, Decoder, Encoder, GrlHead, ProjectionHead};
use super::params::ParamStore;
use super::{ModelConfig, SegModel};
use crate::styletext::{hex, AttributeCodebook, BinThresholds};
use crate::tensor::Tensor;

pub const SNAPSHOT_MAGIC: &[u8; 5] = b"CSLM1";
pub const SNAPSHOT_VERSION: &str = "CSLM1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("unrecognized container magic")]
    Magic,
    #[error("container truncated at byte {0}")]
    Truncated(usize),
    #[error("section {section:?} is corrupt: {reason}")]
    CorruptSection { section: String, reason: String },
    #[error("unsupported snapshot version {0:?}")]
    Version(String),
    #[error("checksum mismatch in section {0:?}")]
    Checksum(String),
    #[error("missing section {0:?}")]
    MissingSection(&'static str),
    #[error("malformed section {section:?}: {reason}")]
    Malformed { section: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, SnapshotError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelConfig,
    method: String,
    seeds: BTreeMap<String, u64>,
}

/// Everything needed to run a trained model, including the frozen style
/// codebook it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub model: SegModel,
    pub grl: Option<GrlHead>,
    pub codebook: AttributeCodebook,
    /// Training method that produced the weights.
    pub method: String,
    pub seeds: BTreeMap<String, u64>,
}

impl ModelSnapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: SNAPSHOT_VERSION.into(),
            model: self.model.config.clone(),
            method: self.method.clone(),
            seeds: self.seeds.clone(),
        };
        let mut sections: Vec<(&str, Vec<u8>)> = vec![
            ("config", serde_json::to_vec(&header).expect("header serializes")),
            ("encoder", encode_params(&self.model.encoder.params, self.model.encoder.frozen)),
            ("adapter", encode_params(&self.model.adapter.params, false)),
            ("proj", encode_params(&self.model.proj.params, false)),
            ("decoder", encode_params(&self.model.decoder.params, false)),
        ];
        if let Some(grl) = &self.grl {
            sections.push(("grl", encode_params(&grl.params, false)));
        }
        sections.push(("codebook", encode_codebook(&self.codebook)));

        write_sections(SNAPSHOT_MAGIC, &sections)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let sections = read_sections(SNAPSHOT_MAGIC, buf)?;
        let get = |name: &'static str| sections.get(name).copied().ok_or(SnapshotError::MissingSection(name));

        let header: Header = serde_json::from_slice(get("config")?)?;
        if header.format != SNAPSHOT_VERSION {
            return Err(SnapshotError::Version(header.format));
        }
        let cfg = header.model;
        let (enc, frozen) = decode_params("encoder", get("encoder")?)?;
        let (adapter, _) = decode_params("adapter", get("adapter")?)?;
        let (proj, _) = decode_params("proj", get("proj")?)?;
        let (decoder, _) = decode_params("decoder", get("decoder")?)?;
        let grl = match sections.get("grl") {
            Some(p) => {
                let (params, _) = decode_params("grl", p)?;
                let num_domains = params
                    .tensors()
                    .last()
                    .map(Tensor::len)
                    .ok_or_else(|| malformed("grl", "no tensors"))?;
                Some(GrlHead { params, num_domains })
            }
            None => None,
        };
        let codebook = decode_codebook(get("codebook")?)?;
        let model = SegModel {
            encoder: Encoder {
                params: enc,
                channels: cfg.encoder_channels.clone(),
                blocks: cfg.encoder_blocks.clone(),
                frozen,
            },
            adapter: Adapter { params: adapter },
            proj: ProjectionHead { params: proj },
            decoder: Decoder {
                params: decoder,
                widths: cfg.decoder_channels.clone(),
            },
            config: cfg,
        };
        check_shapes(&model)?;
        Ok(ModelSnapshot {
            model,
            grl,
            codebook,
            method: header.method,
            seeds: header.seeds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized container.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

/// Frames named sections as `magic | u32 count | sections`, each with a
/// SHA-256 of its payload.
pub(crate) fn write_sections(magic: &[u8], sections: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, payload) in sections {
        put_str(&mut out, name);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(payload);
        out.extend_from_slice(&Sha256::digest(payload));
    }
    out
}

/// Inverse of [`write_sections`], verifying every checksum.
pub(crate) fn read_sections<'a>(magic: &[u8], buf: &'a [u8]) -> Result<BTreeMap<String, &'a [u8]>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(magic.len()).ok() != Some(magic) {
        return Err(SnapshotError::Magic);
    }
    let count = r.u32()? as usize;
    let mut sections = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let corrupt = |e: SnapshotError| SnapshotError::CorruptSection {
            section: name.clone(),
            reason: e.to_string(),
        };
        let len = r.u64().map_err(corrupt)? as usize;
        let payload = r.take(len).map_err(corrupt)?;
        let sum = r.take(32).map_err(corrupt)?;
        if Sha256::digest(payload).as_slice() != sum {
            return Err(SnapshotError::Checksum(name));
        }
        sections.insert(name, payload);
    }
    if r.pos != buf.len() {
        return Err(SnapshotError::Malformed {
            section: "<container>".into(),
            reason: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(sections)
}

fn malformed(section: &str, reason: impl Into<String>) -> SnapshotError {
    SnapshotError::Malformed {
        section: section.into(),
        reason: reason.into(),
    }
}

/// Rebuilds fresh modules for the config and compares tensor names and shapes.
fn check_shapes(m: &SegModel) -> Result<()> {
    m.config
        .validate()
        .map_err(|e| malformed("config", e.to_string()))?;
    let mut rng = crate::seed::rng(0, &[]);
    let fresh = [
        ("encoder", Encoder::new(&m.config, &mut rng).params, &m.encoder.params),
        ("adapter", Adapter::new(&m.config, &mut rng).params, &m.adapter.params),
        ("proj", ProjectionHead::new(&m.config, &mut rng).params, &m.proj.params),
        (
            "decoder",
            Decoder::new(&m.config, m.config.num_classes, &mut rng).params,
            &m.decoder.params,
        ),
    ];
    for (section, want, got) in fresh {
        let same = want.len() == got.len()
            && want
                .iter()
                .zip(got.iter())
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !same {
            return Err(malformed(section, "tensor layout does not match config"));
        }
    }
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode_params(p: &ParamStore, frozen: bool) -> Vec<u8> {
    let mut out = vec![u8::from(frozen)];
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    for (name, t) in p.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_params(section: &str, buf: &[u8]) -> Result<(ParamStore, bool)> {
    let mut r = Reader { buf, pos: 0 };
    let frozen = match r.take(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(malformed(section, format!("frozen flag {b}"))),
    };
    let count = r.u32()?;
    let mut p = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.f64s(n)?;
        let t = Tensor::from_vec(data, &shape).map_err(|e| malformed(section, e.to_string()))?;
        p.push(name, t);
    }
    if r.pos != buf.len() {
        return Err(malformed(section, "trailing bytes"));
    }
    Ok((p, frozen))
}

fn encode_codebook(cb: &AttributeCodebook) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&cb.seed.to_le_bytes());
    out.extend_from_slice(&(cb.dim as u32).to_le_bytes());
    let b = &cb.bins;
    for v in [b.contrast.0, b.contrast.1, b.noise.0, b.noise.1, b.bias.0, b.bias.1] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let tokens: Vec<_> = cb.tokens().collect();
    out.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for (token, v) in tokens {
        put_str(&mut out, token);
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn decode_codebook(buf: &[u8]) -> Result<AttributeCodebook> {
    let mut r = Reader { buf, pos: 0 };
    let seed = r.u64()?;
    let dim = r.u32()? as usize;
    let b = r.f64s(6)?;
    let bins = BinThresholds {
        contrast: (b[0], b[1]),
        noise: (b[2], b[3]),
        bias: (b[4], b[5]),
    };
    let count = r.u32()?;
    let mut vectors = BTreeMap::new();
    for _ in 0..count {
        let token = r.string()?;
        vectors.insert(token, r.f64s(dim)?);
    }
    if r.pos != buf.len() {
        return Err(malformed("codebook", "trailing bytes"));
    }
    Ok(AttributeCodebook::from_parts(seed, dim, bins, vectors))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(SnapshotError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(SnapshotError::Truncated(self.pos))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("<name>", "invalid utf-8"))
    }
}
