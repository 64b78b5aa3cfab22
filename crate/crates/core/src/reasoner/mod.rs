//! Correction commands and the reasoner that turns them into FiLM
//! parameters: a fixed rule table and a small learned regressor trained on
//! searched (corruption, correction) pairs.

mod command;
pub mod study;
mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossError;
use crate::model::{read_sections, write_sections, Decoder, FiLMParams, ModelError, SnapshotError};
use crate::optim::{adam_step, AdamConfig, AdamState, OptimError};
use crate::seed;
use crate::synthgen::SynthError;
use crate::tensor::{Tape, Tensor, TensorError};

pub use command::{canonical_command, grammar_help, parse_command, CorrectionCommand, ParseError, ParseErrorKind, Verb, DEFAULT_MAGNITUDE};
pub use synth::{
    search_film, search_film_soft, synth_pairs, InterventionPair, SearchConfig, SearchMethod, SynthConfig, SynthOutcome};

pub const GAMMA_RANGE: (f64, f64) = (0.25, 4.0);
pub const BETA_RANGE: (f64, f64) = (-2.0, 2.0);
pub const MIN_REASONER_PAIRS: usize = 50;
pub const REASONER_MAGIC: &[u8; 5] = b"CSLR1";

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("need at least {need} pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("command {command:?} is not valid for this model: {reason}")]
    InvalidCommand { command: String, reason: String },
    #[error("compact FiLM has {actual} values, expected {expected}")]
    CompactLength { expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Container(#[from] SnapshotError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ReasonerError>;

/// One scalar gamma scale and beta shift per decoder stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactFilm(pub Vec<f64>);

impl CompactFilm {
    pub fn identity(stages: usize) -> Self {
        CompactFilm((0..stages).flat_map(|_| [1.0, 0.0]).collect())
    }

    pub fn stages(&self) -> usize {
        self.0.len() / 2
    }

    pub fn gamma(&self, stage: usize) -> f64 {
        self.0[2 * stage]
    }

    pub fn beta(&self, stage: usize) -> f64 {
        self.0[2 * stage + 1]
    }

    /// Offsets from identity, the regression target.
    pub fn offsets(&self) -> Vec<f64> {
        self.0
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v - 1.0 } else { *v })
            .collect()
    }

    pub fn from_offsets(off: &[f64]) -> Self {
        CompactFilm(
            off.iter()
                .enumerate()
                .map(|(i, v)| if i % 2 == 0 { v + 1.0 } else { *v })
                .collect(),
        )
    }

    /// Per-channel form for a decoder of the given widths, clamped.
    pub fn expand(&self, widths: &[usize]) -> Result<FiLMParams> {
        if self.0.len() != 2 * widths.len() {
            return Err(ReasonerError::CompactLength {
                expected: 2 * widths.len(),
                actual: self.0.len(),
            });
        }
        let mut f = FiLMParams::identity(widths);
        for (i, &c) in widths.iter().enumerate() {
            f.gamma[i] = vec![self.gamma(i); c];
            f.beta[i] = vec![self.beta(i); c];
        }
        Ok(clamp_film(f))
    }
}

/// Clamps gamma into [`GAMMA_RANGE`] and beta into [`BETA_RANGE`]; NaN
/// entries fall back to identity.
pub fn clamp_film(mut f: FiLMParams) -> FiLMParams {
    for g in f.gamma.iter_mut().flatten() {
        *g = if g.is_nan() { 1.0 } else { g.clamp(GAMMA_RANGE.0, GAMMA_RANGE.1) };
    }
    for b in f.beta.iter_mut().flatten() {
        *b = if b.is_nan() { 0.0 } else { b.clamp(BETA_RANGE.0, BETA_RANGE.1) };
    }
    f
}

/// Anything that maps a command to FiLM parameters.
pub trait FilmPredictor {
    fn predict(&self, cmd: &CorrectionCommand) -> Result<FiLMParams>;
}

/// Always answers identity.
pub struct IdentityReasoner {
    pub widths: Vec<usize>,
}

impl FilmPredictor for IdentityReasoner {
    fn predict(&self, _cmd: &CorrectionCommand) -> Result<FiLMParams> {
        Ok(FiLMParams::identity(&self.widths))
    }
}

/// Last-stage channels whose strongest output weight goes to `class`.
pub fn class_channels(decoder: &Decoder, class: u8) -> Vec<usize> {
    let w = decoder.out_weight();
    let (k, c) = (w.shape()[0], w.shape()[1]);
    (0..c)
        .filter(|&ch| {
            let col = |cls: usize| w.data()[cls * c + ch];
            let best = (0..k).fold(0, |b, cls| if col(cls) > col(b) { cls } else { b });
            best == class as usize
        })
        .collect()
}

/// The fixed rule table.
///
/// | verb | stage | channels | gamma | beta |
/// |---|---|---|---|---|
/// | identity | - | - | 1 | 0 |
/// | shrink c | last | attributed to c | 1 - 0.5m | -0.2m |
/// | expand c | last | attributed to c | 1 + 0.5m | +0.2m |
/// | suppress_noise | first | all | 1 - 0.3m | 0 |
/// | restore_region [c] | last | attributed to c, else to any foreground class | 1 + 0.3m | +0.1m |
/// | sharpen_boundary | last | all | 1 + 0.5m | 0 |
///
/// Channel attribution uses the output 1x1 conv: a channel belongs to the
/// class it feeds with the largest weight. Every entry tends to identity
/// as m goes to 0.
pub fn rule_reasoner(cmd: &CorrectionCommand, decoder: &Decoder) -> FiLMParams {
    let widths = &decoder.widths;
    let mut f = FiLMParams::identity(widths);
    let m = cmd.magnitude;
    let last = widths.len() - 1;
    let mut set = |stage: usize, chans: &[usize], g: f64, b: f64| {
        for &ch in chans {
            f.gamma[stage][ch] = g;
            f.beta[stage][ch] = b;
        }
    };
    let all = |stage: usize| (0..widths[stage]).collect::<Vec<_>>();
    let classes = (decoder.out_weight().shape()[0]) as u8;
    match (cmd.verb, cmd.target_class) {
        (Verb::Identity, _) => {}
        (Verb::Shrink, Some(c)) => set(last, &class_channels(decoder, c), 1.0 - 0.5 * m, -0.2 * m),
        (Verb::Expand, Some(c)) => set(last, &class_channels(decoder, c), 1.0 + 0.5 * m, 0.2 * m),
        (Verb::Shrink | Verb::Expand, None) => {}
        (Verb::SuppressNoise, _) => set(0, &all(0), 1.0 - 0.3 * m, 0.0),
        (Verb::RestoreRegion, target) => {
            let chans: Vec<usize> = match target {
                Some(c) => class_channels(decoder, c),
                None => (1..classes).flat_map(|c| class_channels(decoder, c)).collect(),
            };
            set(last, &chans, 1.0 + 0.3 * m, 0.1 * m)
        }
        (Verb::SharpenBoundary, _) => set(last, &all(last), 1.0 + 0.5 * m, 0.0),
    }
    clamp_film(f)
}

/// The rule table bound to a decoder.
pub struct RuleReasoner<'a> {
    pub decoder: &'a Decoder,
}

impl FilmPredictor for RuleReasoner<'_> {
    fn predict(&self, cmd: &CorrectionCommand) -> Result<FiLMParams> {
        Ok(rule_reasoner(cmd, self.decoder))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonerConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Identity-command pairs with identity targets added to the data.
    pub identity_anchors: usize,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig {
            hidden: 32,
            epochs: 600,
            lr: 1e-2,
            seed: 0,
            identity_anchors: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `[d_in, d_out]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerMeta {
    pub config: ReasonerConfig,
    pub pairs: usize,
    /// Mean squared error per epoch, before each update.
    pub curve: Vec<f64>,
    pub final_mse: f64,
}

/// Command embedding (one-hot verb, one-hot class with 0 for none,
/// magnitude) to compact FiLM offsets through one hidden ReLU layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerModel {
    pub num_classes: usize,
    pub widths: Vec<usize>,
    pub layers: [DenseLayer; 2],
    pub meta: ReasonerMeta,
}

pub fn embed_command(cmd: &CorrectionCommand, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; Verb::ALL.len() + num_classes + 1];
    v[cmd.verb.index()] = 1.0;
    let c = cmd.target_class.map_or(0, usize::from).min(num_classes - 1);
    v[Verb::ALL.len() + c] = 1.0;
    v[Verb::ALL.len() + num_classes] = cmd.magnitude;
    v
}

fn check_command(cmd: &CorrectionCommand, num_classes: usize) -> Result<()> {
    let bad = |reason: String| {
        Err(ReasonerError::InvalidCommand {
            command: cmd.canonical(),
            reason,
        })
    };
    if !(cmd.magnitude > 0.0 && cmd.magnitude <= 1.0) {
        return bad(format!("magnitude {} outside (0, 1]", cmd.magnitude));
    }
    match cmd.target_class {
        Some(c) if c == 0 || c as usize >= num_classes => bad(format!("class {c} outside 1..{num_classes}")),
        None if cmd.verb.needs_class() => bad(format!("{} needs a class", cmd.verb)),
        _ => Ok(()),
    }
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape).expect("shape matches data")
}

pub fn train_reasoner(
    pairs: &[InterventionPair],
    num_classes: usize,
    widths: &[usize],
    cfg: &ReasonerConfig,
) -> Result<ReasonerModel> {
    if pairs.len() < MIN_REASONER_PAIRS {
        return Err(ReasonerError::TooFewPairs {
            need: MIN_REASONER_PAIRS,
            got: pairs.len(),
        });
    }
    let out_dim = 2 * widths.len();
    let in_dim = Verb::ALL.len() + num_classes + 1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for p in pairs {
        check_command(&p.command, num_classes)?;
        if p.target.0.len() != out_dim {
            return Err(ReasonerError::CompactLength {
                expected: out_dim,
                actual: p.target.0.len(),
            });
        }
        xs.extend(embed_command(&p.command, num_classes));
        ys.extend(p.target.offsets());
    }
    let id = CompactFilm::identity(widths.len()).offsets();
    for _ in 0..cfg.identity_anchors {
        xs.extend(embed_command(&CorrectionCommand::identity(), num_classes));
        ys.extend(id.iter().copied());
    }
    let n = pairs.len() + cfg.identity_anchors;
    let x = tensor(xs, &[n, in_dim]);
    let y = tensor(ys, &[n, out_dim]);

    let mut rng = seed::rng_for(cfg.seed, "reasoner_init");
    let scale = (2.0 / in_dim as f64).sqrt();
    let w0: Vec<f64> = (0..in_dim * cfg.hidden)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    // Zero output layer: an untrained model predicts identity.
    let mut params = vec![
        tensor(w0, &[in_dim, cfg.hidden]),
        Tensor::zeros(&[cfg.hidden]),
        Tensor::zeros(&[cfg.hidden, out_dim]),
        Tensor::zeros(&[out_dim]),
    ];
    let mut state = AdamState::new(&params);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let tape = Tape::new();
        let v: Vec<_> = params.iter().map(|t| tape.param(t.clone())).collect();
        let h = tape.constant(x.clone()).matmul(v[0])?.add(v[1])?.relu();
        let out = h.matmul(v[2])?.add(v[3])?;
        let d = out.sub(tape.constant(y.clone()))?;
        let loss = d.mul(d)?.mean_all();
        curve.push(loss.item());
        let mut g = loss.backward()?;
        let grads: Vec<Option<Tensor>> = v.iter().map(|p| g.take(*p)).collect();
        adam_step(&mut params, &grads, &mut state, &adam)?;
    }
    let mut it = params.into_iter().map(Tensor::into_data);
    let mut next = || it.next().expect("four tensors");
    let layers = [
        DenseLayer {
            d_in: in_dim,
            d_out: cfg.hidden,
            w: next(),
            b: next(),
        },
        DenseLayer {
            d_in: cfg.hidden,
            d_out: out_dim,
            w: next(),
            b: next(),
        },
    ];
    let mut model = ReasonerModel {
        num_classes,
        widths: widths.to_vec(),
        layers,
        meta: ReasonerMeta {
            config: cfg.clone(),
            pairs: pairs.len(),
            curve,
            final_mse: 0.0,
        },
    };
    let mut se = 0.0;
    for (row, target) in x.data().chunks(in_dim).zip(y.data().chunks(out_dim)) {
        se += model.forward(row).iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    model.meta.final_mse = se / (n * out_dim) as f64;
    Ok(model)
}

impl ReasonerModel {
    fn forward(&self, input: &[f64]) -> Vec<f64> {
        let dense = |l: &DenseLayer, x: &[f64], relu: bool| -> Vec<f64> {
            (0..l.d_out)
                .map(|j| {
                    let z = l.b[j] + x.iter().enumerate().map(|(i, xi)| xi * l.w[i * l.d_out + j]).sum::<f64>();
                    if relu {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect()
        };
        let h = dense(&self.layers[0], input, true);
        dense(&self.layers[1], &h, false)
    }

    /// Unclamped compact prediction straight from the network.
    pub fn predict_compact(&self, cmd: &CorrectionCommand) -> Result<CompactFilm> {
        check_command(cmd, self.num_classes)?;
        Ok(CompactFilm::from_offsets(&self.forward(&embed_command(cmd, self.num_classes))))
    }

    pub fn to_bytes(&self, pairs: Option<&[InterventionPair]>) -> Vec<u8> {
        let mut sections = vec![("reasoner", serde_json::to_vec(self).expect("reasoner serializes"))];
        if let Some(p) = pairs {
            sections.push(("pairs", serde_json::to_vec(p).expect("pairs serialize")));
        }
        write_sections(REASONER_MAGIC, &sections)
    }

    /// Reads a `CSLR1` sidecar; the pair set is returned when present.
    pub fn from_bytes(buf: &[u8]) -> Result<(Self, Option<Vec<InterventionPair>>)> {
        let sections: BTreeMap<String, &[u8]> = read_sections(REASONER_MAGIC, buf)?;
        let model = sections
            .get("reasoner")
            .ok_or(SnapshotError::MissingSection("reasoner"))?;
        let model: ReasonerModel = serde_json::from_slice(model)?;
        let pairs = match sections.get("pairs") {
            Some(p) => Some(serde_json::from_slice(p)?),
            None => None,
        };
        Ok((model, pairs))
    }

    pub fn save(&self, path: &Path, pairs: Option<&[InterventionPair]>) -> Result<()> {
        std::fs::write(path, self.to_bytes(pairs))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Vec<InterventionPair>>)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Learned FiLM for `cmd`. The identity command maps to exact identity;
/// everything else is clamped into the allowed ranges.
pub fn predict_film(r: &ReasonerModel, cmd: &CorrectionCommand) -> Result<FiLMParams> {
    if cmd.verb == Verb::Identity {
        check_command(cmd, r.num_classes)?;
        return Ok(FiLMParams::identity(&r.widths));
    }
    r.predict_compact(cmd)?.expand(&r.widths)
}

impl FilmPredictor for ReasonerModel {
    fn predict(&self, cmd: &CorrectionCommand) -> Result<FiLMParams> {
        predict_film(self, cmd)
    }
}
