//! Experiment harness: single-source training, ID/OOD evaluation, the
//! method ablation, the intervention study and report files.

mod report;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::metrics::Stat;
use crate::metrics::{domain_probe, summarize, EvalRecord, MetricsError};
use crate::model::{
    argmax_masks, pretrain_encoder, Encoder, FiLMParams, ModelConfig, ModelError, PretrainConfig, PretrainReport,
    SegModel, SnapshotError,
};
use crate::seed;
use crate::styletext::AttributeCodebook;
use crate::synthgen::{generate_dataset, make_sample, Dataset, DatasetConfig, Sample, SynthError};
use crate::trainer::{self, FeatureBank, Method, RunLog, TrainConfig, TrainError};

pub use report::{emit_report, file_entry, load_report, write_manifest, Manifest, ManifestEntry, ReportFormat};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Styled samples used to pretrain each seed's encoder.
    pub pretrain_pool: usize,
    /// Template for every run; `method` and `seed` are filled in per run.
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Rerun LAD with lambda 0 per seed and compare it with the ERM row.
    pub lambda_spot_check: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_pool: 400,
            train: TrainConfig::default(),
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            lambda_spot_check: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(BenchError::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(BenchError::Config("at least one method is required".into()));
        }
        if self.dataset.image_size != self.model.image_size {
            return Err(BenchError::Config(format!(
                "dataset image_size {} differs from model image_size {}",
                self.dataset.image_size, self.model.image_size
            )));
        }
        if self.dataset.num_classes != self.model.num_classes {
            return Err(BenchError::Config(format!(
                "dataset has {} classes, model {}",
                self.dataset.num_classes, self.model.num_classes
            )));
        }
        if self.lambda_spot_check && !self.methods.contains(&Method::ErmLambda0) {
            return Err(BenchError::Config("lambda spot check needs the erm_lambda0 method".into()));
        }
        self.dataset.validate()?;
        self.model.validate()?;
        Ok(())
    }

    pub fn run_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            seed,
            ..self.train.clone()
        }
    }
}

/// Everything shared by the runs of one seed: the frozen encoder and the
/// encoder features of every split.
pub struct SeedContext {
    pub seed: u64,
    pub encoder: Encoder,
    pub encoder_hash: String,
    pub pretrain: PretrainReport,
    pub codebook: AttributeCodebook,
    pub train: FeatureBank,
    pub id_test: FeatureBank,
    pub ood_tests: BTreeMap<String, FeatureBank>,
}

/// Styled samples from every domain whose content never appears in `data`.
pub fn pretrain_pool(cfg: &BenchConfig, data: &Dataset, seed: u64) -> Vec<Sample> {
    let used: HashSet<u64> = data.all_samples().map(|s| s.content_seed).collect();
    let dc = &cfg.dataset;
    let domains: Vec<_> = dc.source_domains.iter().chain(&dc.ood_domains).collect();
    let mut out = Vec::with_capacity(cfg.pretrain_pool);
    let mut i = 0u64;
    while out.len() < cfg.pretrain_pool {
        let content = seed::derive(seed, &[seed::tag("pretrain_pool"), i]);
        if !used.contains(&content) {
            let d = domains[out.len() % domains.len()];
            out.push(make_sample(dc, d, content, content));
        }
        i += 1;
    }
    out
}

pub fn prepare_seed(cfg: &BenchConfig, data: &Dataset, seed: u64) -> Result<SeedContext> {
    let pool = pretrain_pool(cfg, data, seed);
    let (encoder, pretrain) = pretrain_encoder(
        &cfg.model,
        &cfg.dataset,
        &pool,
        &cfg.pretrain,
        seed::derive(seed, &[seed::tag("pretrain")]),
    )?;
    let probe = SegModel::new(cfg.model.clone(), encoder.clone(), 0)?;
    let bank = |s: &[Sample]| FeatureBank::encode(&probe, s);
    let mut ood_tests = BTreeMap::new();
    for (name, samples) in &data.ood_tests {
        ood_tests.insert(name.clone(), bank(samples)?);
    }
    Ok(SeedContext {
        seed,
        encoder_hash: encoder.params.content_hash(),
        codebook: AttributeCodebook::new(cfg.train.codebook_seed, cfg.model.style_dim),
        train: bank(&data.train)?,
        id_test: bank(&data.id_test)?,
        ood_tests,
        encoder,
        pretrain,
    })
}

/// Per-sample metrics for `samples` under an optional FiLM.
pub fn evaluate(
    model: &SegModel,
    bank: &FeatureBank,
    samples: &[Sample],
    film: Option<&FiLMParams>,
) -> Result<Vec<EvalRecord>> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in idx.chunks(32) {
        let logits = model.logits_from_raw(&bank.batch(chunk), film)?;
        for (&i, pred) in chunk.iter().zip(argmax_masks(&logits)) {
            let s = &samples[i];
            out.push(EvalRecord::new(
                i,
                &s.domain,
                s.content_seed,
                &pred,
                &s.mask,
                s.size,
                model.config.num_classes,
            ));
        }
    }
    Ok(out)
}

/// Spatially pooled adapter features, one vector per row of `bank`.
pub fn pooled_features(model: &SegModel, bank: &FeatureBank) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..bank.len()).collect();
    let [c, h, w] = bank.shape;
    let mut out = Vec::with_capacity(bank.len());
    for chunk in idx.chunks(64) {
        let f = model.features_from_raw(&bank.batch(chunk))?;
        for row in f.data().chunks(c * h * w) {
            out.push(row.chunks(h * w).map(|ch| ch.iter().sum::<f64>() / (h * w) as f64).collect());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub n: usize,
    pub dice: f64,
    pub hd95: Option<f64>,
    pub hd95_sentinels: usize,
}

impl DomainScore {
    fn from_records(domain: &str, records: &[EvalRecord]) -> Self {
        let s = summarize(records);
        DomainScore {
            domain: domain.to_string(),
            n: s.n,
            dice: s.mean_dice,
            hd95: s.mean_hd95,
            hd95_sentinels: s.hd95_sentinels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub encoder_hash: String,
    pub snapshot_hash: String,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub id: DomainScore,
    pub ood: Vec<DomainScore>,
    pub avg_ood_dice: f64,
    pub avg_ood_hd95: Option<f64>,
    /// ID Dice minus the unweighted mean OOD Dice.
    pub gap: f64,
    pub probe_accuracy: f64,
}

pub fn run_id(method: Method, seed: u64) -> String {
    format!("{method}-s{seed}")
}

/// A trained run with everything needed to write its artifacts.
pub struct RunOutput {
    pub row: RunRow,
    pub snapshot: crate::model::ModelSnapshot,
    pub log: RunLog,
    pub timing: trainer::Timing,
    pub records: Vec<EvalRecord>,
}

/// Encoder features of the evaluation splits.
pub struct EvalBanks<'a> {
    pub id_test: &'a FeatureBank,
    pub ood_tests: &'a BTreeMap<String, FeatureBank>,
}

/// ID and OOD scores of one model plus its domain-probe accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub id: DomainScore,
    pub ood: Vec<DomainScore>,
    pub avg_ood_dice: f64,
    pub avg_ood_hd95: Option<f64>,
    pub gap: f64,
    pub probe_accuracy: f64,
}

/// Evaluates `model` on the test splits. The probe is trained on pooled
/// adapter features labelled ID = 0 and OOD domains 1.. in name order.
pub fn score_model(
    model: &SegModel,
    banks: &EvalBanks,
    data: &Dataset,
    probe_seed: u64,
) -> Result<(Scores, Vec<EvalRecord>)> {
    let id_records = evaluate(model, banks.id_test, &data.id_test, None)?;
    let mut records = id_records.clone();
    let mut ood = Vec::new();
    for (name, samples) in &data.ood_tests {
        let r = evaluate(model, &banks.ood_tests[name], samples, None)?;
        ood.push(DomainScore::from_records(name, &r));
        records.extend(r);
    }

    let mut feats = pooled_features(model, banks.id_test)?;
    let mut labels = vec![0; feats.len()];
    for (d, bank) in banks.ood_tests.values().enumerate() {
        let f = pooled_features(model, bank)?;
        labels.extend(std::iter::repeat_n(d + 1, f.len()));
        feats.extend(f);
    }
    let probe_accuracy = domain_probe(&feats, &labels, probe_seed)?;

    let id = DomainScore::from_records("id", &id_records);
    let avg_ood_dice = mean(ood.iter().map(|d| d.dice));
    let hd: Vec<f64> = ood.iter().filter_map(|d| d.hd95).collect();
    let scores = Scores {
        gap: id.dice - avg_ood_dice,
        id,
        avg_ood_hd95: (hd.len() == ood.len() && !hd.is_empty()).then(|| mean(hd.iter().copied())),
        ood,
        avg_ood_dice,
        probe_accuracy,
    };
    Ok((scores, records))
}

/// Trains one method on one seed's shared encoder and evaluates it.
pub fn run_method(cfg: &BenchConfig, ctx: &SeedContext, data: &Dataset, tc: &TrainConfig) -> Result<RunOutput> {
    let out = trainer::train(tc, &cfg.model, &ctx.encoder, &ctx.codebook, &data.train, &ctx.train)?;
    let banks = EvalBanks {
        id_test: &ctx.id_test,
        ood_tests: &ctx.ood_tests,
    };
    let probe_seed = seed::derive(ctx.seed, &[seed::tag("probe")]);
    let (s, records) = score_model(&out.snapshot.model, &banks, data, probe_seed)?;
    let row = RunRow {
        run_id: run_id(tc.method, ctx.seed),
        method: tc.method,
        seed: ctx.seed,
        encoder_hash: ctx.encoder_hash.clone(),
        snapshot_hash: out.snapshot.content_hash(),
        best_epoch: out.best_epoch,
        best_val_dice: out.best_val_dice,
        id: s.id,
        ood: s.ood,
        avg_ood_dice: s.avg_ood_dice,
        avg_ood_hd95: s.avg_ood_hd95,
        gap: s.gap,
        probe_accuracy: s.probe_accuracy,
    };
    Ok(RunOutput {
        row,
        snapshot: out.snapshot,
        log: out.log,
        timing: out.timing,
        records,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStat {
    pub domain: String,
    pub dice: Stat,
    pub hd95: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub seeds: usize,
    /// ID first, then each OOD domain.
    pub domains: Vec<DomainStat>,
    pub avg_ood_dice: Stat,
    pub gap: Stat,
    pub probe_accuracy: Stat,
}

/// Share of seeds on which `better` beats `other` on mean OOD Dice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub better: Method,
    pub other: Method,
    pub wins: usize,
    pub seeds: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotCheck {
    pub seed: u64,
    /// LAD at lambda 0 produced the same snapshot as the ERM run.
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<RunRow>,
    pub summary: Vec<MethodSummary>,
    pub orderings: Vec<Ordering>,
    pub spot_checks: Vec<SpotCheck>,
    pub intervention: Option<InterventionStudy>,
    pub notes: Vec<String>,
}

pub use crate::reasoner::study::InterventionStudy;

pub fn summarize_rows(methods: &[Method], rows: &[RunRow]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|&m| {
            let rs: Vec<&RunRow> = rows.iter().filter(|r| r.method == m).collect();
            let stat = |f: &dyn Fn(&RunRow) -> f64| Stat::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let domain = |name: &str, pick: &dyn Fn(&RunRow) -> &DomainScore| {
                let hd: Vec<f64> = rs.iter().filter_map(|r| pick(r).hd95).collect();
                DomainStat {
                    domain: name.to_string(),
                    dice: Stat::of(&rs.iter().map(|r| pick(r).dice).collect::<Vec<_>>()),
                    hd95: (hd.len() == rs.len() && !hd.is_empty()).then(|| Stat::of(&hd)),
                }
            };
            let mut domains = vec![domain("id", &|r| &r.id)];
            if let Some(first) = rs.first() {
                for (i, d) in first.ood.iter().enumerate() {
                    domains.push(domain(&d.domain, &|r| &r.ood[i]));
                }
            }
            MethodSummary {
                method: m,
                seeds: rs.len(),
                domains,
                avg_ood_dice: stat(&|r| r.avg_ood_dice),
                gap: stat(&|r| r.gap),
                probe_accuracy: stat(&|r| r.probe_accuracy),
            }
        })
        .collect()
}

pub fn orderings(rows: &[RunRow], seeds: &[u64]) -> Vec<Ordering> {
    let pairs = [
        (Method::Lad, Method::ErmLambda0),
        (Method::Lad, Method::Grl),
        (Method::Lad, Method::Mixstyle),
        (Method::Grl, Method::ErmLambda0),
    ];
    let find = |m: Method, s: u64| rows.iter().find(|r| r.method == m && r.seed == s);
    pairs
        .into_iter()
        .filter_map(|(a, b)| {
            let both: Vec<(f64, f64)> = seeds
                .iter()
                .filter_map(|&s| Some((find(a, s)?.avg_ood_dice, find(b, s)?.avg_ood_dice)))
                .collect();
            (!both.is_empty()).then(|| {
                let wins = both.iter().filter(|(x, y)| x > y).count();
                Ordering {
                    better: a,
                    other: b,
                    wins,
                    seeds: both.len(),
                    fraction: wins as f64 / both.len() as f64,
                }
            })
        })
        .collect()
}

/// Output of [`run_protocol`]: the report plus per-run artifacts.
pub struct ProtocolOutput {
    pub data: Dataset,
    pub report: BenchReport,
    pub runs: Vec<RunOutput>,
    pub contexts: Vec<SeedContext>,
}

/// Trains and evaluates every (method, seed) with one shared encoder per
/// seed. `on_run` sees each run as it finishes.
pub fn run_protocol(cfg: &BenchConfig, mut on_run: impl FnMut(&RunOutput)) -> Result<ProtocolOutput> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.dataset)?;
    let mut runs = Vec::new();
    let mut contexts = Vec::new();
    let mut spot_checks = Vec::new();
    for &s in &cfg.seeds {
        let ctx = prepare_seed(cfg, &data, s)?;
        for &m in &cfg.methods {
            let out = run_method(cfg, &ctx, &data, &cfg.run_config(m, s))?;
            on_run(&out);
            runs.push(out);
        }
        if cfg.lambda_spot_check {
            let erm = runs
                .iter()
                .find(|r| r.row.seed == s && r.row.method == Method::ErmLambda0)
                .ok_or_else(|| BenchError::Config("lambda spot check needs the erm_lambda0 method".into()))?;
            let tc = TrainConfig {
                lambda: 0.0,
                ..cfg.run_config(Method::Lad, s)
            };
            let lad0 = trainer::train(&tc, &cfg.model, &ctx.encoder, &ctx.codebook, &data.train, &ctx.train)?;
            spot_checks.push(SpotCheck {
                seed: s,
                identical: lad0.snapshot.model == erm.snapshot.model,
            });
        }
        contexts.push(ctx);
    }
    let rows: Vec<RunRow> = runs.iter().map(|r| r.row.clone()).collect();
    let report = BenchReport {
        config: cfg.clone(),
        summary: summarize_rows(&cfg.methods, &rows),
        orderings: orderings(&rows, &cfg.seeds),
        rows,
        spot_checks,
        intervention: None,
        notes: Vec::new(),
    };
    Ok(ProtocolOutput {
        data,
        report,
        runs,
        contexts,
    })
}

/// The four-method ablation with the lambda spot check enabled.
pub fn ablation_suite(cfg: &BenchConfig, on_run: impl FnMut(&RunOutput)) -> Result<ProtocolOutput> {
    let cfg = BenchConfig {
        methods: Method::ALL.to_vec(),
        lambda_spot_check: true,
        ..cfg.clone()
    };
    run_protocol(&cfg, on_run)
}

#[cfg(test)]
mod tests;
