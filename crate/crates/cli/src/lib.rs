//! `causalseg` subcommands. Each stage writes into its own directory under
//! `--out-dir` and records a manifest with the resolved config, the hashes
//! of its inputs and the hashes of everything it wrote.

mod error;
pub mod repl;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use causalseg::evalbench::{
    ablation_suite, emit_report, file_entry, load_report, pretrain_pool, score_model, BenchConfig, EvalBanks,
    ManifestEntry, ReportFormat,
};
use causalseg::metrics::{write_records_csv, write_records_jsonl};
use causalseg::model::{pretrain_encoder, ModelConfig, ModelSnapshot, PretrainConfig, SegModel};
use causalseg::reasoner::study::{intervention_study, StudyConfig};
use causalseg::reasoner::{
    synth_pairs, train_reasoner, FilmPredictor, InterventionPair, ReasonerConfig, ReasonerModel, RuleReasoner,
    SynthConfig, SynthOutcome,
};
use causalseg::seed;
use causalseg::styletext::AttributeCodebook;
use causalseg::synthgen::{generate_dataset, read_dataset, write_dataset, CorruptionKind, Dataset, DatasetConfig};
use causalseg::trainer::{self, FeatureBank, Method, TrainConfig};

pub use error::{CliError, Result};

/// Footer for reports whose intervention cases come from known corruptions.
pub const INDUCED_NOTE: &str = "Intervention cases are induced: each OOD sample is corrupted with a known cause \
and the command names that cause. They are not a curated set of naturally hard cases.";

#[derive(Debug, Parser)]
#[command(name = "causalseg", version, about = "Style-disentangled segmentation with language-driven FiLM intervention")]
pub struct Cli {
    /// Seed for every stage; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML pipeline config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root of all outputs; relative input paths resolve against it.
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    Datagen(DatagenArgs),
    /// Pretrain and freeze the encoder.
    Pretrain(PretrainArgs),
    /// Train one method on the frozen encoder.
    Train(TrainArgs),
    /// Evaluate a snapshot; with a reasoner also run the intervention study.
    Eval(EvalArgs),
    /// Run every method over several seeds.
    Ablate(AblateArgs),
    /// Search FiLM corrections for corrupted samples.
    SynthPairs(SynthArgs),
    /// Fit the learned reasoner on intervention pairs.
    TrainReasoner(ReasonerArgs),
    /// Interactive correction loop on stdin.
    Intervene(InterveneArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Render a benchmark report as JSON, CSV and Markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub samples_per_domain: Option<usize>,
    #[arg(long)]
    pub test_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset directory [default: data].
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Styled samples in the pretraining pool.
    #[arg(long)]
    pub pool: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory [default: data].
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Pretrained encoder snapshot [default: encoder/encoder.cslm].
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelInputs {
    /// Trained model snapshot.
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Dataset directory [default: data].
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Learned reasoner sidecar for the intervention study.
    #[arg(long, conflicts_with = "rule")]
    pub reasoner: Option<PathBuf>,
    /// Run the intervention study with the rule table.
    #[arg(long)]
    pub rule: bool,
    /// Intervention study cases.
    #[arg(long)]
    pub cases: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long)]
    pub n_per_kind: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReasonerArgs {
    /// Pair file [default: pairs/pairs.json].
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Snapshot the pairs were searched on.
    #[arg(long)]
    pub snapshot: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Learned reasoner sidecar.
    #[arg(long, conflicts_with = "rule")]
    pub reasoner: Option<PathBuf>,
    /// Use the rule table instead of a learned reasoner.
    #[arg(long)]
    pub rule: bool,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Test domain to draw samples from [default: first OOD domain].
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub corruption: Option<CorruptionKind>,
    #[arg(long, default_value_t = 0.7)]
    pub severity: f64,
    /// ANSI colors in mask previews.
    #[arg(long)]
    pub color: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Trained model snapshot.
    #[arg(long)]
    pub snapshot: PathBuf,
    /// Dataset directory served by /v1/sample.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    #[arg(long, default_value_t = 256)]
    pub session_cap: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Benchmark report JSON [default: ablate/report.json].
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Intervention study JSON to attach.
    #[arg(long)]
    pub study: Option<PathBuf>,
}

/// Method list, seeds and spot check for `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub lambda_spot_check: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchSettings {
            methods: b.methods,
            seeds: b.seeds,
            lambda_spot_check: true,
        }
    }
}

/// Every stage's settings in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_pool: usize,
    pub train: TrainConfig,
    pub bench: BenchSettings,
    pub synth: SynthConfig,
    pub reasoner: ReasonerConfig,
    pub study: StudyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let b = BenchConfig::default();
        PipelineConfig {
            dataset: b.dataset,
            model: b.model,
            pretrain: b.pretrain,
            pretrain_pool: b.pretrain_pool,
            train: b.train,
            bench: BenchSettings::default(),
            synth: SynthConfig::default(),
            reasoner: ReasonerConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("--config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("--config {}: {e}", path.display())))
    }

    pub fn apply_seed(&mut self, s: u64) {
        self.dataset.master_seed = s;
        self.train.seed = s;
        self.synth.seed = s;
        self.reasoner.seed = s;
        self.study.seed = s;
    }

    pub fn bench(&self) -> BenchConfig {
        BenchConfig {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            pretrain: self.pretrain.clone(),
            pretrain_pool: self.pretrain_pool,
            train: self.train.clone(),
            methods: self.bench.methods.clone(),
            seeds: self.bench.seeds.clone(),
            lambda_spot_check: self.bench.lambda_spot_check,
        }
    }
}

/// What a stage ran with, what it read and what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: PipelineConfig,
    /// Paths relative to `--out-dir` when under it.
    pub inputs: Vec<ManifestEntry>,
    /// Paths relative to the stage directory.
    pub outputs: Vec<ManifestEntry>,
}

pub struct Ctx {
    pub out_dir: PathBuf,
    pub quiet: bool,
    pub config: PipelineConfig,
}

impl Ctx {
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = cli.seed {
            config.apply_seed(s);
        }
        Ok(Ctx {
            out_dir: cli.out_dir.clone(),
            quiet: cli.quiet,
            config,
        })
    }

    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    /// Resolves a path flag, falling back to `default`, and checks it exists.
    fn input(&self, flag: &str, given: Option<&Path>, default: &str) -> Result<PathBuf> {
        let p = self.resolve(given.unwrap_or(Path::new(default)));
        if !p.exists() {
            return Err(CliError::missing(flag, &p));
        }
        Ok(p)
    }

    fn stage_dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out_dir.join(name);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn finish(&self, dir: &Path, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<RunManifest> {
        let mut ins = Vec::new();
        for p in inputs {
            ins.push(file_entry(&self.out_dir, p)?);
        }
        let mut outs = Vec::new();
        for p in outputs {
            outs.push(file_entry(dir, p)?);
        }
        outs.sort_by(|a, b| a.path.cmp(&b.path));
        let m = RunManifest {
            command: command.into(),
            config: self.config.clone(),
            inputs: ins,
            outputs: outs,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        std::fs::write(dir.join("manifest.json"), text)?;
        self.say(format!("wrote {}", dir.join("manifest.json").display()));
        Ok(m)
    }

    fn load_data(&self, flag_value: Option<&Path>) -> Result<(PathBuf, DatasetConfig, Dataset)> {
        let dir = self.input("--dataset", flag_value, "data")?;
        let (dc, data) = read_dataset(&dir)?;
        Ok((dir, dc, data))
    }

    fn load_snapshot(&self, flag: &str, p: &Path) -> Result<(PathBuf, ModelSnapshot)> {
        let path = self.input(flag, Some(p), "")?;
        let s = ModelSnapshot::load(&path)?;
        Ok((path, s))
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(path.to_path_buf())
}

fn check_data_fits(model: &ModelConfig, dc: &DatasetConfig) -> Result<()> {
    if model.image_size != dc.image_size || model.num_classes != dc.num_classes {
        return Err(CliError::Config(format!(
            "model expects {}x{} images with {} classes, dataset has {}x{} with {}",
            model.image_size, model.image_size, model.num_classes, dc.image_size, dc.image_size, dc.num_classes
        )));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut ctx = Ctx::from_cli(&cli)?;
    match cli.command {
        Command::Datagen(a) => datagen(&mut ctx, &a),
        Command::Pretrain(a) => pretrain(&mut ctx, &a),
        Command::Train(a) => train(&mut ctx, &a),
        Command::Eval(a) => eval(&mut ctx, &a),
        Command::Ablate(a) => ablate(&mut ctx, &a),
        Command::SynthPairs(a) => synth(&mut ctx, &a),
        Command::TrainReasoner(a) => fit_reasoner(&mut ctx, &a),
        Command::Intervene(a) => intervene(&ctx, &a),
        Command::Serve(a) => serve(&ctx, &a),
        Command::Report(a) => report(&ctx, &a),
    }
}

fn datagen(ctx: &mut Ctx, a: &DatagenArgs) -> Result<()> {
    let dc = &mut ctx.config.dataset;
    if let Some(v) = a.image_size {
        dc.image_size = v;
        ctx.config.model.image_size = v;
    }
    if let Some(v) = a.num_classes {
        dc.num_classes = v;
        ctx.config.model.num_classes = v;
    }
    if let Some(v) = a.samples_per_domain {
        dc.samples_per_domain = v;
    }
    if let Some(v) = a.test_samples {
        dc.test_samples_per_domain = v;
    }
    let data = generate_dataset(&ctx.config.dataset)?;
    let dir = ctx.stage_dir("data")?;
    let files = write_dataset(&dir, &data, &ctx.config.dataset)?;
    ctx.say(format!(
        "{} train, {} ID test, {} OOD domains",
        data.train.len(),
        data.id_test.len(),
        data.ood_tests.len()
    ));
    ctx.finish(&dir, "datagen", &[], &files)?;
    Ok(())
}

fn pretrain(ctx: &mut Ctx, a: &PretrainArgs) -> Result<()> {
    let (data_dir, dc, data) = ctx.load_data(a.dataset.as_deref())?;
    let cfg = &mut ctx.config;
    cfg.dataset = dc;
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(p) = a.pool {
        cfg.pretrain_pool = p;
    }
    let cfg = &ctx.config;
    check_data_fits(&cfg.model, &cfg.dataset)?;
    let s = cfg.train.seed;
    let pool = pretrain_pool(&cfg.bench(), &data, s);
    ctx.say(format!("pretraining on {} styled samples", pool.len()));
    let (encoder, rep) = pretrain_encoder(
        &cfg.model,
        &cfg.dataset,
        &pool,
        &cfg.pretrain,
        seed::derive(s, &[seed::tag("pretrain")]),
    )?;
    ctx.say(format!(
        "holdout reconstruction mse {:.5} -> {:.5}",
        rep.initial_holdout_mse, rep.final_holdout_mse
    ));
    let snap = ModelSnapshot {
        model: SegModel::new(cfg.model.clone(), encoder, 0)?,
        grl: None,
        codebook: AttributeCodebook::new(cfg.train.codebook_seed, cfg.model.style_dim),
        method: "pretrain".into(),
        seeds: BTreeMap::from([("pretrain".to_string(), s)]),
    };
    let dir = ctx.stage_dir("encoder")?;
    let snap_path = dir.join("encoder.cslm");
    snap.save(&snap_path)?;
    let rep_path = write_json(&dir.join("pretrain.json"), &rep)?;
    ctx.finish(&dir, "pretrain", &[data_dir.join("manifest.json")], &[snap_path, rep_path])?;
    Ok(())
}

fn train(ctx: &mut Ctx, a: &TrainArgs) -> Result<()> {
    let (data_dir, dc, data) = ctx.load_data(a.dataset.as_deref())?;
    let enc_path = ctx.input("--encoder", a.encoder.as_deref(), "encoder/encoder.cslm")?;
    let enc = ModelSnapshot::load(&enc_path)?;
    let cfg = &mut ctx.config;
    cfg.dataset = dc;
    cfg.model = enc.model.config.clone();
    check_data_fits(&cfg.model, &cfg.dataset)?;
    if let Some(m) = a.method {
        cfg.train.method = m;
    }
    if let Some(l) = a.lambda {
        cfg.train.lambda = l;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.validate()?;
    let cfg = &ctx.config;
    let tc = cfg.train.clone();
    let probe = SegModel::new(cfg.model.clone(), enc.model.encoder.clone(), 0)?;
    let bank = FeatureBank::encode(&probe, &data.train)?;
    let codebook = AttributeCodebook::new(tc.codebook_seed, cfg.model.style_dim);
    ctx.say(format!("training {} for {} epochs on {} samples", tc.method, tc.epochs, data.train.len()));
    let out = trainer::train(&tc, &cfg.model, &enc.model.encoder, &codebook, &data.train, &bank)?;
    for (e, secs) in out.timing.epoch_seconds.iter().enumerate() {
        ctx.say(format!("epoch {e}: {secs:.1}s"));
    }
    ctx.say(format!("best epoch {} val dice {:.4}", out.best_epoch, out.best_val_dice));
    let dir = ctx.stage_dir(&format!("train-{}", tc.method))?;
    let snap_path = dir.join("model.cslm");
    out.snapshot.save(&snap_path)?;
    let log_path = dir.join("log.jsonl");
    out.log.write(&log_path)?;
    ctx.finish(&dir, "train", &[data_dir.join("manifest.json"), enc_path], &[snap_path, log_path])?;
    Ok(())
}

fn backend<'a>(
    ctx: &Ctx,
    reasoner: Option<&Path>,
    rule: bool,
    snap: &'a ModelSnapshot,
) -> Result<(Box<dyn FilmPredictor + 'a>, Option<PathBuf>)> {
    match (reasoner, rule) {
        (Some(p), _) => {
            let path = ctx.input("--reasoner", Some(p), "")?;
            let (r, _) = ReasonerModel::load(&path)?;
            if r.num_classes != snap.model.config.num_classes || r.widths != snap.model.decoder.widths {
                return Err(CliError::Config(
                    "--reasoner was trained for a different decoder than --snapshot".into(),
                ));
            }
            Ok((Box::new(r), Some(path)))
        }
        (None, true) => Ok((
            Box::new(RuleReasoner {
                decoder: &snap.model.decoder,
            }),
            None,
        )),
        (None, false) => Err(CliError::Config("give --reasoner <file> or --rule".into())),
    }
}

fn eval(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    let (data_dir, dc, data) = ctx.load_data(a.inputs.dataset.as_deref())?;
    let (snap_path, snap) = ctx.load_snapshot("--snapshot", &a.inputs.snapshot)?;
    ctx.config.dataset = dc;
    ctx.config.model = snap.model.config.clone();
    check_data_fits(&ctx.config.model, &ctx.config.dataset)?;
    if let Some(n) = a.cases {
        ctx.config.study.n_cases = n;
    }
    let model = &snap.model;
    let id_test = FeatureBank::encode(model, &data.id_test)?;
    let mut ood_tests = BTreeMap::new();
    for (name, samples) in &data.ood_tests {
        ood_tests.insert(name.clone(), FeatureBank::encode(model, samples)?);
    }
    let banks = EvalBanks {
        id_test: &id_test,
        ood_tests: &ood_tests,
    };
    let probe_seed = seed::derive(ctx.config.train.seed, &[seed::tag("probe")]);
    let (scores, records) = score_model(model, &banks, &data, probe_seed)?;
    ctx.say(format!(
        "ID dice {:.4}  avg OOD dice {:.4}  gap {:.4}  probe {:.3}",
        scores.id.dice, scores.avg_ood_dice, scores.gap, scores.probe_accuracy
    ));

    let dir = ctx.stage_dir("eval")?;
    let mut outputs = vec![write_json(&dir.join("scores.json"), &scores)?];
    let jsonl = dir.join("records.jsonl");
    write_records_jsonl(std::fs::File::create(&jsonl)?, &records)?;
    let csv = dir.join("records.csv");
    write_records_csv(std::fs::File::create(&csv)?, &records, model.config.num_classes)?;
    outputs.extend([jsonl, csv]);
    let mut inputs = vec![data_dir.join("manifest.json"), snap_path];

    if a.reasoner.is_some() || a.rule {
        let (pred, rpath) = backend(ctx, a.reasoner.as_deref(), a.rule, &snap)?;
        inputs.extend(rpath);
        let ood: Vec<_> = data.ood_tests.values().flatten().cloned().collect();
        let study = intervention_study(model, pred.as_ref(), &ood, &ctx.config.study)?;
        ctx.say(format!(
            "intervention: dice {:.4} -> {:.4}, improved {}/{}",
            study.dice_a.mean,
            study.dice_b.mean,
            study.improved,
            study.cases.len()
        ));
        outputs.push(write_json(&dir.join("study.json"), &study)?);
    }
    ctx.finish(&dir, "eval", &inputs, &outputs)?;
    Ok(())
}

fn ablate(ctx: &mut Ctx, a: &AblateArgs) -> Result<()> {
    if let Some(s) = &a.seeds {
        ctx.config.bench.seeds = s.clone();
    }
    if let Some(e) = a.epochs {
        ctx.config.train.epochs = e;
    }
    let bench = ctx.config.bench();
    let dir = ctx.stage_dir("ablate")?;
    let runs_dir = dir.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    let mut outputs = Vec::new();
    let mut io_err = None;
    let quiet = ctx.quiet;
    let out = ablation_suite(&bench, |r| {
        if !quiet {
            eprintln!(
                "{}: ID {:.4} OOD {:.4} gap {:.4} probe {:.3}",
                r.row.run_id, r.row.id.dice, r.row.avg_ood_dice, r.row.gap, r.row.probe_accuracy
            );
        }
        let snap = runs_dir.join(format!("{}.cslm", r.row.run_id));
        let log = runs_dir.join(format!("{}.log.jsonl", r.row.run_id));
        match r.snapshot.save(&snap).map_err(CliError::from).and_then(|_| Ok(r.log.write(&log)?)) {
            Ok(()) => outputs.extend([snap, log]),
            Err(e) => io_err = io_err.take().or(Some(e)),
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    ctx.config.bench.methods = out.report.config.methods.clone();
    ctx.config.bench.lambda_spot_check = out.report.config.lambda_spot_check;
    outputs.extend(emit_report(&out.report, &dir, &ReportFormat::ALL)?);
    ctx.finish(&dir, "ablate", &[], &outputs)?;
    Ok(())
}

fn synth(ctx: &mut Ctx, a: &SynthArgs) -> Result<()> {
    let (data_dir, dc, data) = ctx.load_data(a.inputs.dataset.as_deref())?;
    let (snap_path, snap) = ctx.load_snapshot("--snapshot", &a.inputs.snapshot)?;
    ctx.config.dataset = dc;
    ctx.config.model = snap.model.config.clone();
    check_data_fits(&ctx.config.model, &ctx.config.dataset)?;
    if let Some(n) = a.n_per_kind {
        ctx.config.synth.n_per_kind = n;
    }
    // Pairs come from the training split; the study uses OOD test samples.
    let outcome = synth_pairs(&snap.model, &data.train, &ctx.config.synth)?;
    ctx.say(format!(
        "kept {} of {} searched pairs ({} without gain)",
        outcome.pairs.len(),
        outcome.searched,
        outcome.skipped
    ));
    let dir = ctx.stage_dir("pairs")?;
    let path = write_json(&dir.join("pairs.json"), &outcome)?;
    ctx.finish(&dir, "synth-pairs", &[data_dir.join("manifest.json"), snap_path], &[path])?;
    Ok(())
}

fn fit_reasoner(ctx: &mut Ctx, a: &ReasonerArgs) -> Result<()> {
    let pairs_path = ctx.input("--pairs", a.pairs.as_deref(), "pairs/pairs.json")?;
    let (snap_path, snap) = ctx.load_snapshot("--snapshot", &a.snapshot)?;
    let outcome: SynthOutcome = serde_json::from_slice(&std::fs::read(&pairs_path)?)?;
    let pairs: Vec<InterventionPair> = outcome.pairs;
    if let Some(e) = a.epochs {
        ctx.config.reasoner.epochs = e;
    }
    ctx.config.model = snap.model.config.clone();
    let r = train_reasoner(
        &pairs,
        snap.model.config.num_classes,
        &snap.model.decoder.widths,
        &ctx.config.reasoner,
    )?;
    ctx.say(format!("reasoner fit on {} pairs, final mse {:.5}", pairs.len(), r.meta.final_mse));
    let dir = ctx.stage_dir("reasoner")?;
    let path = dir.join("reasoner.cslr");
    r.save(&path, Some(&pairs))?;
    ctx.finish(&dir, "train-reasoner", &[pairs_path, snap_path], &[path])?;
    Ok(())
}

fn intervene(ctx: &Ctx, a: &InterveneArgs) -> Result<()> {
    let (_, _, data) = ctx.load_data(a.inputs.dataset.as_deref())?;
    let (_, snap) = ctx.load_snapshot("--snapshot", &a.inputs.snapshot)?;
    let (pred, _) = backend(ctx, a.backend.reasoner.as_deref(), a.backend.rule, &snap)?;
    let domain = match &a.domain {
        Some(d) => d.clone(),
        None => data
            .ood_tests
            .keys()
            .next()
            .cloned()
            .ok_or_else(|| CliError::Config("dataset has no OOD domain".into()))?,
    };
    let samples = repl::domain_samples(&data, &domain)
        .ok_or_else(|| CliError::Config(format!("--domain: no test domain {domain:?}")))?;
    let corruption = match a.corruption {
        Some(k) if !(a.severity > 0.0 && a.severity <= 1.0) => {
            return Err(CliError::Config(format!("--severity {} outside (0, 1] for {k}", a.severity)))
        }
        Some(k) => Some((k, a.severity)),
        None => None,
    };
    let session = repl::Repl {
        model: &snap.model,
        reasoner: pred.as_ref(),
        domain,
        samples,
        index: a.index,
        corruption,
        color: a.color,
    };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    session.run(stdin.lock(), &mut stdout.lock())
}

fn serve(ctx: &Ctx, a: &ServeArgs) -> Result<()> {
    use causalseg_service::{AppState, LoadedModel, ReasonerBackend, SampleStore, ServiceConfig};
    let (_, snap) = ctx.load_snapshot("--snapshot", &a.snapshot)?;
    let reasoner = match (&a.backend.reasoner, a.backend.rule) {
        (Some(p), _) => {
            let path = ctx.input("--reasoner", Some(p), "")?;
            ReasonerBackend::Learned(Box::new(ReasonerModel::load(&path)?.0))
        }
        (None, true) => ReasonerBackend::Rule,
        (None, false) => return Err(CliError::Config("give --reasoner <file> or --rule".into())),
    };
    let samples = match &a.dataset {
        Some(d) => Some(SampleStore::from_dataset(&ctx.load_data(Some(d))?.2)),
        None => None,
    };
    let state = Arc::new(AppState::new(
        Some(LoadedModel::new(snap, reasoner)),
        samples,
        ServiceConfig {
            session_cap: a.session_cap,
            seed: ctx.config.train.seed,
            ..ServiceConfig::default()
        },
    ));
    if !ctx.quiet {
        tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(causalseg_service::serve(state, a.addr))?;
    Ok(())
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let input = ctx.input("--input", a.input.as_deref(), "ablate/report.json")?;
    let mut rep = load_report(&input)?;
    let mut inputs = vec![input];
    if let Some(p) = &a.study {
        let path = ctx.input("--study", Some(p), "")?;
        rep.intervention = Some(serde_json::from_slice(&std::fs::read(&path)?)?);
        inputs.push(path);
    }
    if rep.intervention.is_some() && !rep.notes.iter().any(|n| n == INDUCED_NOTE) {
        rep.notes.push(INDUCED_NOTE.into());
    }
    let dir = ctx.stage_dir("report")?;
    let files = emit_report(&rep, &dir, &ReportFormat::ALL)?;
    ctx.finish(&dir, "report", &inputs, &files)?;
    Ok(())
}
