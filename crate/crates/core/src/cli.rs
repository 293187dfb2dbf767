//! Command-line front end. Every subcommand is a thin wrapper over the
//! library; [`run`] maps errors to exit codes (1 for invalid input, 2 for
//! runtime failures).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io_util::{build_dir_atomic, write_atomic};
use crate::nn::{checkpoint, AdapterPosition, LoraTarget};
use crate::oracle::{oracle_check, QuadratureSpec};
use crate::pipeline::{
    evaluate, fold_splits, predict_patients, run_copula_estimation, run_copula_training, run_crossval, run_fold,
    run_warmup, DataSource, EpochLog, EstimatedCopula, ExperimentConfig, LossMode, MetricsRecord, Summary, TrunkInit,
    METRIC_NAMES,
};
use crate::synthdata::{Dataset, SynthConfig};

/// Environment variable naming the directory used when `--out` is omitted.
pub const OUT_ROOT_ENV: &str = "BICOPULA_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "bicopula", version, about = "Copula-loss bi-channel transformer laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired-eye dataset.
    SynthGen(SynthGenArgs),
    /// Run one fold's training modules.
    Train(TrainArgs),
    /// Estimate copula parameters from a warm-up checkpoint.
    EstimateCopula(EstimateArgs),
    /// Evaluate a checkpoint on one split of a fold.
    Eval(EvalArgs),
    /// Cross-validate the full three-module procedure.
    Crossval(CrossvalArgs),
    /// Compare the closed-form density with the numerical oracle.
    OracleCheck(OracleArgs),
    /// Tabulate several crossval runs side by side.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// SynthConfig JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub asymmetry: Option<f64>,
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Empirical,
    Copula,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Q,
    K,
    V,
    O,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PositionArg {
    AtFfn,
    AfterEmbedding,
    BeforeFfn,
    BeforeFc,
}

/// Experiment configuration: an optional JSON file plus per-field overrides.
#[derive(Args, Debug, Default, Clone)]
pub struct ExperimentArgs {
    /// ExperimentConfig JSON (see schema/experiment_config.schema.json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by synth-gen, instead of generating one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Patients in the generated dataset.
    #[arg(long)]
    pub patients: Option<usize>,
    /// Seed of the generated dataset.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long, value_enum)]
    pub adapters: Option<Toggle>,
    #[arg(long)]
    pub lora_rank: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub lora_targets: Option<Vec<TargetArg>>,
    #[arg(long, value_enum)]
    pub adapter_position: Option<PositionArg>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub epochs_warmup: Option<usize>,
    #[arg(long)]
    pub epochs_copula: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_drop_epoch: Option<usize>,
    #[arg(long)]
    pub lr_after: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Re-estimate copula parameters at the start of every module-3 epoch.
    #[arg(long)]
    pub reestimate: bool,
    /// Epochs of patch-reconstruction pretraining of the frozen trunk.
    #[arg(long)]
    pub pretext_epochs: Option<usize>,
}

/// Config fields and the flags that set them, for error messages.
const FIELD_FLAGS: [(&str, &str); 17] = [
    ("epochs_warmup", "--epochs-warmup"),
    ("epochs_copula", "--epochs-copula"),
    ("batch_size", "--batch-size"),
    ("folds", "--folds"),
    ("split", "--config (split)"),
    ("learning rate", "--lr/--lr-after"),
    ("lora_rank", "--lora-rank"),
    ("lora_targets", "--lora-targets"),
    ("patch_size", "--patch-size"),
    ("embed_dim", "--embed-dim"),
    ("depth", "--depth"),
    ("heads", "--heads"),
    ("n_patients", "--patients"),
    ("patients", "--patients"),
    ("image size", "--image-size"),
    ("pretext", "--pretext-epochs"),
    ("asymmetry", "--asymmetry"),
];

fn flag_hint(msg: &str) -> Option<&'static str> {
    FIELD_FLAGS.iter().find(|(f, _)| msg.contains(f)).map(|(_, flag)| *flag)
}

impl ExperimentArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str::<ExperimentConfig>(&text)
                    .map_err(|e| Error::Config(format!("--config {}: {e}", p.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.data {
            cfg.data = DataSource::Path(p.clone());
        }
        if self.patients.is_some() || self.data_seed.is_some() {
            let DataSource::Synth(s) = &mut cfg.data else {
                return Err(Error::Config("--patients/--data-seed cannot be combined with --data".into()));
            };
            if let Some(n) = self.patients {
                s.n_patients = n;
            }
            if let Some(v) = self.data_seed {
                s.seed = v;
            }
        }
        let m = &mut cfg.model;
        if let Some(l) = self.loss {
            cfg.loss_mode = match l {
                LossArg::Empirical => LossMode::Empirical,
                LossArg::Copula => LossMode::Copula,
            };
        }
        if let Some(t) = self.adapters {
            m.adapters_enabled = t == Toggle::On;
        }
        if let Some(r) = self.lora_rank {
            m.lora_rank = r;
        }
        if let Some(ts) = &self.lora_targets {
            m.lora_targets = ts
                .iter()
                .map(|t| match t {
                    TargetArg::Q => LoraTarget::Query,
                    TargetArg::K => LoraTarget::Key,
                    TargetArg::V => LoraTarget::Value,
                    TargetArg::O => LoraTarget::Output,
                })
                .collect();
        }
        if let Some(p) = self.adapter_position {
            m.adapter_position = match p {
                PositionArg::AtFfn => AdapterPosition::AtFfn,
                PositionArg::AfterEmbedding => AdapterPosition::AfterEmbedding,
                PositionArg::BeforeFfn => AdapterPosition::BeforeFfn,
                PositionArg::BeforeFc => AdapterPosition::BeforeFc,
            };
        }
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut m.patch_size, self.patch_size);
        set(&mut m.embed_dim, self.embed_dim);
        set(&mut m.depth, self.depth);
        set(&mut m.heads, self.heads);
        set(&mut cfg.epochs_warmup, self.epochs_warmup);
        set(&mut cfg.epochs_copula, self.epochs_copula);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.lr_drop_epoch, self.lr_drop_epoch);
        set(&mut cfg.folds, self.folds);
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.lr_after {
            cfg.lr_after = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.reestimate {
            cfg.reestimate_each_epoch = true;
        }
        if let Some(e) = self.pretext_epochs {
            cfg.trunk_init = if e == 0 {
                TrunkInit::Random
            } else {
                TrunkInit::Pretext { epochs: e, lr: 1e-3 }
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Warmup,
    Copula,
    All,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, value_enum, default_value_t = Stage::All)]
    pub stage: Stage,
    /// Warm-up checkpoint; required by `--stage copula`.
    #[arg(long)]
    pub warmup: Option<PathBuf>,
    /// Module-2 artifact from estimate-copula; required by `--stage copula`.
    #[arg(long)]
    pub copula: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Warm-up checkpoint whose training-split predictions are used.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output file for the parameters.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Folds run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// Gauss–Legendre nodes per axis and panel.
    #[arg(long, default_value_t = 32)]
    pub nodes: usize,
    /// Include every case in the output, not just the summary.
    #[arg(long)]
    pub rows: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories written by crossval.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Merged CSV destination; defaults to `report.csv` under the output root.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Aggregate runs on different datasets.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub json: bool,
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                write!(msg, ": {s}").expect("string write");
                src = s.source();
            }
            if e.is_validation() {
                if let Some(flag) = flag_hint(&msg) {
                    write!(msg, " (check {flag})").expect("string write");
                }
                eprintln!("{msg}");
                1
            } else {
                eprintln!("{msg}");
                2
            }
        }
    }
}

/// Runs one command and returns what it prints on stdout.
pub fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => train(a),
        Command::EstimateCopula(a) => estimate(a),
        Command::Eval(a) => eval(a),
        Command::Crossval(a) => crossval(a),
        Command::OracleCheck(a) => oracle(a),
        Command::Report(a) => report(a),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn synth_gen(a: SynthGenArgs) -> Result<String> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SynthConfig>(&text)
                .map_err(|e| Error::Config(format!("--config {}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = a.patients {
        cfg.n_patients = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.image_size {
        cfg.image_size = v;
    }
    if let Some(v) = a.asymmetry {
        cfg.asymmetry_strength = v;
    }
    if let Some(v) = a.signal {
        cfg.signal_strength = v;
    }
    if let Some(v) = a.noise {
        cfg.noise_std = v;
    }
    cfg.validate()?;
    let out = a.out.unwrap_or_else(|| out_root().join(format!("data-{}", cfg.dataset_id())));
    let ds = Dataset::generate(&cfg)?;
    ds.write(&out)?;
    #[derive(Serialize)]
    struct Done<'a> {
        out: &'a Path,
        dataset_id: String,
        patients: usize,
        seed: u64,
    }
    let done = Done {
        out: &out,
        dataset_id: ds.dataset_id(),
        patients: ds.len(),
        seed: cfg.seed,
    };
    if a.json {
        to_json(&done)
    } else {
        Ok(format!("wrote {} patients to {} (dataset {})\n", done.patients, out.display(), done.dataset_id))
    }
}

fn fold_context(exp: &ExperimentArgs, fold: usize) -> Result<(ExperimentConfig, Dataset, crate::pipeline::FoldSplit)> {
    let cfg = exp.resolve()?;
    let ds = cfg.data.load()?;
    let mut splits = fold_splits(ds.len(), &cfg)?;
    if fold >= splits.len() {
        return Err(Error::Config(format!("--fold {fold} out of range 0..{}", splits.len())));
    }
    let split = splits.swap_remove(fold);
    Ok((cfg, ds, split))
}

fn load_matching(path: &Path, cfg: &ExperimentConfig) -> Result<crate::nn::BiChannelModel> {
    let model = checkpoint::load(path)?;
    if model.config() != &cfg.model {
        return Err(Error::Config(format!(
            "checkpoint {} was built with a different model config",
            path.display()
        )));
    }
    Ok(model)
}

fn write_logs(dir: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut s = String::new();
    for l in logs {
        s.push_str(&serde_json::to_string(l)?);
        s.push('\n');
    }
    let p = dir.join("log.jsonl");
    fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

fn write_metrics(dir: &Path, rec: &MetricsRecord) -> Result<()> {
    let p = dir.join("metrics.json");
    fs::write(&p, to_json(rec)?).map_err(|e| Error::io(&p, e))
}

fn train(a: TrainArgs) -> Result<String> {
    let (cfg, ds, split) = fold_context(&a.exp, a.fold)?;
    let digest = cfg.digest();
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("train-{digest}-fold{}", a.fold)));
    let mut logs = Vec::new();
    let record = match a.stage {
        Stage::Warmup => {
            let w = run_warmup(&cfg, &ds, &split, &mut |l| logs.push(l))?;
            build_dir_atomic(&out, |tmp| {
                checkpoint::save_with_digest(&w.model, &tmp.join("warmup.ckpt"), &digest)?;
                write_logs(tmp, &logs)
            })?;
            None
        }
        Stage::Copula => {
            let (Some(wp), Some(cp)) = (&a.warmup, &a.copula) else {
                return Err(Error::Config(
                    "--stage copula needs --warmup <checkpoint> and --copula <estimate-copula output>".into(),
                ));
            };
            let model = load_matching(wp, &cfg)?;
            let copula = EstimatedCopula::read(cp)?;
            let t = run_copula_training(&cfg, &ds, &split, model, &copula, &mut |l| logs.push(l))?;
            let mut rec = evaluate(&t.model, &ds, &split.test)?;
            rec.fold = split.fold;
            rec.loss_mode = cfg.loss_mode;
            rec.floor_events = t.floor_events;
            rec.config_digest = digest.clone();
            build_dir_atomic(&out, |tmp| {
                checkpoint::save_with_digest(&t.model, &tmp.join("final.ckpt"), &digest)?;
                write_logs(tmp, &logs)?;
                write_metrics(tmp, &rec)
            })?;
            Some(rec)
        }
        Stage::All => {
            let r = run_fold(&cfg, &ds, &split)?;
            build_dir_atomic(&out, |tmp| {
                checkpoint::save_with_digest(&r.warmup, &tmp.join("warmup.ckpt"), &digest)?;
                checkpoint::save_with_digest(&r.model, &tmp.join("final.ckpt"), &digest)?;
                r.copula.write(&tmp.join("copula_params.json"))?;
                write_logs(tmp, &r.logs)?;
                write_metrics(tmp, &r.record)
            })?;
            Some(r.record)
        }
    };
    #[derive(Serialize)]
    struct Done<'a> {
        out: &'a Path,
        fold: usize,
        seed: u64,
        config_digest: &'a str,
        test: Option<&'a MetricsRecord>,
    }
    let done = Done {
        out: &out,
        fold: a.fold,
        seed: cfg.seed,
        config_digest: &digest,
        test: record.as_ref(),
    };
    if a.json {
        return to_json(&done);
    }
    let mut s = format!("fold {} written to {}\n", a.fold, out.display());
    if let Some(r) = &record {
        writeln!(
            s,
            "test: mse_al_ou {:.4}  ce_hm_ou {:.4}  auc_hm_ou {:.4}",
            r.mse_al_ou, r.ce_hm_ou, r.auc_hm_ou
        )
        .expect("string write");
    }
    Ok(s)
}

fn estimate(a: EstimateArgs) -> Result<String> {
    let (cfg, ds, split) = fold_context(&a.exp, a.fold)?;
    let model = load_matching(&a.checkpoint, &cfg)?;
    let preds = predict_patients(&model, &ds, &split.train)?;
    let labels: Vec<_> = split.train.iter().map(|&p| ds.labels[p]).collect();
    let est = run_copula_estimation(&preds, &labels, &format!("fold{}", a.fold), &cfg.digest())?;
    est.write(&a.out)?;
    if a.json {
        to_json(est.params())
    } else {
        let p = est.params();
        let mut s = format!("sigma1 {:.4}  sigma2 {:.4}\ngamma\n", p.sigma1, p.sigma2);
        for row in p.gamma.as_array() {
            writeln!(s, "  {:>8.4} {:>8.4} {:>8.4} {:>8.4}", row[0], row[1], row[2], row[3]).expect("string write");
        }
        Ok(s)
    }
}

fn eval(a: EvalArgs) -> Result<String> {
    let (cfg, ds, split) = fold_context(&a.exp, a.fold)?;
    let model = load_matching(&a.checkpoint, &cfg)?;
    let patients = match a.split {
        SplitArg::Train => &split.train,
        SplitArg::Val => &split.val,
        SplitArg::Test => &split.test,
    };
    let mut rec = evaluate(&model, &ds, patients)?;
    rec.fold = a.fold;
    rec.loss_mode = cfg.loss_mode;
    rec.config_digest = cfg.digest();
    if a.json {
        return to_json(&rec);
    }
    let mut s = String::new();
    for name in METRIC_NAMES {
        writeln!(s, "{name:<10} {:.6}", rec.metric(name).expect("known metric")).expect("string write");
    }
    Ok(s)
}

fn crossval(a: CrossvalArgs) -> Result<String> {
    let cfg = a.exp.resolve()?;
    let ds = cfg.data.load()?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("{}-{}", cfg.loss_mode.tag(), cfg.digest())));
    let r = run_crossval(&cfg, &ds, Some(&out), a.jobs)?;
    if a.json {
        return to_json(&r.summary);
    }
    let mut s = format!("{} folds written to {}\n", r.records.len(), out.display());
    for (name, ms) in &r.summary.metrics {
        writeln!(s, "{name:<10} {:.4} ± {:.4}", ms.mean, ms.std).expect("string write");
    }
    Ok(s)
}

fn oracle(a: OracleArgs) -> Result<String> {
    let spec = QuadratureSpec {
        nodes_per_axis: a.nodes,
        ..QuadratureSpec::default()
    };
    let mut rep = oracle_check(a.cases, a.seed, &spec, a.tolerance)?;
    if !a.rows {
        rep.rows.clear();
    }
    to_json(&rep)
}

/// Role of a run in the adapters × copula grid.
pub fn arm_name(s: &Summary) -> &'static str {
    match (s.adapters_enabled, s.loss_mode) {
        (false, LossMode::Empirical) => "baseline",
        (true, LossMode::Empirical) => "adapters-only",
        (false, LossMode::Copula) => "copula-only",
        (true, LossMode::Copula) => "full",
    }
}

fn arm_order(name: &str) -> usize {
    ["baseline", "adapters-only", "copula-only", "full"]
        .iter()
        .position(|a| *a == name)
        .unwrap_or(4)
}

fn higher_is_better(metric: &str) -> bool {
    metric.starts_with("auc")
}

#[derive(Debug, Serialize)]
pub struct ReportColumn {
    pub run: PathBuf,
    pub arm: String,
    pub lora_rank: usize,
    pub seed: u64,
    pub dataset_id: String,
    pub config_digest: String,
}

#[derive(Debug, Serialize)]
pub struct ReportCell {
    pub metric: String,
    pub column: usize,
    pub mean: f64,
    pub std: f64,
    pub best: bool,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub columns: Vec<ReportColumn>,
    pub cells: Vec<ReportCell>,
    pub warnings: Vec<String>,
}

/// Loads each run's summary and lays the runs out as columns, ordered by arm
/// and then rank.
pub fn build_report(runs: &[PathBuf], force: bool) -> Result<Report> {
    let mut missing = Vec::new();
    let mut loaded = Vec::new();
    for dir in runs {
        let p = dir.join("summary.json");
        match fs::read_to_string(&p) {
            Ok(text) => {
                let s: Summary = serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
                loaded.push((dir.clone(), s));
            }
            Err(_) => missing.push(dir.clone()),
        }
    }
    if let Some(first) = missing.first() {
        for m in &missing[1..] {
            eprintln!("error: missing summary.json in {}", m.display());
        }
        return Err(Error::MissingSummary(first.clone()));
    }
    let mut warnings = Vec::new();
    let ids: std::collections::BTreeSet<&str> = loaded.iter().map(|(_, s)| s.dataset_id.as_str()).collect();
    if ids.len() > 1 {
        let msg = format!("runs use different datasets: {ids:?}");
        if !force {
            return Err(Error::Protocol(format!("{msg}; pass --force to aggregate anyway")));
        }
        warnings.push(msg);
    }
    let seeds: std::collections::BTreeSet<u64> = loaded.iter().map(|(_, s)| s.seed).collect();
    if seeds.len() > 1 {
        warnings.push(format!("runs use different seeds: {seeds:?}"));
    }
    loaded.sort_by(|a, b| {
        (arm_order(arm_name(&a.1)), a.1.lora_rank, &a.0).cmp(&(arm_order(arm_name(&b.1)), b.1.lora_rank, &b.0))
    });
    let columns: Vec<ReportColumn> = loaded
        .iter()
        .map(|(dir, s)| ReportColumn {
            run: dir.clone(),
            arm: arm_name(s).into(),
            lora_rank: s.lora_rank,
            seed: s.seed,
            dataset_id: s.dataset_id.clone(),
            config_digest: s.config_digest.clone(),
        })
        .collect();
    let mut cells = Vec::new();
    for metric in METRIC_NAMES {
        let means: Vec<(f64, f64)> = loaded
            .iter()
            .map(|(_, s)| s.metrics.get(metric).map_or((f64::NAN, f64::NAN), |m| (m.mean, m.std)))
            .collect();
        let best = means
            .iter()
            .map(|m| m.0)
            .filter(|v| v.is_finite())
            .fold(None, |acc: Option<f64>, v| {
                Some(match acc {
                    None => v,
                    Some(b) if higher_is_better(metric) => b.max(v),
                    Some(b) => b.min(v),
                })
            });
        for (column, (mean, std)) in means.into_iter().enumerate() {
            cells.push(ReportCell {
                metric: metric.into(),
                column,
                mean,
                std,
                best: Some(mean) == best,
            });
        }
    }
    Ok(Report {
        columns,
        cells,
        warnings,
    })
}

impl Report {
    pub fn csv(&self) -> String {
        let mut s = String::from("metric,arm,lora_rank,run,mean,std,best,seed,dataset_id,config_digest\n");
        for c in &self.cells {
            let col = &self.columns[c.column];
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                c.metric,
                col.arm,
                col.lora_rank,
                col.run.display(),
                c.mean,
                c.std,
                u8::from(c.best),
                col.seed,
                col.dataset_id,
                col.config_digest
            )
            .expect("string write");
        }
        s
    }

    /// Metrics as rows, runs as columns; `*` marks the best value per row.
    pub fn table(&self) -> String {
        let heads: Vec<String> = self.columns.iter().map(|c| format!("{} r={}", c.arm, c.lora_rank)).collect();
        let width = heads.iter().map(String::len).max().unwrap_or(0).max(17);
        let mut s = format!("{:<10}", "metric");
        for h in &heads {
            write!(s, " | {h:>width$}").expect("string write");
        }
        s.push('\n');
        let mut by_metric: BTreeMap<usize, Vec<&ReportCell>> = BTreeMap::new();
        for c in &self.cells {
            let row = METRIC_NAMES.iter().position(|m| *m == c.metric).expect("known metric");
            by_metric.entry(row).or_default().push(c);
        }
        for (row, cells) in by_metric {
            write!(s, "{:<10}", METRIC_NAMES[row]).expect("string write");
            for c in cells {
                let v = format!("{}{:.4}±{:.4}", if c.best { "*" } else { "" }, c.mean, c.std);
                write!(s, " | {v:>width$}").expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

fn report(a: ReportArgs) -> Result<String> {
    let rep = build_report(&a.runs, a.force)?;
    let csv_path = a.csv.clone().unwrap_or_else(|| out_root().join("report.csv"));
    write_atomic(&csv_path, rep.csv().as_bytes())?;
    if a.json {
        return to_json(&rep);
    }
    let mut s = String::new();
    for w in &rep.warnings {
        writeln!(s, "warning: {w}").expect("string write");
    }
    s.push_str(&rep.table());
    writeln!(s, "csv: {}", csv_path.display()).expect("string write");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flags_and_bad_values_exit_one() {
        assert_eq!(run(["bicopula", "crossval", "--no-such-flag"]), 1);
        assert_eq!(run(["bicopula", "crossval", "--loss", "bogus"]), 1);
        assert_eq!(run(["bicopula", "crossval", "--epochs-warmup", "0"]), 1);
        assert_eq!(run(["bicopula", "--help"]), 0);
    }

    #[test]
    fn overrides_apply_on_top_of_defaults() {
        let a = ExperimentArgs {
            loss: Some(LossArg::Empirical),
            adapters: Some(Toggle::Off),
            lora_rank: Some(8),
            lora_targets: Some(vec![TargetArg::Q, TargetArg::K]),
            adapter_position: Some(PositionArg::BeforeFc),
            patients: Some(100),
            folds: Some(2),
            ..Default::default()
        };
        let c = a.resolve().unwrap();
        assert_eq!(c.loss_mode, LossMode::Empirical);
        assert!(!c.model.adapters_enabled);
        assert_eq!(c.model.lora_rank, 8);
        assert_eq!(c.model.lora_targets, vec![LoraTarget::Query, LoraTarget::Key]);
        assert_eq!(c.model.adapter_position, AdapterPosition::BeforeFc);
        assert_eq!(c.folds, 2);
        assert!(matches!(c.data, DataSource::Synth(ref s) if s.n_patients == 100));
    }

    #[test]
    fn validation_messages_name_the_flag() {
        assert_eq!(flag_hint("epochs_warmup and epochs_copula must be at least 1"), Some("--epochs-warmup"));
        assert_eq!(flag_hint("batch_size must be at least 1"), Some("--batch-size"));
    }
}
