//! Command-line front end: `generate`, `train`, `eval`, `infer`, and
//! `baseline` subcommands over the dataset and checkpoint formats.
//!
//! Flags mirror the `SceneConfig`/`HyperParams`/`TrainConfig` field names;
//! a config file (TOML) supplies defaults and flags override it. Exit codes:
//! 0 success, 2 usage or config error, 3 I/O error, 4 numerical divergence.

use std::ffi::OsString;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::baselines::{self, BaselineError};
use crate::losses::LossConfig;
use crate::metrics::MetricConfig;
use crate::rofe::{RofeError, RofeModel};
use crate::synth::{self, SceneConfig, SynthError};
use crate::train::{self, PairEval, TrainConfig, TrainError};
use crate::types::{FeatureFlags, HyperParams, RigidTransform, SceneFlow, StaticMask};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::ConfigInvalid(_) => CliError::Usage(e.to_string()),
            SynthError::Io(_) | SynthError::BadRecord(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<RofeError> for CliError {
    fn from(e: RofeError) -> Self {
        match e {
            RofeError::Io(_) | RofeError::BadCheckpoint(_) => CliError::Io(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DivergedLoss { .. } => CliError::Diverged(e.to_string()),
            TrainError::Rofe(r) => r.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossName {
    Rd,
    Sc,
    Ss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureName {
    Rrv,
    Rcs,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    Rigid,
    Icp,
}

#[derive(Debug, Parser)]
#[command(name = "radarflow", version, about = "Self-supervised radar scene flow toolkit")]
pub struct Cli {
    /// Worker threads; 1 guarantees bit-determinism. The current
    /// implementation is single-threaded, so any value behaves like 1.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

/// Hyperparameter flags shared by train / eval / infer. Unset flags fall
/// back to the config file (if given), then to the built-in defaults.
#[derive(Debug, Parser)]
pub struct HyperArgs {
    /// TOML file with a full HyperParams table.
    #[arg(long)]
    pub hp_config: Option<PathBuf>,
    #[arg(long)]
    pub n_scales: Option<usize>,
    #[arg(long)]
    pub c_local: Option<usize>,
    #[arg(long)]
    pub c_cor: Option<usize>,
    /// Comma-separated grouping radii in meters, e.g. "2,4,8,16".
    #[arg(long, value_delimiter = ',')]
    pub radii: Option<Vec<f64>>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub n_neighbors: Option<usize>,
}

impl HyperArgs {
    pub fn resolve(&self) -> Result<HyperParams, CliError> {
        let mut hp = match &self.hp_config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                HyperParams::from_config_string(&text).map_err(|e| CliError::Usage(e.to_string()))?
            }
            None => crate::types::default_hyperparams(),
        };
        if let Some(v) = self.n_scales { hp.n_scales = v; }
        if let Some(v) = self.c_local { hp.c_local = v; }
        if let Some(v) = self.c_cor { hp.c_cor = v; }
        if let Some(v) = &self.radii { hp.radii = v.clone(); }
        if let Some(v) = self.zeta { hp.zeta = v; }
        if let Some(v) = self.delta { hp.delta = v; }
        if let Some(v) = self.epsilon { hp.epsilon = v; }
        if let Some(v) = self.alpha { hp.alpha = v; }
        if let Some(v) = self.n_neighbors { hp.n_neighbors = v; }
        hp.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(hp)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train/val/test splits plus manifests).
    Generate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Total number of frame pairs across all splits.
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train/val/test split ratios, e.g. "0.8,0.1,0.1".
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
        split: Vec<f64>,
        /// TOML file with a full SceneConfig table.
        #[arg(long)]
        scene_config: Option<PathBuf>,
        #[arg(long)]
        n_static: Option<usize>,
        #[arg(long)]
        n_movers: Option<usize>,
        #[arg(long)]
        points_per_mover: Option<usize>,
        #[arg(long)]
        position_noise: Option<f64>,
        #[arg(long)]
        rrv_noise: Option<f64>,
        #[arg(long)]
        outlier_fraction: Option<f64>,
        #[arg(long)]
        mover_accel: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Train the model on a generated dataset.
    Train {
        /// Dataset root (contains train/ and val/).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Optional file for per-epoch log lines (also printed to stdout).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lr_decay: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        sample_points: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        augment: bool,
        /// Drop a loss term (repeatable): rd, sc, or ss.
        #[arg(long)]
        disable_loss: Vec<LossName>,
        /// Zero an input feature channel (repeatable): rrv, rcs, or power.
        /// Disabling rrv affects the input only; the radial displacement
        /// loss still uses the measured RRV for supervision.
        #[arg(long)]
        disable_feature: Vec<FeatureName>,
        /// Replace the soft Chamfer loss with its hard (ungated, no-hinge)
        /// variant.
        #[arg(long)]
        hard_chamfer: bool,
        /// Replace per-neighborhood softmax smoothing weights with uniform
        /// ones.
        #[arg(long)]
        uniform_smoothness: bool,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Evaluate a checkpoint (or the ground-truth oracle) on a split.
    Eval {
        /// Split directory (contains manifest.toml).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the ground-truth flow as if it were the prediction.
        #[arg(long)]
        oracle_gt: bool,
        /// Skip the static flow refinement; evaluate the coarse flow.
        #[arg(long)]
        no_sfr: bool,
        /// Optional report output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inference on a single record; writes flow, static mask, and
    /// ego-motion in a binary file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input record (dataset record format).
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_sfr: bool,
    },
    /// Evaluate a classical baseline on a split.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: BaselineMethod,
        #[arg(long, default_value_t = 10)]
        icp_iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        icp_tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const INFER_MAGIC: &[u8; 4] = b"R4DO";
const INFER_VERSION: u32 = 1;

/// Writes an inference result: magic, version, N, flow (N×3 f64 LE), static
/// mask (N bytes, 1 = static), ego transform (12 f64, row-major [R|t]).
pub fn write_inference(
    path: &Path,
    flow: &SceneFlow,
    mask: &StaticMask,
    ego: &RigidTransform,
) -> Result<(), CliError> {
    let n = flow.vectors.len();
    if mask.flags.len() != n {
        return Err(CliError::Usage(format!(
            "mask length {} does not match flow length {}",
            mask.flags.len(),
            n
        )));
    }
    let mut buf = Vec::with_capacity(16 + n * 25 + 96);
    buf.extend_from_slice(INFER_MAGIC);
    buf.extend_from_slice(&INFER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for v in &flow.vectors {
        for c in v {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    buf.extend(mask.flags.iter().map(|&s| s as u8));
    for v in ego.to_row_major() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a file written by [`write_inference`].
pub fn read_inference(path: &Path) -> Result<(SceneFlow, StaticMask, RigidTransform), CliError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |m: &str| CliError::Io(format!("malformed inference file: {m}"));
    if buf.len() < 12 || &buf[0..4] != INFER_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != INFER_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let expect = 12 + n * 24 + n + 96;
    if buf.len() != expect {
        return Err(bad(&format!("expected {expect} bytes, got {}", buf.len())));
    }
    let mut off = 12;
    let f64_at = |buf: &[u8], o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let mut vectors = Vec::with_capacity(n);
    for _ in 0..n {
        vectors.push([f64_at(&buf, off), f64_at(&buf, off + 8), f64_at(&buf, off + 16)]);
        off += 24;
    }
    let flags: Vec<bool> = buf[off..off + n].iter().map(|&b| b != 0).collect();
    off += n;
    let mut ego = [0.0; 12];
    for v in ego.iter_mut() {
        *v = f64_at(&buf, off);
        off += 8;
    }
    Ok((
        SceneFlow::new(vectors),
        StaticMask::new(flags),
        RigidTransform::from_row_major(&ego),
    ))
}

fn write_report(report: &crate::metrics::EvalReport, out: Option<&Path>) -> Result<(), CliError> {
    let text = report.to_text();
    match out {
        Some(path) => fs::write(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn loss_config(disable: &[LossName], hard_chamfer: bool, uniform_smoothness: bool) -> LossConfig {
    LossConfig {
        use_rd: !disable.contains(&LossName::Rd),
        use_sc: !disable.contains(&LossName::Sc),
        use_ss: !disable.contains(&LossName::Ss),
        hard_chamfer,
        uniform_smoothness,
        ..LossConfig::default()
    }
}

fn feature_flags(disable: &[FeatureName]) -> FeatureFlags {
    FeatureFlags {
        rrv: !disable.contains(&FeatureName::Rrv),
        rcs: !disable.contains(&FeatureName::Rcs),
        power: !disable.contains(&FeatureName::Power),
    }
}

/// Parses and runs one invocation. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version exit 0; real parse errors exit 2
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return 2;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate {
            out,
            pairs,
            seed,
            split,
            scene_config,
            n_static,
            n_movers,
            points_per_mover,
            position_noise,
            rrv_noise,
            outlier_fraction,
            mover_accel,
            dt,
        } => {
            let mut cfg: SceneConfig = match scene_config {
                Some(path) => toml::from_str(&fs::read_to_string(&path)?)
                    .map_err(|e| CliError::Usage(format!("scene config: {e}")))?,
                None => SceneConfig::default(),
            };
            cfg.seed = seed;
            if let Some(v) = n_static { cfg.n_static = v; }
            if let Some(v) = n_movers { cfg.n_movers = v; }
            if let Some(v) = points_per_mover { cfg.points_per_mover = v; }
            if let Some(v) = position_noise { cfg.position_noise = v; }
            if let Some(v) = rrv_noise { cfg.rrv_noise = v; }
            if let Some(v) = outlier_fraction { cfg.outlier_fraction = v; }
            if let Some(v) = mover_accel { cfg.mover_accel = v; }
            if let Some(v) = dt { cfg.dt = v; }
            if split.len() != 3 {
                return Err(CliError::Usage("--split takes exactly three ratios".into()));
            }
            let ratios = (split[0], split[1], split[2]);
            let manifests = synth::generate_dataset(&cfg, pairs, ratios, &out)?;
            for m in manifests {
                println!("{}", m.display());
            }
            Ok(())
        }
        Command::Train {
            data,
            out,
            log,
            epochs,
            lr,
            lr_decay,
            batch_size,
            sample_points,
            seed,
            augment,
            disable_loss,
            disable_feature,
            hard_chamfer,
            uniform_smoothness,
            hyper,
        } => {
            let hp = hyper.resolve()?;
            let mut tcfg = TrainConfig::default();
            if let Some(v) = epochs { tcfg.epochs = v; }
            if let Some(v) = lr { tcfg.lr = v; }
            if let Some(v) = lr_decay { tcfg.lr_decay = v; }
            if let Some(v) = batch_size { tcfg.batch_size = v; }
            if let Some(v) = sample_points { tcfg.sample_points = v; }
            if let Some(v) = seed { tcfg.seed = v; }
            tcfg.augment = augment;
            tcfg.validate()?;
            let lcfg = loss_config(&disable_loss, hard_chamfer, uniform_smoothness);
            let train_set = synth::load_split(&data.join("train"))?;
            let val_set = synth::load_split(&data.join("val"))?;
            let mut model = RofeModel::new(&hp, feature_flags(&disable_feature), tcfg.seed)?;
            let outcome =
                train::train(&mut model, &train_set, &val_set, &tcfg, &lcfg, &MetricConfig::default())?;
            let mut log_text = String::new();
            for entry in &outcome.log {
                let line = entry.to_line();
                println!("{line}");
                log_text.push_str(&line);
                log_text.push('\n');
            }
            if let Some(path) = log {
                fs::write(path, log_text)?;
            }
            outcome.best_model.save(&out)?;
            println!("checkpoint: {} (best val Avg RNE {:.6e})", out.display(), outcome.best_val_rne);
            Ok(())
        }
        Command::Eval { data, checkpoint, oracle_gt, no_sfr, out } => {
            let set = synth::load_split(&data)?;
            let report = if oracle_gt {
                let items: Vec<PairEval> = set
                    .iter()
                    .map(|(pair, labels)| PairEval {
                        frame: pair.source.clone(),
                        flow: labels.gt_flow.clone(),
                        labels: labels.clone(),
                        pred_moving: labels.gt_moving.clone(),
                    })
                    .collect();
                train::pooled_report(&items, &MetricConfig::default())?
            } else {
                let path = checkpoint.ok_or_else(|| {
                    CliError::Usage("--checkpoint is required unless --oracle-gt is set".into())
                })?;
                if !path.exists() {
                    return Err(CliError::Io(format!("checkpoint not found: {}", path.display())));
                }
                let model = RofeModel::load(&path)?;
                train::evaluate_model(&model, &set, &MetricConfig::default(), !no_sfr)?
            };
            write_report(&report, out.as_deref())
        }
        Command::Infer { checkpoint, record, out, no_sfr } => {
            if !checkpoint.exists() {
                return Err(CliError::Io(format!("checkpoint not found: {}", checkpoint.display())));
            }
            let model = RofeModel::load(&checkpoint)?;
            let (pair, _) = synth::read_record(&record)?;
            let (flow, mask, ego) = train::predict(&model, &pair, !no_sfr)?;
            ego.assert_valid();
            write_inference(&out, &flow, &mask, &ego)?;
            println!("wrote {} ({} points, {} static)", out.display(), flow.vectors.len(), mask.static_count());
            Ok(())
        }
        Command::Baseline { data, method, icp_iters, icp_tol, out } => {
            let set = synth::load_split(&data)?;
            let mut items = Vec::with_capacity(set.len());
            for (pair, labels) in &set {
                let flow = match method {
                    BaselineMethod::Rigid => baselines::rigid_only_flow(pair)?,
                    BaselineMethod::Icp => baselines::icp(pair, icp_iters, icp_tol)?.1,
                };
                items.push(PairEval {
                    frame: pair.source.clone(),
                    flow,
                    labels: labels.clone(),
                    pred_moving: vec![false; pair.source.len()],
                });
            }
            let report = train::pooled_report(&items, &MetricConfig::default())?;
            write_report(&report, out.as_deref())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_pair;
    use tempfile::tempdir;

    fn run_vec(args: &[&str]) -> i32 {
        run(std::iter::once("radarflow").chain(args.iter().copied()))
    }

    #[test]
    fn help_exits_zero_and_bad_flag_exits_two() {
        assert_eq!(run_vec(&["--help"]), 0);
        assert_eq!(run_vec(&["generate", "--no-such-flag"]), 2);
    }

    #[test]
    fn generate_is_byte_deterministic_and_validates_config() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        for out in [&a, &b] {
            let code = run_vec(&[
                "generate", "--pairs", "6", "--seed", "7",
                "--n-static", "20", "--n-movers", "1",
                "--out", out.to_str().unwrap(),
            ]);
            assert_eq!(code, 0);
        }
        for split in ["train", "val", "test"] {
            let ma = fs::read(a.join(split).join("manifest.toml")).unwrap();
            let mb = fs::read(b.join(split).join("manifest.toml")).unwrap();
            assert_eq!(ma, mb);
        }
        let first = fs::read_dir(a.join("train")).unwrap().count();
        assert!(first > 0);
        // invalid outlier fraction is a config error (exit 2)
        let code = run_vec(&[
            "generate", "--pairs", "2", "--outlier-fraction", "0.6",
            "--out", dir.path().join("c").to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn missing_checkpoint_exits_three() {
        let dir = tempdir().unwrap();
        assert_eq!(
            run_vec(&[
                "generate", "--pairs", "4", "--n-static", "16", "--n-movers", "0",
                "--split", "0.5,0.25,0.25",
                "--out", dir.path().to_str().unwrap(),
            ]),
            0
        );
        let code = run_vec(&[
            "eval",
            "--data", dir.path().join("test").to_str().unwrap(),
            "--checkpoint", dir.path().join("nope.ckpt").to_str().unwrap(),
        ]);
        assert_eq!(code, 3);
    }

    #[test]
    fn oracle_gt_eval_is_perfect() {
        let dir = tempdir().unwrap();
        assert_eq!(
            run_vec(&[
                "generate", "--pairs", "4", "--n-static", "20", "--n-movers", "1",
                "--split", "0.5,0.25,0.25",
                "--out", dir.path().to_str().unwrap(),
            ]),
            0
        );
        let report = dir.path().join("report.txt");
        let code = run_vec(&[
            "eval", "--oracle-gt",
            "--data", dir.path().join("test").to_str().unwrap(),
            "--out", report.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let text = fs::read_to_string(&report).unwrap();
        assert!(text.contains("sas 1.00000"), "{text}");
        assert!(text.contains("ras 1.00000"), "{text}");
        assert!(text.contains("avg_rne 0.00000"), "{text}");
        assert!(text.contains("seg_accuracy 1.00000"), "{text}");
    }

    #[test]
    fn inference_file_roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let cfg = SceneConfig { n_static: 18, n_movers: 1, points_per_mover: 4, ..Default::default() };
        let (pair, _) = generate_pair(&cfg, 0).unwrap();
        let n = pair.source.len();
        let flow = SceneFlow::new((0..n).map(|i| [i as f64 * 0.1, -0.3, 0.05]).collect());
        let mask = StaticMask::new((0..n).map(|i| i % 3 != 0).collect());
        let ego = RigidTransform::identity();
        let path = dir.path().join("out.bin");
        write_inference(&path, &flow, &mask, &ego).unwrap();
        let (f2, m2, e2) = read_inference(&path).unwrap();
        assert_eq!(flow.vectors, f2.vectors);
        assert_eq!(mask.flags, m2.flags);
        assert_eq!(ego.to_row_major(), e2.to_row_major());
    }

    #[test]
    fn train_infer_eval_smoke() {
        // tiny end-to-end run through the CLI surface: one epoch on a
        // 6-pair set with a narrow model
        let dir = tempdir().unwrap();
        assert_eq!(
            run_vec(&[
                "generate", "--pairs", "8", "--seed", "3",
                "--n-static", "20", "--n-movers", "1", "--points-per-mover", "4",
                "--split", "0.5,0.25,0.25",
                "--out", dir.path().to_str().unwrap(),
            ]),
            0
        );
        let ckpt = dir.path().join("model.ckpt");
        let log = dir.path().join("train.log");
        let code = run_vec(&[
            "train",
            "--data", dir.path().to_str().unwrap(),
            "--out", ckpt.to_str().unwrap(),
            "--log", log.to_str().unwrap(),
            "--epochs", "1", "--sample-points", "16",
            "--c-local", "4", "--c-cor", "8",
            "--disable-loss", "sc", "--disable-loss", "ss",
        ]);
        assert_eq!(code, 0);
        let log_text = fs::read_to_string(&log).unwrap();
        assert_eq!(log_text.lines().count(), 1);
        // disabled losses report zero
        assert!(log_text.contains("sc 0.000000e0"), "{log_text}");
        assert!(log_text.contains("ss 0.000000e0"), "{log_text}");

        let record = {
            let manifest: synth::Manifest =
                toml::from_str(&fs::read_to_string(dir.path().join("test/manifest.toml")).unwrap()).unwrap();
            dir.path().join("test").join(&manifest.records[0])
        };
        let out_bin = dir.path().join("infer.bin");
        assert_eq!(
            run_vec(&[
                "infer",
                "--checkpoint", ckpt.to_str().unwrap(),
                "--record", record.to_str().unwrap(),
                "--out", out_bin.to_str().unwrap(),
            ]),
            0
        );
        let (flow, mask, ego) = read_inference(&out_bin).unwrap();
        let (pair, _) = synth::read_record(&record).unwrap();
        assert_eq!(flow.vectors.len(), pair.source.len());
        assert_eq!(mask.flags.len(), pair.source.len());
        assert!(ego.orthonormality_error() < 1e-9);

        // eval runs on the same checkpoint
        assert_eq!(
            run_vec(&[
                "eval",
                "--data", dir.path().join("test").to_str().unwrap(),
                "--checkpoint", ckpt.to_str().unwrap(),
                "--out", dir.path().join("eval.txt").to_str().unwrap(),
            ]),
            0
        );
        // baselines run on the same split
        for method in ["rigid", "icp"] {
            assert_eq!(
                run_vec(&[
                    "baseline", "--method", method,
                    "--data", dir.path().join("test").to_str().unwrap(),
                    "--out", dir.path().join(format!("{method}.txt")).to_str().unwrap(),
                ]),
                0
            );
        }
        let rigid = fs::read_to_string(dir.path().join("rigid.txt")).unwrap();
        assert!(rigid.contains("avg_epe"));
    }
}
