//! Command-line front end: argument parsing and the five subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{generate, load_table, write_table, Dataset, Split};
use crate::error::{KmclError, Result};
use crate::trainer::{curves_csv, evaluate, train};
use crate::verify::{
    check_grad_reports, check_oracle_rows, grad_check, grad_csv, oracle_csv, sim_oracle_suite,
};

pub const TRAIN_FEATURES: &str = "train_features.csv";
pub const TRAIN_LABELS: &str = "train_labels.csv";
pub const TEST_FEATURES: &str = "test_features.csv";
pub const TEST_LABELS: &str = "test_labels.csv";
pub const MANIFEST: &str = "manifest.txt";
pub const CHECKPOINT: &str = "checkpoint.txt";
pub const CURVES: &str = "curves.csv";
pub const METRICS: &str = "metrics.csv";
pub const EVAL_METRICS: &str = "eval_metrics.csv";
pub const SIM_VERIFY: &str = "sim_verify.csv";
pub const GRAD_CHECK: &str = "grad_check.csv";

/// Steps used by `grad-check --h-sweep`.
pub const H_SWEEP: [f64; 3] = [1e-4, 1e-5, 1e-6];

#[derive(Debug, Parser)]
#[command(name = "kmcl", version, about = "Kernel mixture contrastive multilabel learning")]
pub struct Cli {
    /// Configuration file (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic correlated multilabel dataset.
    SynthGen,
    /// Train a model; writes a checkpoint, training curves and test metrics.
    Train,
    /// Score a checkpoint on a dataset.
    Eval {
        /// Checkpoint to evaluate (overrides `data.checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare every similarity closed form with numerical integration.
    SimVerify {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        /// Run with steps 1e-4, 1e-5 and 1e-6.
        #[arg(long)]
        h_sweep: bool,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::SimVerify { .. } => "sim-verify",
            Command::GradCheck { .. } => "grad-check",
        }
    }
}

/// Parsed, overridden and validated configuration for `cli`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.command = cli.command.name().to_string();
    match &cli.command {
        Command::Eval {
            checkpoint: Some(path),
        } => cfg.data.checkpoint = Some(path.clone()),
        Command::SimVerify { inject_fault: true } => cfg.sim_verify.inject_fault = true,
        Command::GradCheck {
            h_sweep,
            corrupt_gradient,
        } => {
            if *h_sweep {
                cfg.grad_check.steps = H_SWEEP.to_vec();
            }
            cfg.grad_check.corrupt_gradient |= *corrupt_gradient;
        }
        _ => {}
    }
    cfg.validate()?;
    check_paths(&cfg)?;
    Ok(cfg)
}

fn check_paths(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.data;
    let pairs = [
        ("data.train_features", &d.train_features, "data.train_labels", &d.train_labels),
        ("data.test_features", &d.test_features, "data.test_labels", &d.test_labels),
    ];
    for (fk, f, lk, l) in pairs {
        match (f, l) {
            (Some(_), None) => return Err(KmclError::invalid(lk, format!("required when `{fk}` is set"))),
            (None, Some(_)) => return Err(KmclError::invalid(fk, format!("required when `{lk}` is set"))),
            _ => {}
        }
    }
    if d.test_features.is_some() && d.train_features.is_none() && cfg.command == "train" {
        return Err(KmclError::invalid(
            "data.train_features",
            "test files given without training files",
        ));
    }
    let all = [
        ("data.train_features", &d.train_features),
        ("data.train_labels", &d.train_labels),
        ("data.test_features", &d.test_features),
        ("data.test_labels", &d.test_labels),
        ("data.checkpoint", &d.checkpoint),
    ];
    for (key, path) in all {
        if let Some(p) = path {
            if !p.is_file() {
                return Err(KmclError::invalid(key, format!("file `{}` does not exist", p.display())));
            }
        }
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| KmclError::io(path, e))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).map_err(|e| KmclError::io(&cfg.out, e))?;
    Ok(&cfg.out)
}

/// Dataset from the configured files, or generated from `[synth]` when none
/// are set.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let train = match (&d.train_features, &d.train_labels) {
        (Some(f), Some(l)) => Some(load_table(f, l)?),
        _ => None,
    };
    let test = match (&d.test_features, &d.test_labels) {
        (Some(f), Some(l)) => Some(load_table(f, l)?.with_split(Split::Test)),
        _ => None,
    };
    match (train, test) {
        (Some(tr), Some(te)) => tr.concat(te),
        (Some(tr), None) => Ok(tr),
        (None, Some(te)) => Ok(te),
        (None, None) => generate(&cfg.synth),
    }
}

/// Rows used for reported metrics: the test split, or everything when the
/// dataset has no test rows.
pub fn scoring_split(ds: &Dataset) -> Dataset {
    let test = ds.subset(Split::Test);
    if test.is_empty() {
        ds.clone()
    } else {
        test
    }
}

pub fn cmd_synth_gen(cfg: &RunConfig) -> Result<()> {
    let ds = generate(&cfg.synth)?;
    let out = out_dir(cfg)?;
    write_table(&ds.subset(Split::Train), &out.join(TRAIN_FEATURES), &out.join(TRAIN_LABELS))?;
    let test = ds.subset(Split::Test);
    if !test.is_empty() {
        write_table(&test, &out.join(TEST_FEATURES), &out.join(TEST_LABELS))?;
    }
    write(&out.join(MANIFEST), &cfg.to_text())?;
    let hist = ds.subset(Split::Train).label_count_histogram();
    println!(
        "wrote {} train / {} test rows to {} (labels per sample: {})",
        cfg.synth.train,
        cfg.synth.test,
        out.display(),
        hist.iter().map(|h| format!("{h:.3}")).collect::<Vec<_>>().join(" ")
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let model_cfg = cfg.model_config(ds.input_dim(), ds.classes());
    let outcome = train(&ds, &model_cfg, &cfg.train)?;
    let model = outcome.eval_model();
    let report = evaluate(model, &scoring_split(&ds), cfg.train.threshold, cfg.train.top_k)?;
    let out = out_dir(cfg)?;
    checkpoint::save(model, &out.join(CHECKPOINT))?;
    write(&out.join(CURVES), &curves_csv(&outcome.curves))?;
    write(&out.join(METRICS), &report.to_csv())?;
    write(&out.join(MANIFEST), &cfg.to_text())?;
    println!(
        "trained {} epochs ({} steps); mAP {:.4}; artifacts in {}",
        cfg.train.epochs,
        outcome.steps,
        report.map.mean,
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let path = cfg
        .data
        .checkpoint
        .as_ref()
        .ok_or_else(|| KmclError::invalid("data.checkpoint", "eval needs a checkpoint"))?;
    let model = checkpoint::load(path)?;
    let ds = load_dataset(cfg)?;
    checkpoint::check_compatible(&model, ds.classes(), ds.input_dim())?;
    let report = evaluate(&model, &scoring_split(&ds), cfg.train.threshold, cfg.train.top_k)?;
    let out = out_dir(cfg)?;
    write(&out.join(EVAL_METRICS), &report.to_csv())?;
    println!("mAP {:.4}; metrics in {}", report.map.mean, out.join(EVAL_METRICS).display());
    Ok(())
}

pub fn cmd_sim_verify(cfg: &RunConfig) -> Result<()> {
    let rows = sim_oracle_suite(&cfg.sim_verify)?;
    let out = out_dir(cfg)?;
    write(&out.join(SIM_VERIFY), &oracle_csv(&rows))?;
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    println!("{} closed-form rows checked; worst rel err {worst:.3e}", rows.len());
    check_oracle_rows(&rows, cfg.sim_verify.tolerance)
}

pub fn cmd_grad_check(cfg: &RunConfig) -> Result<()> {
    let reports = grad_check(&cfg.grad_check)?;
    let out = out_dir(cfg)?;
    write(&out.join(GRAD_CHECK), &grad_csv(&reports))?;
    for r in &reports {
        let name = r.worst_row().map(|w| w.name.as_str()).unwrap_or("-");
        println!("h={:e}: max rel err {:.3e} at {name}", r.h, r.max_rel_err);
    }
    check_grad_reports(&reports, cfg.grad_check.tolerance)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match cli.command {
        Command::SynthGen => cmd_synth_gen(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg),
        Command::SimVerify { .. } => cmd_sim_verify(&cfg),
        Command::GradCheck { .. } => cmd_grad_check(&cfg),
    }
}

/// Run with process-style arguments and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["kmcl", "train", "--seed", "3", "--out", "x"]).unwrap();
        assert_eq!(cli.seed, Some(3));
        assert_eq!(cli.out, Some(PathBuf::from("x")));
        assert_eq!(cli.command.name(), "train");
    }

    #[test]
    fn h_sweep_sets_three_steps() {
        let cli = Cli::try_parse_from(["kmcl", "grad-check", "--h-sweep"]).unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.grad_check.steps, H_SWEEP.to_vec());
        assert_eq!(cfg.command, "grad-check");
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(main_with_args(["kmcl", "frobnicate"]), 1);
    }

    #[test]
    fn missing_dataset_file_is_rejected_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.cfg");
        fs::write(
            &cfg_path,
            "[data]\ntrain_features = /no/such/x.csv\ntrain_labels = /no/such/y.csv\n",
        )
        .unwrap();
        let cli = Cli::try_parse_from([
            "kmcl",
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .unwrap();
        let err = resolve_config(&cli).unwrap_err();
        assert!(err.to_string().contains("data.train_features"), "{err}");
        assert!(!dir.path().join("o").exists());
    }

    #[test]
    fn half_specified_table_names_missing_key() {
        let cfg = RunConfig::parse("[data]\ntrain_features = a.csv\n", "mem").unwrap();
        let err = check_paths(&cfg).unwrap_err();
        assert!(err.to_string().contains("data.train_labels"), "{err}");
    }
}
