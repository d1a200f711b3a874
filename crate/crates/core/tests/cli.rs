use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;

use kmcl::checkpoint;
use kmcl::cli::{cmd_eval, main_with_args, resolve_config, Cli};
use kmcl::config::RunConfig;
use kmcl::encoder::EncoderConfig;
use kmcl::kmm::{KernelMode, SharedVariance};
use kmcl::model::{Model, ModelConfig};

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["kmcl"];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// Value of `metric` in the `overall` row of a metrics CSV.
fn overall(csv: &str, metric: &str) -> f64 {
    csv.lines()
        .find(|l| l.starts_with(&format!("{metric},overall,")))
        .and_then(|l| l.rsplit(',').next())
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn synth_gen_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "c.cfg", "[synth]\ntrain = 50\ntest = 20\n");
    for out in ["a", "b"] {
        assert_eq!(run(&["synth-gen", "--config", s(&cfg), "--seed", "9", "--out", s(&dir.path().join(out))]), 0);
    }
    for file in ["train_features.csv", "train_labels.csv", "test_features.csv", "test_labels.csv"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    // manifests differ only in the output directory they record
    let strip = |out: &str| -> String {
        fs::read_to_string(dir.path().join(out).join("manifest.txt"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("out = "))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip("a"), strip("b"));
    let manifest = fs::read_to_string(dir.path().join("a/manifest.txt")).unwrap();
    let echoed = RunConfig::parse(&manifest, "manifest").unwrap();
    assert_eq!(echoed.synth.seed, 9);
    assert_eq!(echoed.command, "synth-gen");
    assert_eq!(RunConfig::parse(&echoed.to_text(), "again").unwrap(), echoed);

    let other = dir.path().join("c");
    assert_eq!(run(&["synth-gen", "--config", s(&cfg), "--seed", "10", "--out", s(&other)]), 0);
    assert_ne!(
        fs::read(dir.path().join("a/train_features.csv")).unwrap(),
        fs::read(other.join("train_features.csv")).unwrap()
    );
}

#[test]
fn non_psd_correlation_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "c.cfg",
        "[synth]\nclasses = 3\ncorrelation = 1,0.9,-0.9,0.9,1,0.9,-0.9,0.9,1\n",
    );
    assert_eq!(run(&["synth-gen", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]), 1);
    let cli = Cli::try_parse_from(["kmcl", "synth-gen", "--config", s(&cfg)]).unwrap();
    let err = resolve_config(&cli).unwrap_err().to_string();
    assert!(err.contains("synth.correlation"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn zero_epochs_writes_header_only_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "c.cfg", "[synth]\ntrain = 100\ntest = 40\n[train]\nepochs = 0\n");
    let out = dir.path().join("o");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&out)]), 0);
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves, "epoch,loss_total,loss_rec,loss_asl,loss_kmcl,lr,train_mAP,test_mAP\n");
    assert!(out.join("checkpoint.txt").is_file());
    assert!(out.join("metrics.csv").is_file());
}

#[test]
fn train_then_eval_reproduces_final_map() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = write_cfg(dir.path(), "g.cfg", "[synth]\ntrain = 400\ntest = 150\nseed = 4\n");
    assert_eq!(run(&["synth-gen", "--config", s(&gen), "--out", s(&data)]), 0);
    let cfg = write_cfg(
        dir.path(),
        "t.cfg",
        &format!(
            "[train]\nepochs = 5\n[data]\ntrain_features = {0}/train_features.csv\ntrain_labels = {0}/train_labels.csv\ntest_features = {0}/test_features.csv\ntest_labels = {0}/test_labels.csv\n",
            data.display()
        ),
    );
    let out = dir.path().join("run");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&out)]), 0);
    for file in ["checkpoint.txt", "curves.csv", "metrics.csv", "manifest.txt"] {
        assert!(out.join(file).is_file(), "{file}");
    }
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 6);
    let final_map: f64 = curves.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();

    let ckpt = out.join("checkpoint.txt");
    assert_eq!(run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&out)]), 0);
    let eval = fs::read_to_string(out.join("eval_metrics.csv")).unwrap();
    assert!((overall(&eval, "mAP") - final_map).abs() <= 1e-12);
    assert_eq!(eval, fs::read_to_string(out.join("metrics.csv")).unwrap());
    for metric in ["mean_AUC", "OP", "OR", "OF1", "CP", "CR", "CF1", "top3_OP", "top3_CF1"] {
        assert!(eval.lines().any(|l| l.starts_with(&format!("{metric},"))), "{metric}\n{eval}");
    }
    assert_eq!(eval.lines().filter(|l| l.starts_with("AP,")).count(), 8);
}

#[test]
fn eval_reports_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(
        &ModelConfig {
            encoder: EncoderConfig::default(),
            classes: 8,
            mode: KernelMode::Isotropic,
            shared: SharedVariance::None,
        },
        0,
    )
    .unwrap();
    let ckpt = dir.path().join("m.txt");
    checkpoint::save(&model, &ckpt).unwrap();
    let cfg = write_cfg(dir.path(), "c.cfg", "[synth]\nclasses = 5\ntrain = 60\ntest = 30\n");
    let cli = Cli::try_parse_from([
        "kmcl",
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&dir.path().join("o")),
    ])
    .unwrap();
    let err = cmd_eval(&resolve_config(&cli).unwrap()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("expected 8") && msg.contains("found 5"), "{msg}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn random_checkpoint_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(
        &ModelConfig {
            encoder: EncoderConfig::default(),
            classes: 8,
            mode: KernelMode::Isotropic,
            shared: SharedVariance::None,
        },
        3,
    )
    .unwrap();
    let ckpt = dir.path().join("m.txt");
    checkpoint::save(&model, &ckpt).unwrap();
    let cfg = write_cfg(
        dir.path(),
        "c.cfg",
        "[synth]\nmarginals = 0.5\ncorrelation = identity\ntrain = 200\ntest = 1000\n",
    );
    let out = dir.path().join("o");
    assert_eq!(run(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&out)]), 0);
    let map = overall(&fs::read_to_string(out.join("eval_metrics.csv")).unwrap(), "mAP");
    assert!((map - 0.5).abs() <= 0.1, "mAP {map}");
}

#[test]
fn sim_verify_rows_follow_draw_counts_and_fault_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "c.cfg", "[sim_verify]\ndraws_1d = 7\ndraws_2d = 3\n");
    let out = dir.path().join("o");
    assert_eq!(run(&["sim-verify", "--config", s(&cfg), "--out", s(&out)]), 0);
    let csv = fs::read_to_string(out.join("sim_verify.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "kind,params,closed_form,oracle,rel_err");
    assert_eq!(csv.lines().count(), 1 + 5 * 10);

    assert_eq!(run(&["sim-verify", "--config", s(&cfg), "--out", s(&out), "--inject-fault"]), 2);
    let hooked = write_cfg(dir.path(), "f.cfg", "[sim_verify]\ndraws_1d = 2\ndraws_2d = 0\ninject_fault = true\n");
    assert_eq!(run(&["sim-verify", "--config", s(&hooked), "--out", s(&out)]), 2);
}

#[test]
fn grad_check_sweep_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(run(&["grad-check", "--h-sweep", "--out", s(&out)]), 0);
    let csv = fs::read_to_string(out.join("grad_check.csv")).unwrap();
    let steps: std::collections::BTreeSet<&str> =
        csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps.into_iter().collect::<Vec<_>>(), vec!["1e-4", "1e-5", "1e-6"]);
    assert_eq!(run(&["grad-check", "--corrupt-gradient", "--out", s(&out)]), 2);
    assert_eq!(run(&["grad-check", "--seed", "12", "--out", s(&out)]), 0);
}

#[test]
fn malformed_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "c.cfg", "[train]\nlearning_rate = 1\n");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]), 1);
    assert_eq!(run(&["train", "--config", s(&dir.path().join("missing.cfg"))]), 3);
}
