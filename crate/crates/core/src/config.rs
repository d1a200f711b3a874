//! Run configuration: `key = value` lines grouped under `[section]` headers.
//!
//! ```text
//! # comment
//! [synth]
//! classes = 8
//! marginals = 0.3            # one value broadcasts to every class
//! correlation = block:2:0.6  # or `identity`, or K*K comma-separated values
//!
//! [train]
//! epochs = 30
//! ```
//!
//! Every key has a default, so an empty file is a valid configuration.
//! [`RunConfig::to_text`] writes every key back out; parsing that text gives
//! an equal configuration.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{block_correlation, identity_correlation, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::error::{KmclError, Result};
use crate::kmm::{KernelMode, SharedVariance};
use crate::model::ModelConfig;
use crate::similarity::SimilarityKind;
use crate::trainer::TrainConfig;
use crate::verify::{GradCheckConfig, SimVerifyConfig};

/// Encoder and head shape; input width and class count come from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub identity: bool,
    pub output_relu: bool,
    pub kernel_mode: KernelMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        ModelSection {
            hidden: enc.hidden,
            feature_dim: enc.feature_dim,
            identity: enc.identity,
            output_relu: enc.output_relu,
            kernel_mode: KernelMode::Isotropic,
        }
    }
}

/// Shared variance the head must learn for a similarity kind.
pub fn shared_variance_for(kind: SimilarityKind) -> SharedVariance {
    match kind {
        SimilarityKind::Mahalanobis => SharedVariance::Diagonal,
        SimilarityKind::GaussianRbf => SharedVariance::Scalar,
        _ => SharedVariance::None,
    }
}

/// Dataset files. Unset feature/label paths mean "generate from `[synth]`".
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataPaths {
    pub train_features: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub out: PathBuf,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataPaths,
    pub sim_verify: SimVerifyConfig,
    /// Its `loss` always mirrors `train.loss`.
    pub grad_check: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            out: PathBuf::from("out"),
            synth: SynthConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
            sim_verify: SimVerifyConfig::default(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

struct Entry {
    line: usize,
    value: String,
}

struct Fields {
    map: BTreeMap<String, Entry>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|e| e.value)
    }

    fn scalar<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<()> {
        if let Some(v) = self.take(key) {
            *target = v
                .parse()
                .map_err(|_| KmclError::invalid(key, format!("cannot parse `{v}`")))?;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str, target: &mut Vec<T>) -> Result<()> {
        if let Some(v) = self.take(key) {
            *target = parse_list(key, &v)?;
        }
        Ok(())
    }

    fn path(&mut self, key: &str, target: &mut Option<PathBuf>) {
        if let Some(v) = self.take(key) {
            *target = (!v.is_empty()).then(|| PathBuf::from(v));
        }
    }

    fn with<T>(&mut self, key: &str, target: &mut T, parse: impl Fn(&str) -> Result<T>) -> Result<()> {
        if let Some(v) = self.take(key) {
            *target = parse(&v).map_err(|e| match e {
                KmclError::InvalidValue { reason, .. } => KmclError::invalid(key, reason),
                other => other,
            })?;
        }
        Ok(())
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|c| {
            c.trim()
                .parse()
                .map_err(|_| KmclError::invalid(key, format!("cannot parse list entry `{}`", c.trim())))
        })
        .collect()
}

fn join<T: Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// `identity`, `block:<size>:<rho>` or an explicit row-major list.
fn parse_correlation(v: &str, classes: usize) -> Result<Vec<f64>> {
    let key = "synth.correlation";
    if v == "identity" {
        return Ok(identity_correlation(classes));
    }
    if let Some(rest) = v.strip_prefix("block:") {
        let (size, rho) = rest
            .split_once(':')
            .ok_or_else(|| KmclError::invalid(key, "expected `block:<size>:<rho>`"))?;
        let size: usize = size
            .trim()
            .parse()
            .map_err(|_| KmclError::invalid(key, format!("bad block size `{size}`")))?;
        let rho: f64 = rho
            .trim()
            .parse()
            .map_err(|_| KmclError::invalid(key, format!("bad correlation `{rho}`")))?;
        if size == 0 {
            return Err(KmclError::invalid(key, "block size must be at least 1"));
        }
        return Ok(block_correlation(classes, size, rho));
    }
    parse_list(key, v)
}

const KNOWN_SECTIONS: [&str; 8] = [
    "run", "synth", "model", "loss", "train", "data", "sim_verify", "grad_check",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KmclError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parse configuration text; `source` names the origin in error messages.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, reason: String| KmclError::Parse {
            path: source.to_string(),
            line,
            reason,
        };
        let mut map = BTreeMap::new();
        let mut section = String::from("run");
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KNOWN_SECTIONS.contains(&name) {
                    return Err(err(i + 1, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected `key = value`, found `{line}`")))?;
            let key = format!("{section}.{}", k.trim());
            let entry = Entry {
                line: i + 1,
                value: v.trim().to_string(),
            };
            if let Some(prev) = map.insert(key.clone(), entry) {
                return Err(err(i + 1, format!("`{key}` already set on line {}", prev.line)));
            }
        }
        let mut f = Fields { map };
        let mut c = RunConfig::default();

        f.scalar("run.command", &mut c.command)?;
        if let Some(v) = f.take("run.out") {
            c.out = PathBuf::from(v);
        }

        let s = &mut c.synth;
        f.scalar("synth.classes", &mut s.classes)?;
        f.scalar("synth.input_dim", &mut s.input_dim)?;
        let k = s.classes;
        s.marginals.resize(k, 0.3);
        s.correlation = block_correlation(k, 2, 0.6);
        if let Some(v) = f.take("synth.marginals") {
            let m: Vec<f64> = parse_list("synth.marginals", &v)?;
            s.marginals = if m.len() == 1 { vec![m[0]; k] } else { m };
        }
        if let Some(v) = f.take("synth.correlation") {
            s.correlation = parse_correlation(&v, k)?;
        }
        f.scalar("synth.noise", &mut s.noise)?;
        f.scalar("synth.prototype_scale", &mut s.prototype_scale)?;
        f.list("synth.class_noise", &mut s.class_noise)?;
        f.scalar("synth.train", &mut s.train)?;
        f.scalar("synth.test", &mut s.test)?;
        f.scalar("synth.seed", &mut s.seed)?;

        let m = &mut c.model;
        f.list("model.hidden", &mut m.hidden)?;
        f.scalar("model.feature_dim", &mut m.feature_dim)?;
        f.scalar("model.identity", &mut m.identity)?;
        f.scalar("model.output_relu", &mut m.output_relu)?;
        f.with("model.kernel_mode", &mut m.kernel_mode, KernelMode::parse)?;

        let l = &mut c.train.loss;
        f.scalar("loss.lambda_asl", &mut l.lambda_asl)?;
        f.scalar("loss.lambda_kmcl", &mut l.lambda_kmcl)?;
        f.scalar("loss.gamma_plus", &mut l.gamma_plus)?;
        f.scalar("loss.gamma_minus", &mut l.gamma_minus)?;
        f.scalar("loss.margin", &mut l.margin)?;
        f.scalar("loss.tau", &mut l.tau)?;
        f.scalar("loss.prob_clamp", &mut l.prob_clamp)?;
        f.with("loss.similarity", &mut l.similarity, |v| v.parse())?;

        let t = &mut c.train;
        f.scalar("train.epochs", &mut t.epochs)?;
        f.scalar("train.batch_size", &mut t.batch_size)?;
        f.scalar("train.base_lr", &mut t.base_lr)?;
        f.scalar("train.weight_decay", &mut t.weight_decay)?;
        f.scalar("train.pct_start", &mut t.pct_start)?;
        f.scalar("train.div_start", &mut t.div_start)?;
        f.scalar("train.div_final", &mut t.div_final)?;
        f.scalar("train.ema", &mut t.ema)?;
        f.scalar("train.ema_decay", &mut t.ema_decay)?;
        f.scalar("train.ema_warmup", &mut t.ema_warmup)?;
        f.scalar("train.seed", &mut t.seed)?;
        f.scalar("train.eval_every", &mut t.eval_every)?;
        f.scalar("train.threshold", &mut t.threshold)?;
        f.scalar("train.top_k", &mut t.top_k)?;

        let d = &mut c.data;
        f.path("data.train_features", &mut d.train_features);
        f.path("data.train_labels", &mut d.train_labels);
        f.path("data.test_features", &mut d.test_features);
        f.path("data.test_labels", &mut d.test_labels);
        f.path("data.checkpoint", &mut d.checkpoint);

        let v = &mut c.sim_verify;
        f.scalar("sim_verify.draws_1d", &mut v.draws_1d)?;
        f.scalar("sim_verify.draws_2d", &mut v.draws_2d)?;
        f.scalar("sim_verify.points_1d", &mut v.points_1d)?;
        f.scalar("sim_verify.points_2d", &mut v.points_2d)?;
        f.scalar("sim_verify.tolerance", &mut v.tolerance)?;
        f.scalar("sim_verify.seed", &mut v.seed)?;
        f.scalar("sim_verify.inject_fault", &mut v.inject_fault)?;

        let g = &mut c.grad_check;
        f.scalar("grad_check.input_dim", &mut g.input_dim)?;
        f.list("grad_check.hidden", &mut g.hidden)?;
        f.scalar("grad_check.feature_dim", &mut g.feature_dim)?;
        f.scalar("grad_check.classes", &mut g.classes)?;
        f.scalar("grad_check.batch", &mut g.batch)?;
        f.with("grad_check.kernel_mode", &mut g.mode, KernelMode::parse)?;
        f.list("grad_check.steps", &mut g.steps)?;
        f.scalar("grad_check.tolerance", &mut g.tolerance)?;
        f.scalar("grad_check.seed", &mut g.seed)?;
        f.scalar("grad_check.corrupt_gradient", &mut g.corrupt_gradient)?;
        g.loss = c.train.loss;

        if let Some((key, entry)) = f.map.iter().next() {
            return Err(err(entry.line, format!("unknown key `{key}`")));
        }
        Ok(c)
    }

    /// Apply a seed override to every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.sim_verify.seed = seed;
        self.grad_check.seed = seed;
    }

    pub fn model_config(&self, input_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_dim,
                hidden: self.model.hidden.clone(),
                feature_dim: self.model.feature_dim,
                identity: self.model.identity,
                output_relu: self.model.output_relu,
            },
            classes,
            mode: self.model.kernel_mode,
            shared: shared_variance_for(self.train.loss.similarity),
        }
    }

    /// Check every section against its owning type's invariants.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        let m = &self.model;
        if m.feature_dim == 0 || m.hidden.contains(&0) {
            return Err(KmclError::invalid("model.hidden", "layer widths must be positive"));
        }
        self.train
            .loss
            .check_kernel_layout(
                m.kernel_mode,
                m.feature_dim,
                shared_variance_for(self.train.loss.similarity).len(m.feature_dim),
            )
            .map_err(|e| KmclError::invalid("loss.similarity", e.to_string()))?;
        let v = &self.sim_verify;
        if v.draws_1d + v.draws_2d == 0 {
            return Err(KmclError::invalid("sim_verify.draws_1d", "need at least one draw"));
        }
        let min = crate::similarity::quadrature::MIN_POINTS;
        for (key, points) in [("sim_verify.points_1d", v.points_1d), ("sim_verify.points_2d", v.points_2d)] {
            if points < min {
                return Err(KmclError::invalid(key, format!("need at least {min} points")));
            }
        }
        if !(v.tolerance.is_finite() && v.tolerance > 0.0) {
            return Err(KmclError::invalid("sim_verify.tolerance", "must be > 0"));
        }
        let g = &self.grad_check;
        if g.batch < 2 {
            return Err(KmclError::invalid("grad_check.batch", "must be at least 2"));
        }
        if g.input_dim == 0 || g.feature_dim == 0 || g.classes == 0 || g.hidden.contains(&0) {
            return Err(KmclError::invalid("grad_check.hidden", "sizes must be positive"));
        }
        if g.steps.is_empty() {
            return Err(KmclError::invalid("grad_check.steps", "need at least one step"));
        }
        if let Some(h) = g.steps.iter().find(|h| !(1e-7..=1e-3).contains(*h)) {
            return Err(KmclError::invalid("grad_check.steps", format!("step {h} outside [1e-7, 1e-3]")));
        }
        if !(g.tolerance.is_finite() && g.tolerance > 0.0) {
            return Err(KmclError::invalid("grad_check.tolerance", "must be > 0"));
        }
        Ok(())
    }

    /// Every key with its current value, in parseable form.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let mut put = |line: String| {
            o.push_str(&line);
            o.push('\n');
        };
        put("[run]".into());
        put(format!("command = {}", self.command));
        put(format!("out = {}", self.out.display()));

        let s = &self.synth;
        put("\n[synth]".into());
        put(format!("classes = {}", s.classes));
        put(format!("input_dim = {}", s.input_dim));
        put(format!("marginals = {}", join(&s.marginals)));
        put(format!("correlation = {}", join(&s.correlation)));
        put(format!("noise = {:?}", s.noise));
        put(format!("prototype_scale = {:?}", s.prototype_scale));
        put(format!("class_noise = {}", join(&s.class_noise)));
        put(format!("train = {}", s.train));
        put(format!("test = {}", s.test));
        put(format!("seed = {}", s.seed));

        let m = &self.model;
        put("\n[model]".into());
        put(format!("hidden = {}", join(&m.hidden)));
        put(format!("feature_dim = {}", m.feature_dim));
        put(format!("identity = {}", m.identity));
        put(format!("output_relu = {}", m.output_relu));
        put(format!("kernel_mode = {}", m.kernel_mode.name()));

        let l = &self.train.loss;
        put("\n[loss]".into());
        put(format!("lambda_asl = {:?}", l.lambda_asl));
        put(format!("lambda_kmcl = {:?}", l.lambda_kmcl));
        put(format!("gamma_plus = {:?}", l.gamma_plus));
        put(format!("gamma_minus = {:?}", l.gamma_minus));
        put(format!("margin = {:?}", l.margin));
        put(format!("tau = {:?}", l.tau));
        put(format!("prob_clamp = {:?}", l.prob_clamp));
        put(format!("similarity = {}", l.similarity));

        let t = &self.train;
        put("\n[train]".into());
        put(format!("epochs = {}", t.epochs));
        put(format!("batch_size = {}", t.batch_size));
        put(format!("base_lr = {:?}", t.base_lr));
        put(format!("weight_decay = {:?}", t.weight_decay));
        put(format!("pct_start = {:?}", t.pct_start));
        put(format!("div_start = {:?}", t.div_start));
        put(format!("div_final = {:?}", t.div_final));
        put(format!("ema = {}", t.ema));
        put(format!("ema_decay = {:?}", t.ema_decay));
        put(format!("ema_warmup = {}", t.ema_warmup));
        put(format!("seed = {}", t.seed));
        put(format!("eval_every = {}", t.eval_every));
        put(format!("threshold = {:?}", t.threshold));
        put(format!("top_k = {}", t.top_k));

        let d = &self.data;
        put("\n[data]".into());
        put(format!("train_features = {}", show_path(&d.train_features)));
        put(format!("train_labels = {}", show_path(&d.train_labels)));
        put(format!("test_features = {}", show_path(&d.test_features)));
        put(format!("test_labels = {}", show_path(&d.test_labels)));
        put(format!("checkpoint = {}", show_path(&d.checkpoint)));

        let v = &self.sim_verify;
        put("\n[sim_verify]".into());
        put(format!("draws_1d = {}", v.draws_1d));
        put(format!("draws_2d = {}", v.draws_2d));
        put(format!("points_1d = {}", v.points_1d));
        put(format!("points_2d = {}", v.points_2d));
        put(format!("tolerance = {:?}", v.tolerance));
        put(format!("seed = {}", v.seed));
        put(format!("inject_fault = {}", v.inject_fault));

        let g = &self.grad_check;
        put("\n[grad_check]".into());
        put(format!("input_dim = {}", g.input_dim));
        put(format!("hidden = {}", join(&g.hidden)));
        put(format!("feature_dim = {}", g.feature_dim));
        put(format!("classes = {}", g.classes));
        put(format!("batch = {}", g.batch));
        put(format!("kernel_mode = {}", g.mode.name()));
        put(format!("steps = {}", join(&g.steps)));
        put(format!("tolerance = {:?}", g.tolerance));
        put(format!("seed = {}", g.seed));
        put(format!("corrupt_gradient = {}", g.corrupt_gradient));
        o
    }
}
