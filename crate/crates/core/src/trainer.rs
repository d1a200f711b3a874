//! Minibatch training: forward, composed loss, backward, Adam with L2 weight
//! decay, a one-cycle learning-rate schedule and an exponential moving
//! average of the weights used for evaluation.

use crate::data::{batches, Dataset, Split};
use crate::error::{KmclError, Result};
use crate::grad::{gradient, ParamStore, TermWeights};
use crate::losses::LossConfig;
use crate::metrics::{mean_average_precision, MetricReport, PredictionSet};
use crate::model::{Model, ModelConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub pct_start: f64,
    pub div_start: f64,
    pub div_final: f64,
    pub ema: bool,
    pub ema_decay: f64,
    /// Cap the decay at `(1 + t)/(10 + t)` after `t` updates so short runs
    /// do not stay pinned to the initial weights.
    pub ema_warmup: bool,
    pub seed: u64,
    pub loss: LossConfig,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    pub threshold: f64,
    pub top_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            base_lr: 2e-4,
            weight_decay: 1e-4,
            pct_start: 0.2,
            div_start: 25.0,
            div_final: 1e4,
            ema: true,
            ema_decay: 0.9997,
            ema_warmup: true,
            seed: 0,
            loss: LossConfig::default(),
            eval_every: 1,
            threshold: 0.5,
            top_k: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(KmclError::invalid("train.batch_size", "must be at least 2"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(KmclError::invalid("train.base_lr", "must be > 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(KmclError::invalid("train.weight_decay", "must be >= 0"));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(KmclError::invalid("train.pct_start", "must lie in (0, 1)"));
        }
        if !(self.div_start >= 1.0 && self.div_final >= 1.0) {
            return Err(KmclError::invalid("train.div_start", "divisors must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(KmclError::invalid("train.ema_decay", "must lie in [0, 1)"));
        }
        if self.eval_every == 0 {
            return Err(KmclError::invalid("train.eval_every", "must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(KmclError::invalid("train.threshold", "must lie in (0, 1)"));
        }
        if self.top_k == 0 {
            return Err(KmclError::invalid("train.top_k", "must be at least 1"));
        }
        self.loss.validate()
    }

    pub fn schedule(&self) -> OneCycle {
        OneCycle {
            base_lr: self.base_lr,
            pct_start: self.pct_start,
            div_start: self.div_start,
            div_final: self.div_final,
        }
    }
}

/// Adam moment buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One Adam update of `store.values` from `store.grads`, with
/// `weight_decay·θ` added to the gradient. Nothing is written if any new
/// value would be non-finite.
pub fn adam_step(
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if opt.m.len() != store.len() {
        return Err(KmclError::DimensionMismatch {
            what: "optimizer state",
            expected: store.len(),
            found: opt.m.len(),
        });
    }
    let t = (opt.step + 1) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let n = store.len();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut theta = Vec::with_capacity(n);
    for i in 0..n {
        let x = store.values()[i];
        let g = store.grads()[i] + weight_decay * x;
        let mi = ADAM_BETA1 * opt.m[i] + (1.0 - ADAM_BETA1) * g;
        let vi = ADAM_BETA2 * opt.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let next = x - lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
        if !next.is_finite() {
            return Err(KmclError::NonFinite {
                what: "parameter update",
                name: store.coordinate_name(i),
            });
        }
        m.push(mi);
        v.push(vi);
        theta.push(next);
    }
    store.values_mut().copy_from_slice(&theta);
    opt.m = m;
    opt.v = v;
    opt.step += 1;
    Ok(())
}

/// Cosine warmup from `base/div_start` to `base` over the first `pct_start`
/// of training, then cosine anneal to `base/div_final` at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub base_lr: f64,
    pub pct_start: f64,
    pub div_start: f64,
    pub div_final: f64,
}

fn cosine(from: f64, to: f64, t: f64) -> f64 {
    to + (from - to) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

impl OneCycle {
    pub fn lr(&self, step: usize, total_steps: usize) -> f64 {
        let start = self.base_lr / self.div_start;
        let end = self.base_lr / self.div_final;
        if total_steps <= 1 {
            return self.base_lr;
        }
        let last = (total_steps - 1) as f64;
        let peak = (self.pct_start * total_steps as f64).min(last);
        let s = step as f64;
        if s <= peak {
            if peak == 0.0 {
                self.base_lr
            } else {
                cosine(start, self.base_lr, s / peak)
            }
        } else {
            cosine(self.base_lr, end, ((s - peak) / (last - peak)).min(1.0))
        }
    }
}

/// Schedule with the default divisors 25 and 1e4.
pub fn onecycle_lr(step: usize, total_steps: usize, base_lr: f64, pct_start: f64) -> f64 {
    OneCycle {
        base_lr,
        pct_start,
        div_start: 25.0,
        div_final: 1e4,
    }
    .lr(step, total_steps)
}

/// `ema ← decay·ema + (1 - decay)·live`.
pub fn ema_update(ema: &mut [f64], live: &[f64], decay: f64) {
    for (e, &l) in ema.iter_mut().zip(live) {
        *e = decay * *e + (1.0 - decay) * l;
    }
}

/// Decay applied at update number `updates` (0-based).
pub fn ema_effective_decay(decay: f64, updates: u64, warmup: bool) -> f64 {
    if warmup {
        decay.min((1.0 + updates as f64) / (10.0 + updates as f64))
    } else {
        decay
    }
}

/// One row of the training curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_asl: f64,
    pub loss_kmcl: f64,
    pub lr: f64,
    /// `NaN` on epochs without evaluation.
    pub train_map: f64,
    pub test_map: f64,
}

pub const CURVE_HEADER: &str = "epoch,loss_total,loss_rec,loss_asl,loss_kmcl,lr,train_mAP,test_mAP";

pub fn curves_csv(curves: &[CurveRecord]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for c in curves {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            c.epoch, c.loss_total, c.loss_rec, c.loss_asl, c.loss_kmcl, c.lr, c.train_map, c.test_map
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub ema: Option<Model>,
    pub curves: Vec<CurveRecord>,
    pub steps: u64,
}

impl TrainOutcome {
    /// EMA weights when enabled, otherwise the live weights.
    pub fn eval_model(&self) -> &Model {
        self.ema.as_ref().unwrap_or(&self.model)
    }
}

pub fn predict_dataset(model: &Model, ds: &Dataset) -> Result<PredictionSet> {
    let scores = ds
        .inputs
        .iter()
        .map(|x| model.predict(x))
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::new(scores, ds.labels.clone())
}

pub fn evaluate(model: &Model, ds: &Dataset, threshold: f64, top_k: usize) -> Result<MetricReport> {
    MetricReport::compute(&predict_dataset(model, ds)?, threshold, top_k)
}

fn map_of(model: &Model, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(mean_average_precision(&predict_dataset(model, ds)?).mean)
}

fn check_shapes(ds: &Dataset, model: &ModelConfig) -> Result<()> {
    if ds.input_dim() != model.encoder.input_dim {
        return Err(KmclError::DimensionMismatch {
            what: "input width",
            expected: model.encoder.input_dim,
            found: ds.input_dim(),
        });
    }
    if ds.classes() != model.classes {
        return Err(KmclError::DimensionMismatch {
            what: "classes",
            expected: model.classes,
            found: ds.classes(),
        });
    }
    Ok(())
}

/// Train a freshly initialized model on the train split of `ds`, recording
/// per-epoch mean losses and train/test mAP.
pub fn train(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let kc = model_cfg.kmm();
    cfg.loss.check_kernel_layout(kc.mode, kc.dim, kc.shared.len(kc.dim))?;
    let train_set = ds.subset(Split::Train);
    let test_set = ds.subset(Split::Test);
    if train_set.is_empty() {
        return Err(KmclError::invalid("dataset", "no training rows"));
    }
    check_shapes(&train_set, model_cfg)?;

    let mut model = Model::init(model_cfg, cfg.seed)?;
    let mut store = model.to_store();
    let mut opt = OptimizerState::new(store.len());
    let mut ema = cfg.ema.then(|| store.values().to_vec());
    let mut ema_model = model.clone();
    let mut curves = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            ema: cfg.ema.then_some(model.clone()),
            model,
            curves,
            steps: 0,
        });
    }

    let per_epoch = batches(train_set.len(), cfg.batch_size, cfg.seed, 0)?.len();
    let total_steps = per_epoch * cfg.epochs;
    let schedule = cfg.schedule();
    let weights = TermWeights::from_config(&cfg.loss);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0; 4];
        let mut lr = 0.0;
        let epoch_batches = batches(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        for (b, idx) in epoch_batches.iter().enumerate() {
            let (x, y) = train_set.gather(idx);
            let (loss, grad) = gradient(&model, &x, &y, &cfg.loss, weights)?;
            if !loss.total.is_finite() {
                return Err(KmclError::NonFiniteLoss { epoch, batch: b });
            }
            store.set_grads(&grad.flatten())?;
            lr = schedule.lr(step, total_steps);
            adam_step(&mut store, &mut opt, lr, cfg.weight_decay)?;
            model.load_store(&store)?;
            if let Some(e) = ema.as_mut() {
                let d = ema_effective_decay(cfg.ema_decay, step as u64, cfg.ema_warmup);
                ema_update(e, store.values(), d);
            }
            for (s, v) in sums.iter_mut().zip([loss.total, loss.rec, loss.asl, loss.kmcl]) {
                *s += v;
            }
            step += 1;
        }
        let nb = epoch_batches.len() as f64;
        let evaluated = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let (train_map, test_map) = if evaluated {
            let eval = match &ema {
                Some(e) => {
                    ema_model.load_flat(e)?;
                    &ema_model
                }
                None => &model,
            };
            (map_of(eval, &train_set)?, map_of(eval, &test_set)?)
        } else {
            (f64::NAN, f64::NAN)
        };
        curves.push(CurveRecord {
            epoch: epoch + 1,
            loss_total: sums[0] / nb,
            loss_rec: sums[1] / nb,
            loss_asl: sums[2] / nb,
            loss_kmcl: sums[3] / nb,
            lr,
            train_map,
            test_map,
        });
    }
    let ema = match ema {
        Some(e) => {
            ema_model.load_flat(&e)?;
            Some(ema_model)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        ema,
        curves,
        steps: step as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, identity_correlation, SynthConfig};
    use crate::encoder::EncoderConfig;
    use crate::grad::ParamSlot;
    use crate::kmm::{KernelMode, SharedVariance};

    fn scalar_store(x: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new(
            vec![x],
            vec![ParamSlot {
                name: "x".into(),
                offset: 0,
                shape: vec![1],
            }],
        )
        .unwrap();
        s.grads_mut()[0] = g;
        s
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = scalar_store(0.7, 0.0);
        let mut opt = OptimizerState::new(1);
        adam_step(&mut s, &mut opt, 1e-2, 0.0).unwrap();
        assert_eq!(s.values()[0], 0.7);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = scalar_store(0.0, 1.0);
        let mut opt = OptimizerState::new(1);
        adam_step(&mut s, &mut opt, 1e-3, 0.0).unwrap();
        let expected = -1e-3 / (1.0 + ADAM_EPS);
        assert!((s.values()[0] - expected).abs() < 1e-18);
        // Constant gradient keeps the bias-corrected step at lr.
        adam_step(&mut s, &mut opt, 1e-3, 0.0).unwrap();
        assert!((s.values()[0] - 2.0 * expected).abs() < 1e-15);
    }

    #[test]
    fn adam_weight_decay_only() {
        let (x, lr, wd) = (2.0, 1e-2, 1e-4);
        let mut s = scalar_store(x, 0.0);
        let mut opt = OptimizerState::new(1);
        adam_step(&mut s, &mut opt, lr, wd).unwrap();
        // g = wd·x, so m̂ = g and √v̂ = |g|.
        let g = wd * x;
        let expected = x - lr * g / (g + ADAM_EPS);
        assert!((s.values()[0] - expected).abs() < 1e-15);
        assert!(s.values()[0] < x);
    }

    #[test]
    fn adam_rejects_non_finite_update() {
        let mut s = scalar_store(1.0, f64::INFINITY);
        let mut opt = OptimizerState::new(1);
        let err = adam_step(&mut s, &mut opt, 1e-3, 0.0).unwrap_err();
        assert!(err.to_string().contains("x[0]"));
        assert_eq!(s.values()[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn one_cycle_shape() {
        let (base, total) = (2e-4, 1000);
        assert!((onecycle_lr(0, total, base, 0.2) - base / 25.0).abs() < 1e-18);
        assert_eq!(onecycle_lr(200, total, base, 0.2), base);
        assert!((onecycle_lr(total - 1, total, base, 0.2) - base / 1e4).abs() < 1e-18);
        let lrs: Vec<f64> = (0..total).map(|s| onecycle_lr(s, total, base, 0.2)).collect();
        let peak = lrs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 200);
        assert!(lrs[..=200].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[200..].windows(2).all(|w| w[0] > w[1]));
        // No jumps larger than the steepest cosine slope allows.
        let max_jump = lrs.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        assert!(max_jump < base * std::f64::consts::PI / 2.0 / 150.0);
        assert!(lrs[total - 1] < lrs[0]);
    }

    #[test]
    fn ema_examples() {
        let mut e = vec![0.3];
        ema_update(&mut e, &[1.0], 0.0);
        assert_eq!(e, vec![1.0]);
        let mut e = vec![0.0];
        ema_update(&mut e, &[1.0], 0.9997);
        assert!((e[0] - 0.0003).abs() < 1e-15);
        let mut e = vec![0.0];
        let mut prev_gap = 1.0;
        for _ in 0..2000 {
            ema_update(&mut e, &[1.0], 0.99);
            let gap = 1.0 - e[0];
            assert!(gap < prev_gap && gap >= 0.0);
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-8);
        assert_eq!(ema_effective_decay(0.9997, 0, true), 0.1);
        assert_eq!(ema_effective_decay(0.9997, 0, false), 0.9997);
    }

    fn tiny_task(seed: u64) -> (Dataset, ModelConfig) {
        let ds = generate(&SynthConfig {
            classes: 3,
            input_dim: 6,
            marginals: vec![0.4; 3],
            correlation: identity_correlation(3),
            noise: 0.3,
            prototype_scale: 1.0,
            class_noise: Vec::new(),
            train: 60,
            test: 20,
            seed,
        })
        .unwrap();
        let model = ModelConfig {
            encoder: EncoderConfig {
                input_dim: 6,
                hidden: vec![8],
                feature_dim: 4,
                identity: false,
                output_relu: false,
            },
            classes: 3,
            mode: KernelMode::Isotropic,
            shared: SharedVariance::None,
        };
        (ds, model)
    }

    #[test]
    fn zero_epochs_leave_init_untouched() {
        let (ds, mcfg) = tiny_task(1);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&ds, &mcfg, &cfg).unwrap();
        assert!(out.curves.is_empty());
        assert_eq!(out.model, Model::init(&mcfg, cfg.seed).unwrap());
        assert_eq!(curves_csv(&out.curves), format!("{CURVE_HEADER}\n"));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (ds, mcfg) = tiny_task(2);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 16,
            base_lr: 1e-2,
            ..TrainConfig::default()
        };
        let a = train(&ds, &mcfg, &cfg).unwrap();
        let b = train(&ds, &mcfg, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(curves_csv(&a.curves), curves_csv(&b.curves));
        assert_eq!(a.curves.len(), 15);
        let first = a.curves[0].loss_total;
        let last = a.curves[14].loss_total;
        assert!(last < first, "{first} -> {last}");
        assert!(a.eval_model().flatten().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (ds, mut mcfg) = tiny_task(3);
        mcfg.classes = 4;
        assert!(train(&ds, &mcfg, &TrainConfig::default()).is_err());
    }

    #[test]
    fn eval_cadence_marks_skipped_epochs() {
        let (ds, mcfg) = tiny_task(4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let out = train(&ds, &mcfg, &cfg).unwrap();
        assert!(out.curves[0].test_map.is_nan());
        assert!(out.curves[1].test_map.is_finite());
        assert!(out.curves[2].test_map.is_finite());
    }
}
