//! Exact gradients of the composed objective by a hand-written chain rule,
//! and a central-difference checker to verify them.
//!
//! The backward pass walks the loss terms in log space. Reconstruction is
//! `softplus(LSE_{Y∖S} t - LSE_S t)` with `t_k = log π_k - q_k(f)`, so its
//! adjoints reach `a^π`, `μ`, `σ²` and `f` through `t`. The contrastive term
//! accumulates `∂L/∂ρ` over every ordered pair, then pushes `ρ·∂L/∂ρ` through
//! the log-similarity of each unordered pair.

use crate::error::{KmclError, Result};
use crate::kmm::{elu_grad, log_sum_exp, sigmoid, KernelMode, KernelParams};
use crate::losses::{
    asl_loss, clamp_prob, jaccard, kmcl_loss, log_denominator, log_odds_outside,
    positive_set, reconstruction_loss, BatchView, LabelVector, LossBreakdown, LossConfig,
    SimilarityTable,
};
use crate::model::{Model, SampleForward};
use crate::similarity::{isotropic_log_coefficient_grad, SimilarityKind};

/// Location of one named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter buffer with a gradient buffer of the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    grads: Vec<f64>,
    layout: Vec<ParamSlot>,
}

impl ParamStore {
    /// Slots must tile `values` in order with no gaps or overlaps.
    pub fn new(values: Vec<f64>, layout: Vec<ParamSlot>) -> Result<Self> {
        let mut next = 0;
        for slot in &layout {
            if slot.offset != next {
                return Err(KmclError::invalid(
                    "layout",
                    format!("slot `{}` starts at {} instead of {next}", slot.name, slot.offset),
                ));
            }
            next += slot.len();
        }
        if next != values.len() {
            return Err(KmclError::DimensionMismatch {
                what: "parameter buffer",
                expected: next,
                found: values.len(),
            });
        }
        let grads = vec![0.0; values.len()];
        Ok(ParamStore {
            values,
            grads,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn layout(&self) -> &[ParamSlot] {
        &self.layout
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(0.0);
    }

    /// Replace the gradient buffer, rejecting non-finite entries by name.
    pub fn set_grads(&mut self, grads: &[f64]) -> Result<()> {
        if grads.len() != self.len() {
            return Err(KmclError::DimensionMismatch {
                what: "gradient buffer",
                expected: self.len(),
                found: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(KmclError::NonFinite {
                what: "gradient",
                name: self.coordinate_name(i),
            });
        }
        self.grads.copy_from_slice(grads);
        Ok(())
    }

    /// `name[i]` for flat coordinate `index`.
    pub fn coordinate_name(&self, index: usize) -> String {
        coordinate_name(&self.layout, index)
    }
}

fn coordinate_name(layout: &[ParamSlot], index: usize) -> String {
    layout
        .iter()
        .find(|s| index >= s.offset && index < s.offset + s.len())
        .map(|s| format!("{}[{}]", s.name, index - s.offset))
        .unwrap_or_else(|| format!("#{index}"))
}

/// Multipliers of the three loss terms; `from_config` gives the full objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub rec: f64,
    pub asl: f64,
    pub kmcl: f64,
}

impl TermWeights {
    pub fn from_config(cfg: &LossConfig) -> Self {
        TermWeights {
            rec: 1.0,
            asl: cfg.lambda_asl,
            kmcl: cfg.lambda_kmcl,
        }
    }

    pub const REC: TermWeights = TermWeights {
        rec: 1.0,
        asl: 0.0,
        kmcl: 0.0,
    };
    pub const ASL: TermWeights = TermWeights {
        rec: 0.0,
        asl: 1.0,
        kmcl: 0.0,
    };
    pub const KMCL: TermWeights = TermWeights {
        rec: 0.0,
        asl: 0.0,
        kmcl: 1.0,
    };
}

/// Loss terms of a batch and their weighted sum under `weights`.
pub fn weighted_loss(batch: &BatchView, cfg: &LossConfig, weights: TermWeights) -> Result<LossBreakdown> {
    let rec = reconstruction_loss(batch);
    let asl = asl_loss(batch, cfg);
    let kmcl = kmcl_loss(batch, cfg)?;
    Ok(LossBreakdown {
        total: weights.rec * rec.value + weights.asl * asl + weights.kmcl * kmcl,
        rec: rec.value,
        asl,
        kmcl,
        empty_label_samples: rec.empty_label_samples,
    })
}

/// Objective value of `model` on a batch.
pub fn loss_value(
    model: &Model,
    inputs: &[Vec<f64>],
    labels: &[LabelVector],
    cfg: &LossConfig,
    weights: TermWeights,
) -> Result<f64> {
    let (_, batch) = model.forward_batch(inputs, labels)?;
    Ok(weighted_loss(&batch, cfg, weights)?.total)
}

/// Adjoints of one sample's activated head outputs and features.
struct SampleAdjoint {
    /// `∂L/∂a^π` (pre-sigmoid).
    pi_logit: Vec<f64>,
    mu: Vec<f64>,
    /// `∂L/∂σ²` (post-activation).
    var: Vec<f64>,
    feature: Vec<f64>,
}

impl SampleAdjoint {
    fn zeros(p: &KernelParams) -> Self {
        SampleAdjoint {
            pi_logit: vec![0.0; p.classes()],
            mu: vec![0.0; p.mu.len()],
            var: vec![0.0; p.var.len()],
            feature: vec![0.0; p.dim],
        }
    }

    /// Accumulate `scale · ∂q_k/∂(μ, σ², f)` for `q_k = ‖f - μ_k‖²/(2σ²_k)`.
    fn add_exponent_grad(&mut self, p: &KernelParams, f: &[f64], k: usize, scale: f64) {
        let w = p.width();
        let (mu, var) = (p.mu_row(k), p.var_row(k));
        match p.mode {
            KernelMode::Isotropic => {
                let v = var[0];
                let mut sum_d = 0.0;
                let mut sum_sq = 0.0;
                for (j, &x) in f.iter().enumerate() {
                    let d = x - mu[0];
                    sum_d += d;
                    sum_sq += d * d;
                    self.feature[j] += scale * d / v;
                }
                self.mu[k] -= scale * sum_d / v;
                self.var[k] -= scale * sum_sq / (2.0 * v * v);
            }
            KernelMode::Anisotropic => {
                for (j, &x) in f.iter().enumerate() {
                    let (m, v) = (mu[j], var[j]);
                    let d = x - m;
                    self.feature[j] += scale * d / v;
                    self.mu[k * w + j] -= scale * d / v;
                    self.var[k * w + j] -= scale * d * d / (2.0 * v * v);
                }
            }
        }
    }
}

fn reconstruction_backward(batch: &BatchView, scale: f64, adj: &mut [SampleAdjoint]) {
    let used = batch
        .params
        .iter()
        .zip(&batch.labels)
        .filter(|(_, y)| y.count() > 0)
        .count();
    if used == 0 || scale == 0.0 {
        return;
    }
    let scale = scale / used as f64;
    for (n, ((p, y), f)) in batch
        .params
        .iter()
        .zip(&batch.labels)
        .zip(&batch.features)
        .enumerate()
    {
        let Some(x) = log_odds_outside(f, p, y) else {
            continue;
        };
        let s = sigmoid(x);
        let t: Vec<f64> = (0..p.classes()).map(|k| p.pi[k].ln() - p.exponent(f, k)).collect();
        let (inside, outside): (Vec<usize>, Vec<usize>) = (0..p.classes()).partition(|&k| y.get(k));
        let lse = |set: &[usize]| log_sum_exp(&set.iter().map(|&k| t[k]).collect::<Vec<_>>());
        let lse_in = lse(&inside);
        let mut dt = vec![0.0; p.classes()];
        for &k in &inside {
            dt[k] = -scale * s * (t[k] - lse_in).exp();
        }
        if s > 0.0 && !outside.is_empty() {
            let lse_out = lse(&outside);
            for &k in &outside {
                dt[k] = scale * s * (t[k] - lse_out).exp();
            }
        }
        for (k, &g) in dt.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            adj[n].pi_logit[k] += g * (1.0 - p.pi[k]);
            adj[n].add_exponent_grad(p, f, k, -g);
        }
    }
}

/// `∂ℓ/∂π` of one asymmetric-loss entry; zero where the clamp is active.
pub fn asl_term_grad(pi: f64, positive: bool, cfg: &LossConfig) -> f64 {
    if clamp_prob(pi, cfg.prob_clamp) != pi {
        return 0.0;
    }
    if positive {
        let g = cfg.gamma_plus;
        let focus = if g == 0.0 {
            0.0
        } else {
            g * (1.0 - pi).powf(g - 1.0) * pi.ln()
        };
        focus - (1.0 - pi).powf(g) / pi
    } else {
        let s = pi - cfg.margin;
        if s <= 0.0 {
            return 0.0;
        }
        let g = cfg.gamma_minus;
        let focus = if g == 0.0 {
            0.0
        } else {
            -g * s.powf(g - 1.0) * (1.0 - s).ln()
        };
        focus + s.powf(g) / (1.0 - s)
    }
}

fn asl_backward(batch: &BatchView, cfg: &LossConfig, scale: f64, adj: &mut [SampleAdjoint]) {
    if scale == 0.0 {
        return;
    }
    let scale = scale / batch.len() as f64;
    for (n, (p, y)) in batch.params.iter().zip(&batch.labels).enumerate() {
        for (k, &pi) in p.pi.iter().enumerate() {
            let g = asl_term_grad(pi, y.get(k), cfg);
            adj[n].pi_logit[k] += scale * g * pi * (1.0 - pi);
        }
    }
}

/// Push `up = ∂L/∂log ρ_k(a, b)` into both samples' adjoints.
fn pair_backward(
    kind: SimilarityKind,
    batch: &BatchView,
    a: usize,
    b: usize,
    k: usize,
    up: f64,
    adj: &mut [SampleAdjoint],
    d_shared: &mut [f64],
) {
    let (pa, pb) = (&batch.params[a], &batch.params[b]);
    let w = pa.width();
    let off = k * w;
    let (ma, va, mb, vb) = (pa.mu_row(k), pa.var_row(k), pb.mu_row(k), pb.var_row(k));
    let shared = &batch.shared_var;
    let dim = pa.dim as f64;
    match (kind, pa.mode) {
        (
            SimilarityKind::BhattacharyyaIsotropic
            | SimilarityKind::BhattacharyyaDiagonal
            | SimilarityKind::BhattacharyyaFull,
            KernelMode::Isotropic,
        ) => {
            let g = isotropic_log_coefficient_grad(ma[0], va[0], mb[0], vb[0], dim);
            adj[a].mu[off] += up * g.d_mu_p;
            adj[a].var[off] += up * g.d_var_p;
            adj[b].mu[off] += up * g.d_mu_q;
            adj[b].var[off] += up * g.d_var_q;
        }
        (
            SimilarityKind::BhattacharyyaIsotropic
            | SimilarityKind::BhattacharyyaDiagonal
            | SimilarityKind::BhattacharyyaFull,
            KernelMode::Anisotropic,
        ) => {
            for i in 0..w {
                let g = isotropic_log_coefficient_grad(ma[i], va[i], mb[i], vb[i], 1.0);
                adj[a].mu[off + i] += up * g.d_mu_p;
                adj[a].var[off + i] += up * g.d_var_p;
                adj[b].mu[off + i] += up * g.d_mu_q;
                adj[b].var[off + i] += up * g.d_var_q;
            }
        }
        (SimilarityKind::Mahalanobis, KernelMode::Isotropic) => {
            let d = ma[0] - mb[0];
            let precision: f64 = shared.iter().map(|s| 1.0 / s).sum();
            let dm = -d * precision / 4.0;
            adj[a].mu[off] += up * dm;
            adj[b].mu[off] -= up * dm;
            for (g, s) in d_shared.iter_mut().zip(shared) {
                *g += up * d * d / (8.0 * s * s);
            }
        }
        (SimilarityKind::Mahalanobis, KernelMode::Anisotropic) => {
            for i in 0..w {
                let d = ma[i] - mb[i];
                let s = shared[i];
                let dm = -d / (4.0 * s);
                adj[a].mu[off + i] += up * dm;
                adj[b].mu[off + i] -= up * dm;
                d_shared[i] += up * d * d / (8.0 * s * s);
            }
        }
        (SimilarityKind::GaussianRbf, KernelMode::Isotropic) => {
            let d = ma[0] - mb[0];
            let s = shared[0];
            let dm = -dim * d / (4.0 * s);
            adj[a].mu[off] += up * dm;
            adj[b].mu[off] -= up * dm;
            d_shared[0] += up * dim * d * d / (8.0 * s * s);
        }
        (SimilarityKind::GaussianRbf, KernelMode::Anisotropic) => {
            let s = shared[0];
            let mut sq = 0.0;
            for i in 0..w {
                let d = ma[i] - mb[i];
                sq += d * d;
                let dm = -d / (4.0 * s);
                adj[a].mu[off + i] += up * dm;
                adj[b].mu[off + i] -= up * dm;
            }
            d_shared[0] += up * sq / (8.0 * s * s);
        }
    }
}

fn kmcl_backward(
    batch: &BatchView,
    cfg: &LossConfig,
    scale: f64,
    adj: &mut [SampleAdjoint],
    d_shared: &mut [f64],
) {
    if scale == 0.0 {
        return;
    }
    let n = batch.len();
    let classes = batch.classes();
    let tau = cfg.tau;
    let table = SimilarityTable::build(batch, cfg.similarity);
    let idx = |k: usize, a: usize, b: usize| (k * n + a) * n + b;
    // ∂L/∂ρ_k[anchor][other], before symmetrizing.
    let mut d_rho = vec![0.0; classes * n * n];
    let mut class_weight = vec![0.0; classes];
    for anchor in 0..n {
        let positives = positive_set(&batch.labels, anchor);
        if positives.is_empty() {
            continue;
        }
        let coef = -scale / (n as f64 * positives.len() as f64);
        class_weight.fill(0.0);
        for pair in &positives {
            let c = coef * jaccard(&batch.labels[anchor], &batch.labels[pair.index]);
            for &k in &pair.shared {
                d_rho[idx(k, anchor, pair.index)] += c / tau;
                class_weight[k] += c;
            }
        }
        for (k, &wk) in class_weight.iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            let lse = log_denominator(&table, k, anchor, tau);
            for i in (0..n).filter(|&i| i != anchor) {
                let softmax = (table.get(k, anchor, i) / tau - lse).exp();
                d_rho[idx(k, anchor, i)] -= wk * softmax / tau;
            }
        }
    }
    for k in 0..classes {
        for a in 0..n {
            for b in a + 1..n {
                let g = d_rho[idx(k, a, b)] + d_rho[idx(k, b, a)];
                if g != 0.0 {
                    let up = g * table.get(k, a, b);
                    pair_backward(cfg.similarity, batch, a, b, k, up, adj, d_shared);
                }
            }
        }
    }
}

/// Accumulate `a = W f + b` gradients for one head given `∂L/∂a`.
fn affine_backward(
    weight: &[f64],
    d_a: &[f64],
    f: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_f: &mut [f64],
) {
    let m = f.len();
    for (r, &g) in d_a.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        d_bias[r] += g;
        let row = r * m;
        for j in 0..m {
            d_weight[row + j] += g * f[j];
            d_f[j] += g * weight[row + j];
        }
    }
}

/// Gradient of `weights`-combined loss terms with respect to every parameter,
/// returned in the shape of `model`.
pub fn gradient(
    model: &Model,
    inputs: &[Vec<f64>],
    labels: &[LabelVector],
    cfg: &LossConfig,
    weights: TermWeights,
) -> Result<(LossBreakdown, Model)> {
    cfg.validate()?;
    let kc = model.kmm.config;
    cfg.check_kernel_layout(kc.mode, kc.dim, kc.shared.len(kc.dim))?;
    let (samples, batch) = model.forward_batch(inputs, labels)?;
    let loss = weighted_loss(&batch, cfg, weights)?;
    let grad = backward_from(model, &samples, &batch, cfg, weights);
    Ok((loss, grad))
}

fn backward_from(
    model: &Model,
    samples: &[SampleForward],
    batch: &BatchView,
    cfg: &LossConfig,
    weights: TermWeights,
) -> Model {
    let mut adj: Vec<SampleAdjoint> = batch.params.iter().map(SampleAdjoint::zeros).collect();
    let mut d_shared = vec![0.0; batch.shared_var.len()];
    reconstruction_backward(batch, weights.rec, &mut adj);
    asl_backward(batch, cfg, weights.asl, &mut adj);
    kmcl_backward(batch, cfg, weights.kmcl, &mut adj, &mut d_shared);

    let mut grad = model.zeros_like();
    let w = &model.kmm;
    for (sample, mut a) in samples.iter().zip(adj) {
        let f = sample.features();
        let d_var_logit: Vec<f64> = a
            .var
            .iter()
            .zip(&sample.activations.var)
            .map(|(g, &x)| g * elu_grad(x))
            .collect();
        let g = &mut grad.kmm;
        affine_backward(&w.w_pi, &a.pi_logit, f, &mut g.w_pi, &mut g.b_pi, &mut a.feature);
        affine_backward(&w.w_mu, &a.mu, f, &mut g.w_mu, &mut g.b_mu, &mut a.feature);
        affine_backward(&w.w_var, &d_var_logit, f, &mut g.w_var, &mut g.b_var, &mut a.feature);
        model
            .encoder
            .backward(&sample.trace, &a.feature, &mut grad.encoder);
    }
    for ((g, &raw), d) in grad.kmm.shared_var.iter_mut().zip(&w.shared_var).zip(&d_shared) {
        *g += d * elu_grad(raw);
    }
    grad
}

/// Fill `store`'s gradient buffer with the full objective's gradient at the
/// parameters of `model` and return the loss.
pub fn backward(
    model: &Model,
    inputs: &[Vec<f64>],
    labels: &[LabelVector],
    cfg: &LossConfig,
    store: &mut ParamStore,
) -> Result<LossBreakdown> {
    let (loss, grad) = gradient(model, inputs, labels, cfg, TermWeights::from_config(cfg))?;
    store.set_grads(&grad.flatten())?;
    Ok(loss)
}

/// Relative error with an absolute floor of `1e-8` on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences `(f(x + h eᵢ) - f(x - h eᵢ)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdRow {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub h: f64,
    pub rows: Vec<FdRow>,
    pub max_rel_err: f64,
    /// Index into `rows` of the largest error.
    pub worst: usize,
}

impl FdReport {
    pub fn compare(names: Vec<String>, analytic: &[f64], numeric: &[f64], h: f64) -> Self {
        let rows: Vec<FdRow> = names
            .into_iter()
            .zip(analytic.iter().zip(numeric))
            .map(|(name, (&a, &n))| FdRow {
                name,
                analytic: a,
                numeric: n,
                rel_err: relative_error(a, n),
            })
            .collect();
        let (worst, max_rel_err) = rows
            .iter()
            .enumerate()
            .fold((0, 0.0), |(wi, wv), (i, r)| {
                if r.rel_err > wv || r.rel_err.is_nan() {
                    (i, r.rel_err)
                } else {
                    (wi, wv)
                }
            });
        FdReport {
            h,
            rows,
            max_rel_err,
            worst,
        }
    }

    pub fn worst_row(&self) -> Option<&FdRow> {
        self.rows.get(self.worst)
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(KmclError::invalid("h", format!("step {h} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Compare a supplied flat gradient against central differences of the
/// objective at `model`.
pub fn finite_diff_compare(
    model: &Model,
    inputs: &[Vec<f64>],
    labels: &[LabelVector],
    cfg: &LossConfig,
    weights: TermWeights,
    analytic: &[f64],
    h: f64,
) -> Result<FdReport> {
    check_step(h)?;
    let store = model.to_store();
    if analytic.len() != store.len() {
        return Err(KmclError::DimensionMismatch {
            what: "analytic gradient",
            expected: store.len(),
            found: analytic.len(),
        });
    }
    let mut probe = model.clone();
    let numeric = central_difference(
        |theta| {
            probe.load_flat(theta)?;
            loss_value(&probe, inputs, labels, cfg, weights)
        },
        store.values(),
        h,
    )?;
    let names = (0..store.len()).map(|i| store.coordinate_name(i)).collect();
    Ok(FdReport::compare(names, analytic, &numeric, h))
}

/// Analytic gradient of the full objective checked against central differences.
pub fn finite_diff_check(
    model: &Model,
    inputs: &[Vec<f64>],
    labels: &[LabelVector],
    cfg: &LossConfig,
    h: f64,
) -> Result<FdReport> {
    check_step(h)?;
    let weights = TermWeights::from_config(cfg);
    let (_, grad) = gradient(model, inputs, labels, cfg, weights)?;
    finite_diff_compare(model, inputs, labels, cfg, weights, &grad.flatten(), h)
}
