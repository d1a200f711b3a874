//! Reconstruction, asymmetric classification and kernel contrastive losses,
//! and their weighted sum.

use crate::error::{KmclError, Result};
use crate::kmm::{log_sum_exp, KernelMode, KernelParams};
use crate::similarity::{isotropic_log_coefficient, SimilarityKind};

/// Multi-hot ground truth `y ∈ {0,1}^K`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(KmclError::invalid("labels", format!("entry {bad} is not binary")));
        }
        Ok(LabelVector(bits))
    }

    pub fn from_indices(classes: usize, positives: &[usize]) -> Self {
        let mut bits = vec![0; classes];
        for &k in positives {
            bits[k] = 1;
        }
        LabelVector(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn get(&self, k: usize) -> bool {
        self.0[k] == 1
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&k| self.0[k] == 1).collect()
    }

    pub fn dot(&self, other: &LabelVector) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| **a == 1 && **b == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_asl: f64,
    pub lambda_kmcl: f64,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub margin: f64,
    pub tau: f64,
    /// Probabilities are clamped to `[prob_clamp, 1 - prob_clamp]` before logs.
    pub prob_clamp: f64,
    pub similarity: SimilarityKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_asl: 0.1,
            lambda_kmcl: 0.3,
            gamma_plus: 0.0,
            gamma_minus: 4.0,
            margin: 0.05,
            tau: 0.2,
            prob_clamp: 1e-7,
            similarity: SimilarityKind::BhattacharyyaIsotropic,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("loss.lambda_asl", self.lambda_asl),
            ("loss.lambda_kmcl", self.lambda_kmcl),
            ("loss.gamma_plus", self.gamma_plus),
            ("loss.gamma_minus", self.gamma_minus),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(KmclError::invalid(name, format!("must be >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(KmclError::invalid("loss.margin", "must lie in [0, 1)"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(KmclError::invalid("loss.tau", "must be > 0"));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(KmclError::invalid("loss.prob_clamp", "must lie in (0, 0.5)"));
        }
        Ok(())
    }

    /// Check that the similarity kind can be evaluated on kernels of `mode`
    /// with a shared variance of `shared_len` entries (`dim` features).
    pub fn check_kernel_layout(&self, mode: KernelMode, dim: usize, shared_len: usize) -> Result<()> {
        let ok = match self.similarity {
            SimilarityKind::BhattacharyyaIsotropic => mode == KernelMode::Isotropic,
            SimilarityKind::BhattacharyyaDiagonal => mode == KernelMode::Anisotropic,
            SimilarityKind::BhattacharyyaFull => false,
            SimilarityKind::Mahalanobis => shared_len == dim,
            SimilarityKind::GaussianRbf => shared_len == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(KmclError::invalid(
                "loss.similarity",
                format!(
                    "`{}` cannot be used with {} kernels and {} shared variances",
                    self.similarity,
                    mode.name(),
                    shared_len
                ),
            ))
        }
    }
}

/// Forward quantities of one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchView {
    pub params: Vec<KernelParams>,
    pub labels: Vec<LabelVector>,
    pub features: Vec<Vec<f64>>,
    /// Activated class-independent variance (empty unless the similarity
    /// kind needs one).
    pub shared_var: Vec<f64>,
}

impl BatchView {
    pub fn new(
        params: Vec<KernelParams>,
        labels: Vec<LabelVector>,
        features: Vec<Vec<f64>>,
        shared_var: Vec<f64>,
    ) -> Result<Self> {
        let n = params.len();
        if n == 0 {
            return Err(KmclError::invalid("batch", "needs at least one sample"));
        }
        for (what, len) in [("labels", labels.len()), ("features", features.len())] {
            if len != n {
                return Err(KmclError::DimensionMismatch {
                    what,
                    expected: n,
                    found: len,
                });
            }
        }
        let k = params[0].classes();
        let m = params[0].dim;
        for i in 0..n {
            let p = &params[i];
            if p.classes() != k || labels[i].len() != k {
                return Err(KmclError::DimensionMismatch {
                    what: "classes",
                    expected: k,
                    found: p.classes().min(labels[i].len()),
                });
            }
            if p.dim != m || features[i].len() != m || p.mode != params[0].mode {
                return Err(KmclError::DimensionMismatch {
                    what: "feature dimension",
                    expected: m,
                    found: features[i].len(),
                });
            }
        }
        Ok(BatchView {
            params,
            labels,
            features,
            shared_var,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.params[0].classes()
    }

    pub fn dim(&self) -> usize {
        self.params[0].dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reconstruction {
    pub value: f64,
    /// Samples without any positive label; they are left out of the mean.
    pub empty_label_samples: usize,
    pub samples: usize,
}

impl Reconstruction {
    pub fn all_empty(&self) -> bool {
        self.empty_label_samples == self.samples
    }
}

/// Mean over samples of `-log(G_S(f)/G_Y(f))`, evaluated in log space.
pub fn reconstruction_loss(batch: &BatchView) -> Reconstruction {
    let mut total = 0.0;
    let mut used = 0usize;
    for ((p, y), f) in batch.params.iter().zip(&batch.labels).zip(&batch.features) {
        if let Some(x) = log_odds_outside(f, p, y) {
            total += softplus(x);
            used += 1;
        }
    }
    Reconstruction {
        value: if used == 0 { 0.0 } else { total / used as f64 },
        empty_label_samples: batch.len() - used,
        samples: batch.len(),
    }
}

/// `log G_{Y∖S}(f) - log G_S(f)`, or `None` when `S` is empty.
///
/// `-log(G_S/G_Y) = log(1 + G_{Y∖S}/G_S)`, so the per-sample loss is the
/// softplus of this value and cannot go negative.
pub(crate) fn log_odds_outside(f: &[f64], p: &KernelParams, y: &LabelVector) -> Option<f64> {
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for k in 0..p.classes() {
        let t = p.pi[k].ln() - p.exponent(f, k);
        if y.get(k) {
            inside.push(t);
        } else {
            outside.push(t);
        }
    }
    if inside.is_empty() {
        return None;
    }
    Some(log_sum_exp(&outside) - log_sum_exp(&inside))
}

/// `log(1 + eˣ)`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn clamp_prob(pi: f64, clamp: f64) -> f64 {
    pi.clamp(clamp, 1.0 - clamp)
}

/// Asymmetric loss for one `(sample, class)` entry.
pub fn asl_term(pi: f64, positive: bool, cfg: &LossConfig) -> f64 {
    let p = clamp_prob(pi, cfg.prob_clamp);
    if positive {
        -(1.0 - p).powf(cfg.gamma_plus) * p.ln()
    } else {
        let shifted = (p - cfg.margin).max(0.0);
        -shifted.powf(cfg.gamma_minus) * (1.0 - shifted).ln()
    }
}

/// Sum over classes, mean over samples.
pub fn asl_loss(batch: &BatchView, cfg: &LossConfig) -> f64 {
    let total: f64 = batch
        .params
        .iter()
        .zip(&batch.labels)
        .map(|(p, y)| {
            p.pi.iter()
                .enumerate()
                .map(|(k, &pi)| asl_term(pi, y.get(k), cfg))
                .sum::<f64>()
        })
        .sum();
    total / batch.len() as f64
}

/// Intersection over union of two label vectors; 0 when both are empty.
pub fn jaccard(a: &LabelVector, b: &LabelVector) -> f64 {
    let inter = a.dot(b);
    let union = a.count() + b.count() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A member of an anchor's positive set with the classes it shares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositivePair {
    pub index: usize,
    pub shared: Vec<usize>,
}

/// Samples other than `anchor` that share at least one label with it.
pub fn positive_set(labels: &[LabelVector], anchor: usize) -> Vec<PositivePair> {
    let ya = &labels[anchor];
    labels
        .iter()
        .enumerate()
        .filter(|&(m, _)| m != anchor)
        .filter_map(|(m, ym)| {
            let shared: Vec<usize> = (0..ya.len()).filter(|&k| ya.get(k) && ym.get(k)).collect();
            (!shared.is_empty()).then_some(PositivePair { index: m, shared })
        })
        .collect()
}

/// Log-similarity of class `k` kernels of two samples under `kind`.
///
/// Mahalanobis and Gaussian use the batch's shared variance in place of the
/// per-sample variances.
pub fn class_log_similarity(
    kind: SimilarityKind,
    a: &KernelParams,
    b: &KernelParams,
    k: usize,
    shared_var: &[f64],
) -> f64 {
    let (ma, va, mb, vb) = (a.mu_row(k), a.var_row(k), b.mu_row(k), b.var_row(k));
    let dim = a.dim as f64;
    match (kind, a.mode) {
        (SimilarityKind::BhattacharyyaIsotropic, _) => {
            isotropic_log_coefficient(ma[0], va[0], mb[0], vb[0], dim)
        }
        (SimilarityKind::BhattacharyyaDiagonal | SimilarityKind::BhattacharyyaFull, _) => {
            if a.mode == KernelMode::Isotropic {
                isotropic_log_coefficient(ma[0], va[0], mb[0], vb[0], dim)
            } else {
                (0..ma.len())
                    .map(|i| isotropic_log_coefficient(ma[i], va[i], mb[i], vb[i], 1.0))
                    .sum()
            }
        }
        (SimilarityKind::Mahalanobis, KernelMode::Isotropic) => {
            let d = ma[0] - mb[0];
            let precision: f64 = shared_var.iter().map(|s| 1.0 / s).sum();
            -d * d * precision / 8.0
        }
        (SimilarityKind::Mahalanobis, KernelMode::Anisotropic) => {
            -(0..ma.len())
                .map(|i| (ma[i] - mb[i]) * (ma[i] - mb[i]) / shared_var[i])
                .sum::<f64>()
                / 8.0
        }
        (SimilarityKind::GaussianRbf, KernelMode::Isotropic) => {
            let d = ma[0] - mb[0];
            -dim * d * d / (8.0 * shared_var[0])
        }
        (SimilarityKind::GaussianRbf, KernelMode::Anisotropic) => {
            -(0..ma.len())
                .map(|i| (ma[i] - mb[i]) * (ma[i] - mb[i]))
                .sum::<f64>()
                / (8.0 * shared_var[0])
        }
    }
}

/// Per-class similarity tables `ρ_k[n][i]` for every pair in the batch.
pub(crate) struct SimilarityTable {
    pub n: usize,
    /// `classes × n × n`, row-major; diagonal entries unused.
    pub rho: Vec<f64>,
}

impl SimilarityTable {
    pub fn build(batch: &BatchView, kind: SimilarityKind) -> Self {
        let n = batch.len();
        let classes = batch.classes();
        let mut rho = vec![0.0; classes * n * n];
        for k in 0..classes {
            for a in 0..n {
                for b in a + 1..n {
                    let v = class_log_similarity(
                        kind,
                        &batch.params[a],
                        &batch.params[b],
                        k,
                        &batch.shared_var,
                    )
                    .exp();
                    rho[(k * n + a) * n + b] = v;
                    rho[(k * n + b) * n + a] = v;
                }
            }
        }
        SimilarityTable { n, rho }
    }

    #[inline]
    pub fn get(&self, k: usize, a: usize, b: usize) -> f64 {
        self.rho[(k * self.n + a) * self.n + b]
    }
}

/// `LSE_{i≠n} ρ_k[n][i]/τ`.
pub(crate) fn log_denominator(table: &SimilarityTable, k: usize, anchor: usize, tau: f64) -> f64 {
    let terms: Vec<f64> = (0..table.n)
        .filter(|&i| i != anchor)
        .map(|i| table.get(k, anchor, i) / tau)
        .collect();
    log_sum_exp(&terms)
}

/// Jaccard-weighted contrastive loss over all anchors of the batch.
pub fn kmcl_loss(batch: &BatchView, cfg: &LossConfig) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(KmclError::invalid("batch", "contrastive loss needs at least 2 samples"));
    }
    let table = SimilarityTable::build(batch, cfg.similarity);
    let classes = batch.classes();
    let mut total = 0.0;
    let mut denominators = vec![f64::NAN; classes];
    for anchor in 0..n {
        let positives = positive_set(&batch.labels, anchor);
        if positives.is_empty() {
            continue;
        }
        denominators.fill(f64::NAN);
        let mut anchor_sum = 0.0;
        for pair in &positives {
            let weight = jaccard(&batch.labels[anchor], &batch.labels[pair.index]);
            let mut inner = 0.0;
            for &k in &pair.shared {
                if denominators[k].is_nan() {
                    denominators[k] = log_denominator(&table, k, anchor, cfg.tau);
                }
                inner += table.get(k, anchor, pair.index) / cfg.tau - denominators[k];
            }
            anchor_sum += weight * inner;
        }
        total += -anchor_sum / positives.len() as f64;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub asl: f64,
    pub kmcl: f64,
    pub empty_label_samples: usize,
}

/// `L_REC + λ_ASL·L_ASL + λ_KMCL·L_KMCL`.
pub fn total_loss(batch: &BatchView, cfg: &LossConfig) -> Result<LossBreakdown> {
    let rec = reconstruction_loss(batch);
    let asl = asl_loss(batch, cfg);
    let kmcl = kmcl_loss(batch, cfg)?;
    Ok(LossBreakdown {
        total: rec.value + cfg.lambda_asl * asl + cfg.lambda_kmcl * kmcl,
        rec: rec.value,
        asl,
        kmcl,
        empty_label_samples: rec.empty_label_samples,
    })
}
