//! Kernel Mixture Module: a fully connected head turning a feature vector
//! into per-class mixture parameters `(π_k, μ_k, σ²_k)`.
//!
//! Activations: `π = sigmoid(a^π)`, `μ = a^μ`, `σ² = ELU(a^σ²) + 2 + ε`.
//! The `+2` offset bounds every variance below by `1 + ε` because ELU with
//! `α = 1` never drops under `-1`.

use rand::Rng;

use crate::error::{KmclError, Result};
use crate::similarity::KernelSpec;

pub const ELU_ALPHA: f64 = 1.0;
pub const VAR_EPS: f64 = 1e-7;
pub const VAR_OFFSET: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// Scalar mean `μ_k·1` and variance `σ²_k I` per class.
    Isotropic,
    /// Per-dimension means and variances per class.
    Anisotropic,
}

impl KernelMode {
    pub fn name(self) -> &'static str {
        match self {
            KernelMode::Isotropic => "isotropic",
            KernelMode::Anisotropic => "anisotropic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "isotropic" => Ok(KernelMode::Isotropic),
            "anisotropic" => Ok(KernelMode::Anisotropic),
            _ => Err(KmclError::invalid("kernel_mode", format!("unknown mode `{s}`"))),
        }
    }
}

/// Class-independent variance used by the Mahalanobis and Gaussian similarity
/// variants; learned alongside the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SharedVariance {
    None,
    /// One variance per feature dimension.
    Diagonal,
    /// A single variance for every class and dimension.
    Scalar,
}

impl SharedVariance {
    pub fn name(self) -> &'static str {
        match self {
            SharedVariance::None => "none",
            SharedVariance::Diagonal => "diagonal",
            SharedVariance::Scalar => "scalar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SharedVariance::None),
            "diagonal" => Ok(SharedVariance::Diagonal),
            "scalar" => Ok(SharedVariance::Scalar),
            _ => Err(KmclError::invalid(
                "shared_variance",
                format!("unknown kind `{s}`"),
            )),
        }
    }

    pub fn len(self, dim: usize) -> usize {
        match self {
            SharedVariance::None => 0,
            SharedVariance::Diagonal => dim,
            SharedVariance::Scalar => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KmmConfig {
    pub classes: usize,
    pub dim: usize,
    pub mode: KernelMode,
    pub shared: SharedVariance,
}

impl KmmConfig {
    pub fn new(classes: usize, dim: usize, mode: KernelMode) -> Self {
        KmmConfig {
            classes,
            dim,
            mode,
            shared: SharedVariance::None,
        }
    }

    /// Entries per class in the mean and variance heads (1 or `dim`).
    pub fn width(&self) -> usize {
        match self.mode {
            KernelMode::Isotropic => 1,
            KernelMode::Anisotropic => self.dim,
        }
    }
}

/// Weights of the three heads, row-major.
///
/// `w_pi` is `K×M`. In isotropic mode `w_mu`/`w_var` are `K×M` and the mean
/// and variance biases have `K` entries; in anisotropic mode they are `K`
/// stacked `M×M` blocks with `K×M` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct KmmWeights {
    pub config: KmmConfig,
    pub w_pi: Vec<f64>,
    pub w_mu: Vec<f64>,
    pub w_var: Vec<f64>,
    pub b_pi: Vec<f64>,
    pub b_mu: Vec<f64>,
    pub b_var: Vec<f64>,
    /// Raw (pre-activation) shared variance; see [`SharedVariance`].
    pub shared_var: Vec<f64>,
}

impl KmmWeights {
    pub fn zeros(config: KmmConfig) -> Self {
        let (k, m, w) = (config.classes, config.dim, config.width());
        KmmWeights {
            config,
            w_pi: vec![0.0; k * m],
            w_mu: vec![0.0; k * w * m],
            w_var: vec![0.0; k * w * m],
            b_pi: vec![0.0; k],
            b_mu: vec![0.0; k * w],
            b_var: vec![0.0; k * w],
            shared_var: vec![0.0; config.shared.len(m)],
        }
    }

    /// `W_π, W_μ ~ U(0, 0.1)`, `W_σ² = 1`, zero biases.
    pub fn init<R: Rng + ?Sized>(config: KmmConfig, rng: &mut R) -> Self {
        let mut w = Self::zeros(config);
        for v in w.w_pi.iter_mut().chain(w.w_mu.iter_mut()) {
            *v = rng.random_range(0.0..0.1);
        }
        w.w_var.fill(1.0);
        w
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("kmm.w_pi", &self.w_pi),
            ("kmm.w_mu", &self.w_mu),
            ("kmm.w_var", &self.w_var),
            ("kmm.b_pi", &self.b_pi),
            ("kmm.b_mu", &self.b_mu),
            ("kmm.b_var", &self.b_var),
            ("kmm.shared_var", &self.shared_var),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("kmm.w_pi", &mut self.w_pi),
            ("kmm.w_mu", &mut self.w_mu),
            ("kmm.w_var", &mut self.w_var),
            ("kmm.b_pi", &mut self.b_pi),
            ("kmm.b_mu", &mut self.b_mu),
            ("kmm.b_var", &mut self.b_var),
            ("kmm.shared_var", &mut self.shared_var),
        ]
    }

    /// Activated shared variance, empty when the head has none.
    pub fn shared_variance(&self) -> Vec<f64> {
        self.shared_var.iter().map(|&a| activate_variance(a)).collect()
    }
}

/// Raw head outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct KmmActivations {
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-class mixture parameters for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub mode: KernelMode,
    pub dim: usize,
    pub pi: Vec<f64>,
    /// `K×width` row-major.
    pub mu: Vec<f64>,
    /// `K×width` row-major.
    pub var: Vec<f64>,
}

impl KernelParams {
    pub fn classes(&self) -> usize {
        self.pi.len()
    }

    pub fn width(&self) -> usize {
        match self.mode {
            KernelMode::Isotropic => 1,
            KernelMode::Anisotropic => self.dim,
        }
    }

    pub fn mu_row(&self, k: usize) -> &[f64] {
        let w = self.width();
        &self.mu[k * w..(k + 1) * w]
    }

    pub fn var_row(&self, k: usize) -> &[f64] {
        let w = self.width();
        &self.var[k * w..(k + 1) * w]
    }

    /// Exponent `‖f - μ_k‖² / (2σ²_k)` of class `k`'s kernel at `f`.
    pub fn exponent(&self, f: &[f64], k: usize) -> f64 {
        let (mu, var) = (self.mu_row(k), self.var_row(k));
        match self.mode {
            KernelMode::Isotropic => {
                let sq: f64 = f.iter().map(|x| (x - mu[0]) * (x - mu[0])).sum();
                sq / (2.0 * var[0])
            }
            KernelMode::Anisotropic => f
                .iter()
                .zip(mu)
                .zip(var)
                .map(|((x, m), v)| (x - m) * (x - m) / (2.0 * v))
                .sum(),
        }
    }
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `log sigmoid(a)` without cancellation for large `|a|`.
#[inline]
pub fn log_sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        -(-a).exp().ln_1p()
    } else {
        a - a.exp().ln_1p()
    }
}

#[inline]
pub fn elu(a: f64) -> f64 {
    if a > 0.0 {
        a
    } else {
        ELU_ALPHA * a.exp_m1()
    }
}

#[inline]
pub fn elu_grad(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else {
        ELU_ALPHA * a.exp()
    }
}

#[inline]
pub fn activate_variance(a: f64) -> f64 {
    elu(a) + VAR_OFFSET + VAR_EPS
}

fn affine_rows(rows: &[f64], bias: &[f64], f: &[f64]) -> Vec<f64> {
    let m = f.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| {
            rows[r * m..(r + 1) * m]
                .iter()
                .zip(f)
                .map(|(w, x)| w * x)
                .sum::<f64>()
                + b
        })
        .collect()
}

/// `a = W f + b` for the three heads.
pub fn kmm_forward(f: &[f64], w: &KmmWeights) -> Result<KmmActivations> {
    if f.len() != w.config.dim {
        return Err(KmclError::DimensionMismatch {
            what: "feature vector",
            expected: w.config.dim,
            found: f.len(),
        });
    }
    Ok(KmmActivations {
        pi: affine_rows(&w.w_pi, &w.b_pi, f),
        mu: affine_rows(&w.w_mu, &w.b_mu, f),
        var: affine_rows(&w.w_var, &w.b_var, f),
    })
}

pub fn kmm_activate(a: &KmmActivations, mode: KernelMode, dim: usize) -> KernelParams {
    KernelParams {
        mode,
        dim,
        pi: a.pi.iter().map(|&x| sigmoid(x)).collect(),
        mu: a.mu.clone(),
        var: a.var.iter().map(|&x| activate_variance(x)).collect(),
    }
}

/// `G_S(f) = Σ_{k∈S} π_k exp(-‖f - μ_k‖²/(2σ²_k))`; zero for empty `S`.
pub fn mixture_density(f: &[f64], params: &KernelParams, subset: &[usize]) -> f64 {
    subset
        .iter()
        .map(|&k| params.pi[k] * (-params.exponent(f, k)).exp())
        .sum()
}

/// `log G_S(f)` evaluated as a log-sum-exp; `-∞` for empty `S`.
pub fn log_mixture_density(f: &[f64], params: &KernelParams, subset: &[usize]) -> f64 {
    let terms: Vec<f64> = subset
        .iter()
        .map(|&k| params.pi[k].ln() - params.exponent(f, k))
        .collect();
    log_sum_exp(&terms)
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Class `k`'s kernel as a standalone spec: isotropic with broadcast mean,
/// or diagonal in anisotropic mode.
pub fn params_to_kernelspec(params: &KernelParams, k: usize) -> Result<KernelSpec> {
    if k >= params.classes() {
        return Err(KmclError::IndexOutOfRange {
            what: "classes",
            index: k,
            len: params.classes(),
        });
    }
    match params.mode {
        KernelMode::Isotropic => {
            KernelSpec::isotropic(params.mu_row(k)[0], params.var_row(k)[0], params.dim)
        }
        KernelMode::Anisotropic => {
            KernelSpec::diagonal(params.mu_row(k).to_vec(), params.var_row(k).to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{bhattacharyya_diagonal, bhattacharyya_isotropic};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_weights(config: KmmConfig, seed: u64) -> KmmWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = KmmWeights::zeros(config);
        for (_, t) in w.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        w
    }

    #[test]
    fn zero_weights_give_zero_activations() {
        let w = KmmWeights::zeros(KmmConfig::new(3, 4, KernelMode::Isotropic));
        let a = kmm_forward(&[1.0, 2.0, 3.0, 4.0], &w).unwrap();
        assert!(a.pi.iter().chain(&a.mu).chain(&a.var).all(|&v| v == 0.0));
    }

    #[test]
    fn unit_vector_selects_column() {
        let config = KmmConfig::new(2, 3, KernelMode::Isotropic);
        let w = random_weights(config, 1);
        let w = KmmWeights {
            b_pi: vec![0.0; 2],
            b_mu: vec![0.0; 2],
            b_var: vec![0.0; 2],
            ..w
        };
        let a = kmm_forward(&[0.0, 1.0, 0.0], &w).unwrap();
        for k in 0..2 {
            assert_eq!(a.pi[k], w.w_pi[k * 3 + 1]);
            assert_eq!(a.mu[k], w.w_mu[k * 3 + 1]);
        }
    }

    #[test]
    fn forward_matches_naive_loops() {
        for mode in [KernelMode::Isotropic, KernelMode::Anisotropic] {
            let config = KmmConfig::new(3, 5, mode);
            let w = random_weights(config, 7);
            let f = [0.3, -1.2, 0.8, 2.0, -0.1];
            let a = kmm_forward(&f, &w).unwrap();
            let rows = 3 * config.width();
            for r in 0..rows {
                let mut acc = w.b_mu[r];
                for j in 0..5 {
                    acc += w.w_mu[r * 5 + j] * f[j];
                }
                assert!((a.mu[r] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let w = KmmWeights::zeros(KmmConfig::new(2, 3, KernelMode::Isotropic));
        assert!(kmm_forward(&[1.0, 2.0], &w).is_err());
    }

    #[test]
    fn activation_spot_values() {
        let a = KmmActivations {
            pi: vec![0.0],
            mu: vec![0.7],
            var: vec![0.0],
        };
        let p = kmm_activate(&a, KernelMode::Isotropic, 4);
        assert_eq!(p.pi[0], 0.5);
        assert_eq!(p.mu[0], 0.7);
        assert_eq!(p.var[0], 2.0 + VAR_EPS);
        let low = activate_variance(-20.0);
        assert!((low - (1.0 + VAR_EPS + (-20.0_f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn elu_gradient_is_continuous_at_zero() {
        let h = 1e-7;
        let left = (elu(0.0) - elu(-h)) / h;
        let right = (elu(h) - elu(0.0)) / h;
        assert!((left - right).abs() < 1e-6);
        assert_eq!(elu_grad(0.0), 1.0);
        assert_eq!(elu_grad(1e-12), 1.0);
    }

    #[test]
    fn log_sigmoid_matches_direct() {
        for a in [-30.0, -2.0, 0.0, 1.5, 40.0] {
            assert!((log_sigmoid(a) - sigmoid(a).ln()).abs() < 1e-12);
        }
        assert!(log_sigmoid(-800.0).is_finite());
    }

    #[test]
    fn mixture_density_examples() {
        let params = KernelParams {
            mode: KernelMode::Isotropic,
            dim: 3,
            pi: vec![1.0, 0.5, 0.5],
            mu: vec![0.2, 0.2, 0.2],
            var: vec![2.0, 1.0, 3.0],
        };
        let f = [0.2, 0.2, 0.2];
        assert_eq!(mixture_density(&f, &params, &[0]), 1.0);
        assert_eq!(mixture_density(&f, &params, &[]), 0.0);
        assert_eq!(mixture_density(&f, &params, &[1, 2]), 1.0);
        assert_eq!(log_mixture_density(&f, &params, &[]), f64::NEG_INFINITY);
        let g = [1.0, -0.5, 0.3];
        let direct = mixture_density(&g, &params, &[0, 2]).ln();
        assert!((log_mixture_density(&g, &params, &[0, 2]) - direct).abs() < 1e-14);
    }

    #[test]
    fn kernelspec_bridge() {
        let iso = KernelParams {
            mode: KernelMode::Isotropic,
            dim: 16,
            pi: vec![0.5],
            mu: vec![0.3],
            var: vec![2.0],
        };
        let spec = params_to_kernelspec(&iso, 0).unwrap();
        assert_eq!(spec, KernelSpec::isotropic(0.3, 2.0, 16).unwrap());
        assert_eq!(bhattacharyya_isotropic(&spec, &spec).unwrap(), 1.0);
        assert!(params_to_kernelspec(&iso, 1).is_err());

        let aniso = KernelParams {
            mode: KernelMode::Anisotropic,
            dim: 2,
            pi: vec![0.5],
            mu: vec![0.3, -0.1],
            var: vec![2.0, 1.5],
        };
        let spec = params_to_kernelspec(&aniso, 0).unwrap();
        assert_eq!(spec.dim(), 2);
        assert_eq!(spec.diagonal_variances().unwrap(), vec![2.0, 1.5]);
        assert_eq!(bhattacharyya_diagonal(&spec, &spec).unwrap(), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn activations_stay_in_range(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let p = sigmoid(a);
            proptest::prop_assert!(p > 0.0 && p < 1.0 || a.abs() > 36.0);
            proptest::prop_assert!(activate_variance(b) >= 1.0 + VAR_EPS);
            if a < b {
                proptest::prop_assert!(sigmoid(a) <= sigmoid(b));
                proptest::prop_assert!(activate_variance(a) <= activate_variance(b));
                if b > -30.0 {
                    proptest::prop_assert!(activate_variance(a) < activate_variance(b));
                }
            }
        }

        #[test]
        fn subset_density_is_bounded(
            f in proptest::collection::vec(-3.0f64..3.0, 4),
            mus in proptest::collection::vec(-3.0f64..3.0, 3),
            pis in proptest::collection::vec(0.01f64..0.99, 3),
            mask in 0u8..8,
        ) {
            let params = KernelParams {
                mode: KernelMode::Isotropic,
                dim: 4,
                pi: pis.clone(),
                mu: mus,
                var: vec![1.5, 2.5, 4.0],
            };
            let subset: Vec<usize> = (0..3).filter(|k| mask & (1 << k) != 0).collect();
            let all = [0, 1, 2];
            let gs = mixture_density(&f, &params, &subset);
            let gy = mixture_density(&f, &params, &all);
            proptest::prop_assert!(gs <= gy);
            let bound: f64 = subset.iter().map(|&k| pis[k]).sum();
            proptest::prop_assert!(gs <= bound + 1e-15);
        }
    }
}
