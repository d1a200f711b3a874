//! Seeded verification runs behind the `sim-verify` and `grad-check`
//! subcommands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::EncoderConfig;
use crate::error::{KmclError, Result};
use crate::grad::{finite_diff_compare, gradient, FdReport, TermWeights};
use crate::kmm::{KernelMode, SharedVariance};
use crate::losses::{LabelVector, LossConfig};
use crate::model::{Model, ModelConfig};
use crate::similarity::{
    bhattacharyya_full_with_det_exponent, quadrature_oracle, similarity, KernelSpec, QuadGrid,
    SimilarityKind,
};

/// Determinant exponent substituted when a fault is injected into the full
/// closed form.
pub const FAULT_DET_EXPONENT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SimVerifyConfig {
    pub draws_1d: usize,
    pub draws_2d: usize,
    pub points_1d: usize,
    pub points_2d: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Evaluate the full form with the wrong determinant exponent.
    pub inject_fault: bool,
}

impl Default for SimVerifyConfig {
    fn default() -> Self {
        SimVerifyConfig {
            draws_1d: 50,
            draws_2d: 20,
            points_1d: 4001,
            points_2d: 401,
            tolerance: 1e-6,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub kind: SimilarityKind,
    pub params: String,
    pub closed_form: f64,
    pub oracle: f64,
    pub rel_err: f64,
}

pub const ORACLE_HEADER: &str = "kind,params,closed_form,oracle,rel_err";

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

fn describe(k: &KernelSpec) -> String {
    let mean: Vec<f64> = (0..k.dim()).map(|i| k.mean_at(i)).collect();
    let cov = k.covariance_matrix();
    format!("mu=[{}] cov=[{}]", fmt_list(&mean), fmt_list(cov.as_slice()))
}

const MEAN_RANGE: std::ops::Range<f64> = -3.0..3.0;
const VAR_RANGE: std::ops::Range<f64> = 0.25..4.0;

fn random_spd(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    if dim == 1 {
        return vec![rng.random_range(VAR_RANGE)];
    }
    let a: f64 = rng.random_range(VAR_RANGE);
    let c = rng.random_range(VAR_RANGE);
    let b = rng.random_range(-0.8..0.8) * (a * c).sqrt();
    vec![a, b, b, c]
}

fn random_mean(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(MEAN_RANGE)).collect()
}

/// One kernel pair per similarity kind, each satisfying that kind's
/// validity constraint.
fn draw_pairs(rng: &mut ChaCha8Rng, dim: usize) -> Result<Vec<(SimilarityKind, KernelSpec, KernelSpec)>> {
    let full_p = KernelSpec::full(random_mean(rng, dim), &random_spd(rng, dim))?;
    let full_q = KernelSpec::full(random_mean(rng, dim), &random_spd(rng, dim))?;
    let diag = |rng: &mut ChaCha8Rng| {
        KernelSpec::diagonal(
            random_mean(rng, dim),
            (0..dim).map(|_| rng.random_range(VAR_RANGE)).collect(),
        )
    };
    let diag_p = diag(rng)?;
    let diag_q = diag(rng)?;
    let iso_p = KernelSpec::isotropic(rng.random_range(MEAN_RANGE), rng.random_range(VAR_RANGE), dim)?;
    let iso_q = KernelSpec::isotropic(rng.random_range(MEAN_RANGE), rng.random_range(VAR_RANGE), dim)?;
    let shared = random_spd(rng, dim);
    let maha_p = KernelSpec::full(random_mean(rng, dim), &shared)?;
    let maha_q = KernelSpec::full(random_mean(rng, dim), &shared)?;
    let var = rng.random_range(VAR_RANGE);
    let gauss_p = KernelSpec::isotropic_at(random_mean(rng, dim), var)?;
    let gauss_q = KernelSpec::isotropic_at(random_mean(rng, dim), var)?;
    Ok(vec![
        (SimilarityKind::BhattacharyyaFull, full_p, full_q),
        (SimilarityKind::BhattacharyyaDiagonal, diag_p, diag_q),
        (SimilarityKind::BhattacharyyaIsotropic, iso_p, iso_q),
        (SimilarityKind::Mahalanobis, maha_p, maha_q),
        (SimilarityKind::GaussianRbf, gauss_p, gauss_q),
    ])
}

/// Every closed form against trapezoidal quadrature on seeded random pairs:
/// five rows per draw, one-dimensional draws first.
pub fn sim_oracle_suite(cfg: &SimVerifyConfig) -> Result<Vec<OracleRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(5 * (cfg.draws_1d + cfg.draws_2d));
    for (dim, draws, points) in [(1, cfg.draws_1d, cfg.points_1d), (2, cfg.draws_2d, cfg.points_2d)] {
        for _ in 0..draws {
            for (kind, p, q) in draw_pairs(&mut rng, dim)? {
                let closed_form = if kind == SimilarityKind::BhattacharyyaFull && cfg.inject_fault {
                    bhattacharyya_full_with_det_exponent(&p, &q, FAULT_DET_EXPONENT)?
                } else {
                    similarity(kind, &p, &q)?
                };
                let oracle = quadrature_oracle(&p, &q, &QuadGrid::covering(&p, &q, points)?)?;
                rows.push(OracleRow {
                    kind,
                    params: format!("p: {} | q: {}", describe(&p), describe(&q)),
                    closed_form,
                    oracle,
                    rel_err: (closed_form - oracle).abs() / oracle.abs(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn oracle_csv(rows: &[OracleRow]) -> String {
    let mut out = format!("{ORACLE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?}\n",
            r.kind, r.params, r.closed_form, r.oracle, r.rel_err
        ));
    }
    out
}

/// `Err(Verification)` naming the worst row if any exceeds `tolerance`.
pub fn check_oracle_rows(rows: &[OracleRow], tolerance: f64) -> Result<()> {
    let worst = rows
        .iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .ok_or_else(|| KmclError::Verification("no oracle rows".into()))?;
    if worst.rel_err <= tolerance {
        Ok(())
    } else {
        Err(KmclError::Verification(format!(
            "{} closed form differs from quadrature by rel err {:.3e} > {tolerance:e} ({})",
            worst.kind, worst.rel_err, worst.params
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub batch: usize,
    pub mode: KernelMode,
    pub steps: Vec<f64>,
    pub tolerance: f64,
    pub seed: u64,
    /// Perturb the analytic gradient before comparing.
    pub corrupt_gradient: bool,
    pub loss: LossConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            input_dim: 5,
            hidden: vec![4],
            feature_dim: 4,
            classes: 3,
            batch: 3,
            mode: KernelMode::Isotropic,
            steps: vec![1e-5],
            tolerance: 1e-4,
            seed: 0,
            corrupt_gradient: false,
            loss: LossConfig::default(),
        }
    }
}

/// Random model and batch for the gradient check. Weights are jittered away
/// from the initializer's symmetric point, and labels are redrawn until
/// every sample has a positive and shares a class with another sample.
pub fn grad_check_case(cfg: &GradCheckConfig) -> Result<(Model, Vec<Vec<f64>>, Vec<LabelVector>)> {
    if cfg.batch < 2 {
        return Err(KmclError::invalid("grad_check.batch", "must be at least 2"));
    }
    let shared = match cfg.loss.similarity {
        SimilarityKind::Mahalanobis => SharedVariance::Diagonal,
        SimilarityKind::GaussianRbf => SharedVariance::Scalar,
        _ => SharedVariance::None,
    };
    let model_cfg = ModelConfig {
        encoder: EncoderConfig {
            input_dim: cfg.input_dim,
            hidden: cfg.hidden.clone(),
            feature_dim: cfg.feature_dim,
            identity: false,
            output_relu: false,
        },
        classes: cfg.classes,
        mode: cfg.mode,
        shared,
    };
    cfg.loss
        .check_kernel_layout(cfg.mode, cfg.feature_dim, shared.len(cfg.feature_dim))?;
    let mut model = Model::init(&model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for (_, t) in model.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let inputs = (0..cfg.batch)
        .map(|_| (0..cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let labels = loop {
        let labels: Vec<LabelVector> = (0..cfg.batch)
            .map(|_| {
                LabelVector::new((0..cfg.classes).map(|_| rng.random_bool(0.5) as u8).collect())
            })
            .collect::<Result<_>>()?;
        let linked = labels
            .iter()
            .enumerate()
            .all(|(i, a)| a.count() > 0 && labels.iter().enumerate().any(|(j, b)| i != j && a.dot(b) > 0));
        if linked {
            break labels;
        }
    };
    Ok((model, inputs, labels))
}

/// Finite-difference comparison of the full objective, one report per step.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<Vec<FdReport>> {
    let (model, inputs, labels) = grad_check_case(cfg)?;
    let weights = TermWeights::from_config(&cfg.loss);
    let (_, grad) = gradient(&model, &inputs, &labels, &cfg.loss, weights)?;
    let mut analytic = grad.flatten();
    if cfg.corrupt_gradient {
        let i = (0..analytic.len())
            .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
            .unwrap_or(0);
        analytic[i] = 2.0 * analytic[i] + 1.0;
    }
    cfg.steps
        .iter()
        .map(|&h| finite_diff_compare(&model, &inputs, &labels, &cfg.loss, weights, &analytic, h))
        .collect()
}

pub const GRAD_HEADER: &str = "h,name,analytic,numeric,rel_err";

pub fn grad_csv(reports: &[FdReport]) -> String {
    let mut out = format!("{GRAD_HEADER}\n");
    for rep in reports {
        for r in &rep.rows {
            out.push_str(&format!(
                "{:e},{},{:?},{:?},{:?}\n",
                rep.h, r.name, r.analytic, r.numeric, r.rel_err
            ));
        }
    }
    out
}

/// `Err(Verification)` naming the worst coordinate of any report above `tolerance`.
pub fn check_grad_reports(reports: &[FdReport], tolerance: f64) -> Result<()> {
    for rep in reports {
        if !(rep.max_rel_err <= tolerance) {
            let name = rep.worst_row().map(|r| r.name.as_str()).unwrap_or("?");
            return Err(KmclError::Verification(format!(
                "gradient of `{name}` off by rel err {:.3e} > {tolerance:e} at h={:e}",
                rep.max_rel_err, rep.h
            )));
        }
    }
    Ok(())
}
