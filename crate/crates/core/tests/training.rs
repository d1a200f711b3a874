use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kmcl::data::{generate, identity_correlation, SynthConfig};
use kmcl::encoder::EncoderConfig;
use kmcl::kmm::{KernelMode, KernelParams, SharedVariance};
use kmcl::losses::{total_loss, BatchView, LabelVector, LossConfig};
use kmcl::model::ModelConfig;
use kmcl::similarity::SimilarityKind;
use kmcl::trainer::{train, TrainConfig};

fn iso_model(classes: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::default(),
        classes,
        mode: KernelMode::Isotropic,
        shared: SharedVariance::None,
    }
}

#[test]
fn contrastive_term_does_not_hurt_on_uncorrelated_labels() {
    let synth = SynthConfig {
        correlation: identity_correlation(8),
        ..SynthConfig::default()
    };
    let ds = generate(&synth).unwrap();
    let mut off = TrainConfig::default();
    off.loss.lambda_kmcl = 0.0;
    let without = train(&ds, &iso_model(8), &off).unwrap().curves.last().unwrap().test_map;
    let with = train(&ds, &iso_model(8), &TrainConfig::default())
        .unwrap()
        .curves
        .last()
        .unwrap()
        .test_map;
    println!("uncorrelated task: mAP without contrastive {without:.4}, with {with:.4}");
    assert!(without >= 0.9, "{without}");
    assert!(with >= without - 0.02, "{with} vs {without}");
}

#[test]
fn early_epoch_losses_decrease() {
    let ds = generate(&SynthConfig::default()).unwrap();
    let curves = train(&ds, &iso_model(8), &TrainConfig::default()).unwrap().curves;
    let first: Vec<f64> = curves.iter().take(5).map(|c| c.loss_total).collect();
    let rises = first.windows(2).filter(|w| w[1] > w[0]).count();
    println!("first five epoch losses {first:.4?}");
    assert!(rises <= 1, "{first:?}");
}

#[test]
fn learning_rate_curve_peaks_once_and_ends_low() {
    let ds = generate(&SynthConfig {
        train: 640,
        test: 0,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let curves = train(&ds, &iso_model(8), &cfg).unwrap().curves;
    let lr: Vec<f64> = curves.iter().map(|c| c.lr).collect();
    let peak = lr.iter().cloned().fold(0.0, f64::max);
    let at = lr.iter().position(|&v| v == peak).unwrap();
    assert!(lr[..=at].windows(2).all(|w| w[1] >= w[0]));
    assert!(lr[at..].windows(2).all(|w| w[1] <= w[0]));
    assert!(lr.last().unwrap() < &(cfg.base_lr / 25.0));
    assert!(curves.iter().all(|c| c.test_map.is_nan()));
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, k: usize, m: usize, mode: KernelMode) -> BatchView {
    let w = if mode == KernelMode::Isotropic { 1 } else { m };
    let params = (0..n)
        .map(|_| KernelParams {
            mode,
            dim: m,
            pi: (0..k).map(|_| rng.random_range(0.02..0.98)).collect(),
            mu: (0..k * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
            var: (0..k * w).map(|_| rng.random_range(1.0..3.0)).collect(),
        })
        .collect();
    let labels = (0..n)
        .map(|_| LabelVector::new((0..k).map(|_| rng.random_bool(0.5) as u8).collect()).unwrap())
        .collect();
    let features = (0..n)
        .map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    BatchView::new(params, labels, features, Vec::new()).unwrap()
}

#[test]
fn composed_loss_ignores_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..50 {
        let (mode, kind) = if trial % 2 == 0 {
            (KernelMode::Isotropic, SimilarityKind::BhattacharyyaIsotropic)
        } else {
            (KernelMode::Anisotropic, SimilarityKind::BhattacharyyaDiagonal)
        };
        let n = rng.random_range(2..=8);
        let batch = random_batch(&mut rng, n, 4, 3, mode);
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.shuffle(&mut rng);
        let shuffled = BatchView::new(
            order.iter().map(|&i| batch.params[i].clone()).collect(),
            order.iter().map(|&i| batch.labels[i].clone()).collect(),
            order.iter().map(|&i| batch.features[i].clone()).collect(),
            Vec::new(),
        )
        .unwrap();
        let cfg = LossConfig {
            similarity: kind,
            ..LossConfig::default()
        };
        let a = total_loss(&batch, &cfg).unwrap();
        let b = total_loss(&shuffled, &cfg).unwrap();
        for (x, y) in [(a.total, b.total), (a.rec, b.rec), (a.asl, b.asl), (a.kmcl, b.kmcl)] {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}
