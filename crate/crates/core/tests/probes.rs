use embedding_audit::dataset::{join, FeatureMatrix, MediaType, MetadataRecord};
use embedding_audit::probes::{
    fit_lda_binary, fit_least_squares, run_probe, ModelKind, ProbeConfig, TargetKind, TargetSpec,
    TrainSize,
};
use embedding_audit::stats::stream_rng;
use embedding_audit::synth::{generate, SynthSpec};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn yaw_spec(noise: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        n_identities: 50,
        items_per_identity: 100,
        dim: 64,
        identity_spread: 1.0,
        noise_sd: 1.0,
        pose_scale: 1.0,
        yaw_noise_deg: noise,
        invariant_identity_fraction: 0.0,
        seed,
        ..Default::default()
    }
}

fn fast_cfg(seed: u64) -> ProbeConfig {
    ProbeConfig {
        iterations: 20,
        train_size: TrainSize::Fraction(0.7346),
        seed,
        ..Default::default()
    }
}

#[test]
fn planted_yaw_reaches_noise_floor() {
    let spec = yaw_spec(5.0, 1);
    let (ds, truth) = generate(&spec).unwrap();
    let report = run_probe(
        &ds,
        &TargetSpec::new(TargetKind::YawAbsRegression),
        &fast_cfg(1),
    )
    .unwrap();
    let ratio = report.mean / truth.yaw_mae_floor;
    assert!(
        (ratio - 1.0).abs() <= 0.15,
        "mae {} floor {}",
        report.mean,
        truth.yaw_mae_floor
    );
    assert_eq!(report.iterations.len(), 20);
}

#[test]
fn noiseless_yaw_is_recovered_exactly() {
    let spec = SynthSpec {
        n_identities: 10,
        items_per_identity: 200,
        dim: 32,
        noise_sd: 0.0,
        yaw_noise_deg: 0.0,
        pose_scale: 1.0,
        invariant_identity_fraction: 0.0,
        seed: 2,
        ..Default::default()
    };
    let (ds, _) = generate(&spec).unwrap();
    let cfg = fast_cfg(2);
    let r = run_probe(&ds, &TargetSpec::new(TargetKind::YawAbsRegression), &cfg).unwrap();
    assert!(r.mean < 0.1, "{}", r.mean);
}

#[test]
fn noise_ladder_is_monotone() {
    let mut means = Vec::new();
    for noise in [1.0, 4.0, 8.0] {
        let mut total = 0.0;
        for seed in 0..20 {
            let spec = SynthSpec {
                n_identities: 20,
                items_per_identity: 50,
                dim: 16,
                ..yaw_spec(noise, seed)
            };
            let (ds, _) = generate(&spec).unwrap();
            let cfg = ProbeConfig {
                iterations: 5,
                ..fast_cfg(seed)
            };
            total += run_probe(&ds, &TargetSpec::new(TargetKind::YawAbsRegression), &cfg)
                .unwrap()
                .mean;
        }
        means.push(total / 20.0);
    }
    assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
}

fn labelled(x: Vec<Vec<f64>>, labels: &[f64]) -> embedding_audit::dataset::Dataset {
    let ids: Vec<String> = (0..x.len()).map(|i| format!("i{i}")).collect();
    let fm = FeatureMatrix::from_rows(ids.clone(), &x).unwrap();
    let recs: Vec<MetadataRecord> = ids
        .iter()
        .zip(labels)
        .map(|(id, &l)| MetadataRecord {
            item_id: id.clone(),
            subject_id: "s".into(),
            media_type: Some(if l == 1.0 {
                MediaType::Still
            } else {
                MediaType::VideoFrame
            }),
            yaw_deg: None,
            pitch_deg: None,
            roll_deg: None,
            template_id: None,
        })
        .collect();
    join(&fm, &recs, &[]).unwrap()
}

fn gaussian_pair(n: usize, d: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = stream_rng(seed, 0);
    let labels: Vec<f64> = (0..n)
        .map(|_| f64::from(u8::from(rng.random::<bool>())))
        .collect();
    let x = labels
        .iter()
        .map(|&l| {
            (0..d)
                .map(|j| gauss(&mut rng) + if j == 0 { sep * l } else { 0.0 })
                .collect()
        })
        .collect();
    (x, labels)
}

#[test]
fn random_labels_give_chance_accuracy() {
    let mut rng = stream_rng(77, 0);
    let x: Vec<Vec<f64>> = (0..10_000)
        .map(|_| (0..8).map(|_| gauss(&mut rng)).collect())
        .collect();
    let labels: Vec<f64> = (0..10_000)
        .map(|_| f64::from(u8::from(rng.random::<bool>())))
        .collect();
    let ds = labelled(x, &labels);
    for model in [ModelKind::LeastSquares, ModelKind::Lda] {
        let cfg = ProbeConfig {
            model,
            ..fast_cfg(3)
        };
        let r = run_probe(&ds, &TargetSpec::new(TargetKind::MediaTypeBinary), &cfg).unwrap();
        assert!((r.mean - 50.0).abs() <= 3.0, "{model:?}: {}", r.mean);
    }
}

#[test]
fn lda_reaches_bayes_accuracy() {
    let (x, y) = gaussian_pair(10_000, 1, 2.0, 5);
    let (xt, yt) = gaussian_pair(10_000, 1, 2.0, 6);
    let xm = DMatrix::from_fn(x.len(), 1, |i, j| x[i][j]);
    let model = fit_lda_binary(&xm, &y, 1e-3).unwrap();
    let correct = xt
        .iter()
        .zip(&yt)
        .filter(|(r, &l)| f64::from(u8::from(model.predict(r) >= 0.5)) == l)
        .count();
    let acc = correct as f64 / yt.len() as f64;
    // Phi(1)
    assert!((acc - 0.841_344_746).abs() <= 0.02, "{acc}");
}

#[test]
fn least_squares_and_lda_agree_on_gaussians() {
    let (x, y) = gaussian_pair(6000, 5, 1.5, 8);
    let ds = labelled(x, &y);
    let target = TargetSpec::new(TargetKind::MediaTypeBinary);
    let ls = run_probe(&ds, &target, &fast_cfg(4)).unwrap();
    let lda = run_probe(
        &ds,
        &target,
        &ProbeConfig {
            model: ModelKind::Lda,
            ..fast_cfg(4)
        },
    )
    .unwrap();
    assert!(
        (ls.mean - lda.mean).abs() <= 2.0,
        "{} vs {}",
        ls.mean,
        lda.mean
    );
}

#[test]
fn flipping_labels_keeps_accuracy() {
    let (x, y) = gaussian_pair(3000, 4, 1.0, 9);
    let flipped: Vec<f64> = y.iter().map(|l| 1.0 - l).collect();
    let target = TargetSpec::new(TargetKind::MediaTypeBinary);
    let a = run_probe(&labelled(x.clone(), &y), &target, &fast_cfg(5)).unwrap();
    let b = run_probe(&labelled(x, &flipped), &target, &fast_cfg(5)).unwrap();
    for (p, q) in a.iterations.iter().zip(&b.iterations) {
        assert!((p - q).abs() <= 1e-12);
    }
}

#[test]
fn permuting_feature_columns_keeps_metrics() {
    let (ds, _) = generate(&SynthSpec {
        n_identities: 20,
        items_per_identity: 60,
        dim: 12,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let fm = ds.features();
    let perm: Vec<usize> = (0..12).rev().collect();
    let rows: Vec<Vec<f64>> = (0..fm.rows())
        .map(|r| perm.iter().map(|&j| fm.value(r, j)).collect())
        .collect();
    let permuted = ds
        .with_features(FeatureMatrix::from_rows(fm.item_ids().to_vec(), &rows).unwrap())
        .unwrap();
    for kind in [TargetKind::YawAbsRegression, TargetKind::MediaTypeBinary] {
        let target = TargetSpec::new(kind);
        let a = run_probe(&ds, &target, &fast_cfg(6)).unwrap();
        let b = run_probe(&permuted, &target, &fast_cfg(6)).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-9, "{kind:?}");
    }
}

#[test]
fn train_accuracy_dominates_test_accuracy() {
    let (x, y) = gaussian_pair(400, 30, 4.0, 10);
    let r = run_probe(
        &labelled(x, &y),
        &TargetSpec::new(TargetKind::MediaTypeBinary),
        &fast_cfg(7),
    )
    .unwrap();
    let train = r.train_iterations.iter().sum::<f64>() / 20.0;
    assert!(train >= r.mean, "{train} < {}", r.mean);
}

#[test]
fn report_is_thread_count_independent() {
    let (ds, _) = generate(&SynthSpec {
        n_identities: 10,
        items_per_identity: 80,
        dim: 16,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let target = TargetSpec::new(TargetKind::YawAbsRegression);
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let four = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let a = one.install(|| run_probe(&ds, &target, &fast_cfg(8)).unwrap());
    let b = four.install(|| run_probe(&ds, &target, &fast_cfg(8)).unwrap());
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    let sd = embedding_audit::stats::sample_sd(&a.iterations);
    assert!((a.sd - sd).abs() < 1e-12);
}

#[test]
fn probe_errors_carry_context() {
    let (ds, _) = generate(&SynthSpec {
        n_identities: 2,
        items_per_identity: 5,
        dim: 4,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let cfg = ProbeConfig {
        train_size: TrainSize::Count(100),
        ..fast_cfg(0)
    };
    assert!(run_probe(&ds, &TargetSpec::new(TargetKind::YawAbsRegression), &cfg).is_err());
    let cfg = ProbeConfig {
        model: ModelKind::Lda,
        ..fast_cfg(0)
    };
    let err = run_probe(&ds, &TargetSpec::new(TargetKind::YawAbsRegression), &cfg).unwrap_err();
    assert!(err.to_string().starts_with("iteration 0"), "{err}");
}

#[test]
fn planted_least_squares_fit_is_unaffected_by_intercept() {
    let mut rng = stream_rng(12, 0);
    let x = DMatrix::from_fn(500, 3, |_, _| gauss(&mut rng));
    let y: Vec<f64> = x.row_iter().map(|r| 7.0 + 2.0 * r[0] - r[2]).collect();
    let m = fit_least_squares(&x, &y, 0.0).unwrap();
    assert!((m.intercept - 7.0).abs() < 1e-9);
    assert!((m.weights[0] - 2.0).abs() < 1e-9 && m.weights[1].abs() < 1e-9);
}
