use embedding_audit::stats::stream_rng;
use embedding_audit::tsne::{
    affinities_from_points, embed_points, kl_divergence, kl_gradient, TsneConfig, TsneMode,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn clusters(k: usize, per: usize, d: usize, separation: f64, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = stream_rng(seed, 0);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            (0..d)
                .map(|j| if j == c % d { separation } else { 0.0 })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(k * per * d);
    let mut labels = Vec::new();
    for i in 0..k * per {
        let c = i % k;
        labels.push(c);
        for &m in &centers[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + z);
        }
    }
    (data, labels)
}

/// Lloyd's k-means with farthest-point seeding.
fn kmeans(points: &[[f64; 2]], k: usize) -> Vec<usize> {
    let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut centers = vec![points[0]];
    while centers.len() < k {
        let far = points
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let da = centers
                    .iter()
                    .map(|&c| dist(a, c))
                    .fold(f64::INFINITY, f64::min);
                let db = centers
                    .iter()
                    .map(|&c| dist(b, c))
                    .fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .unwrap();
        centers.push(far);
    }
    let mut assign = vec![0; points.len()];
    for _ in 0..100 {
        for (a, &p) in assign.iter_mut().zip(points) {
            *a = (0..k)
                .min_by(|&x, &y| dist(p, centers[x]).total_cmp(&dist(p, centers[y])))
                .unwrap();
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<_> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| *p)
                .collect();
            if !members.is_empty() {
                let m = members.len() as f64;
                *center = [
                    members.iter().map(|p| p[0]).sum::<f64>() / m,
                    members.iter().map(|p| p[1]).sum::<f64>() / m,
                ];
            }
        }
    }
    assign
}

fn purity(assign: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut total = 0;
    for c in 0..k {
        let mut counts = vec![0; k];
        for (a, &l) in assign.iter().zip(labels) {
            if *a == c {
                counts[l] += 1;
            }
        }
        total += counts.iter().max().unwrap();
    }
    total as f64 / labels.len() as f64
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = stream_rng(seed, 1);
        let data: Vec<f64> = (0..10 * 5).map(|_| rng.random::<f64>()).collect();
        let p = affinities_from_points(&data, 5, 3.0).unwrap();
        let y: Vec<[f64; 2]> = (0..10)
            .map(|_| [rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0])
            .collect();
        let g = kl_gradient(&p, &y, 1.0);
        let h = 1e-5;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..10 {
            for k in 0..2 {
                let mut plus = y.clone();
                let mut minus = y.clone();
                plus[i][k] += h;
                minus[i][k] -= h;
                let fd = (kl_divergence(&p, &plus) - kl_divergence(&p, &minus)) / (2.0 * h);
                diff2 += (fd - g[i][k]).powi(2);
                norm2 += fd * fd;
            }
        }
        let rel = (diff2 / norm2).sqrt();
        assert!(rel <= 1e-4, "seed {seed}: relative error {rel}");
    }
}

#[test]
fn three_clusters_are_recovered() {
    let (data, labels) = clusters(3, 100, 50, 10.0, 5);
    let cfg = TsneConfig {
        seed: 1,
        ..Default::default()
    };
    let e = embed_points(&data, 50, &cfg).unwrap();
    let p = purity(&kmeans(&e.coords, 3), &labels, 3);
    assert!(p >= 0.95, "purity {p}");

    let after: Vec<f64> = e
        .kl_trace
        .iter()
        .filter(|c| c.iteration > cfg.exaggeration_iterations)
        .map(|c| c.kl)
        .collect();
    for w in after.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "{:?}", e.kl_trace);
    }
    for c in &e.kl_trace {
        assert!(c.kl >= 0.0);
    }
    let mean = e
        .coords
        .iter()
        .fold([0.0; 2], |m, p| [m[0] + p[0], m[1] + p[1]]);
    assert!(mean[0].abs() < 1e-9 && mean[1].abs() < 1e-9);
}

#[test]
fn exact_mode_is_deterministic() {
    let (data, _) = clusters(3, 30, 10, 5.0, 9);
    let cfg = TsneConfig {
        perplexity: 10.0,
        iterations: 300,
        seed: 4,
        ..Default::default()
    };
    let a = embed_points(&data, 10, &cfg).unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap();
    let b = pool.install(|| embed_points(&data, 10, &cfg).unwrap());
    assert_eq!(a, b);
}

#[test]
#[ignore = "slow; covered by the acceptance suite"]
fn barnes_hut_tracks_exact() {
    let (data, _) = clusters(5, 400, 20, 6.0, 3);
    let base = TsneConfig {
        seed: 2,
        ..Default::default()
    };
    let t = std::time::Instant::now();
    let exact = embed_points(&data, 20, &base).unwrap();
    eprintln!("exact {:?}", t.elapsed());
    let t = std::time::Instant::now();
    let bh = embed_points(
        &data,
        20,
        &TsneConfig {
            mode: TsneMode::BarnesHut { theta: 0.5 },
            ..base
        },
    )
    .unwrap();
    eprintln!("bh {:?}", t.elapsed());
    let p = affinities_from_points(&data, 20, 30.0).unwrap();
    let (ke, kb) = (
        kl_divergence(&p, &exact.coords),
        kl_divergence(&p, &bh.coords),
    );
    eprintln!("exact {ke} bh {kb} trace {:?}", bh.kl_trace.last());
    assert!((kb - ke).abs() / ke <= 0.03);
}
