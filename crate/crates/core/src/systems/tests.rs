use super::*;
use std::f64::consts::PI;

#[test]
fn lorenz_rhs_examples() {
    assert_eq!(lorenz_rhs(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
    let r = 72f64.sqrt();
    let eq = lorenz_rhs(&[r, r, 27.0]);
    assert!(eq.iter().all(|v| v.abs() < 1e-12), "{eq:?}");
    assert_eq!(lorenz_rhs(&[1.0, 0.0, 0.0]), vec![-10.0, 28.0, 0.0]);
}

#[test]
fn rk4_examples() {
    let x = rk4_step(|_| vec![0.0, 0.0], &[1.5, -2.0], 0.1);
    assert_eq!(x, vec![1.5, -2.0]);
    let e = rk4_step(|x| x.to_vec(), &[1.0], 0.01);
    assert!((e[0] - 0.01f64.exp()).abs() < 1e-10);
}

#[test]
fn rk4_local_error_is_fifth_order() {
    // Rotation field: compare one step with two half steps for two step sizes.
    let rhs = |x: &[f64]| vec![-x[1], x[0]];
    let gap = |dt: f64| {
        let full = rk4_step(rhs, &[1.0, 0.0], dt);
        let half = rk4_step(rhs, &rk4_step(rhs, &[1.0, 0.0], dt / 2.0), dt / 2.0);
        ((full[0] - half[0]).powi(2) + (full[1] - half[1]).powi(2)).sqrt()
    };
    let ratio = gap(0.2) / gap(0.1);
    assert!((ratio - 32.0).abs() < 3.0, "ratio {ratio}");
}

#[test]
fn pendulum_equilibria() {
    assert_eq!(pendulum_step([0.0, 0.0], 0.1), [0.0, 0.0]);
    let top = pendulum_step([PI, 0.0], 0.1);
    assert!(
        (top[0] - PI).abs() < 1e-12 && top[1].abs() < 1e-12,
        "{top:?}"
    );
}

#[test]
fn pendulum_conserves_energy() {
    for start in [[2.5, 0.7], [-1.0, -1.0], [3.0, 1.0]] {
        let e0 = pendulum_energy(start, PENDULUM_GRAVITY);
        let mut s = start;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            s = pendulum_step(s, 0.1);
            worst = worst.max((pendulum_energy(s, PENDULUM_GRAVITY) - e0).abs());
        }
        assert!(worst < 1e-6, "absolute drift {worst}");
        assert!(
            worst / e0.abs() < 1e-5,
            "relative drift {}",
            worst / e0.abs()
        );
    }
}

#[test]
fn render_hangs_down_at_zero() {
    let size = 24;
    let img = render_pendulum(0.0, size);
    let max = img.iter().cloned().fold(f64::MIN, f64::max);
    // The disc has a flat top, so check that both center columns reach the
    // maximum below the middle row.
    for c in [size / 2 - 1, size / 2] {
        let r = (0..size).position(|r| img[r * size + c] == max).unwrap();
        assert!(r > size / 2, "column {c}, row {r}");
    }
    assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn render_is_mirror_symmetric() {
    let size = 24;
    for theta in [0.3, 1.7, -2.9, 3.1] {
        let a = render_pendulum(theta, size);
        let b = render_pendulum(-theta, size);
        for r in 0..size {
            for c in 0..size {
                assert!((a[r * size + c] - b[r * size + size - 1 - c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn wrap_angle_range() {
    assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
    assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
    assert!((wrap_angle(0.5 + 4.0 * PI) - 0.5).abs() < 1e-12);
}

#[test]
fn lorenz_stays_on_attractor_box() {
    let cfg = LorenzConfig::default();
    for id in 0..4 {
        let mut rng = trajectory_rng(11, id);
        let mut s: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..=10.0)).collect();
        // Some starts overshoot z = 55 or begin with z < 0; the box holds once
        // the first second (200 steps) has passed.
        for step in 0..100_000 {
            s = rk4_step(lorenz_rhs, &s, cfg.dt);
            assert!(s.iter().all(|v| v.abs() < 100.0), "step {step}: {s:?}");
            if step >= 200 {
                assert!(
                    s[0].abs() <= 25.0 && s[1].abs() <= 35.0 && (0.0..=55.0).contains(&s[2]),
                    "step {step}: {s:?}"
                );
            }
        }
    }
}

#[test]
fn noiseless_measurements_equal_truth() {
    let cfg = SystemConfig::Lorenz(LorenzConfig {
        horizon: 50,
        noise_std: 0.0,
        ..LorenzConfig::default()
    });
    let ds = generate_dataset(&cfg, 3, 1);
    for j in 0..3 {
        assert_eq!(ds.trajectory(j), ds.ground_truth(j).unwrap());
    }
}

#[test]
fn lorenz_noise_statistics() {
    let cfg = SystemConfig::Lorenz(LorenzConfig {
        horizon: 10_000,
        ..LorenzConfig::default()
    });
    let ds = generate_dataset(&cfg, 10, 3);
    let mut noise = Vec::new();
    for j in 0..ds.len() {
        let eps: Vec<f64> = ds
            .trajectory(j)
            .iter()
            .zip(ds.ground_truth(j).unwrap())
            .map(|(y, g)| y - g)
            .collect();
        noise.push(eps);
    }
    let all: Vec<f64> = noise.concat();
    assert_eq!(all.len(), 100_000);
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / all.len() as f64;
    assert!((var.sqrt() - 2.5).abs() < 0.05 * 2.5, "std {}", var.sqrt());

    let mut num = 0.0;
    for eps in &noise {
        num += eps
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>();
    }
    let lag1 = num / (all.len() - noise.len()) as f64 / var;
    assert!(lag1.abs() < 0.02, "lag-1 autocorrelation {lag1}");
}

#[test]
fn generation_is_deterministic() {
    let cfg = SystemConfig::Pendulum(PendulumConfig {
        horizon: 20,
        ..PendulumConfig::default()
    });
    let a = generate_dataset(&cfg, 4, 9);
    let b = generate_dataset(&cfg, 4, 9);
    assert_eq!(a, b);
    assert_ne!(a, generate_dataset(&cfg, 4, 10));
    assert_eq!(a.measurement_dim(), 24 * 24);
    assert!(a.is_image());
    for j in 0..4 {
        assert!(a
            .ground_truth(j)
            .unwrap()
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn gaussian_sampler_moments() {
    let mut rng = trajectory_rng(5, 0);
    let mut s = GaussianSampler::new();
    let xs: Vec<f64> = (0..200_000).map(|_| s.sample(&mut rng)).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    assert!(
        mean.abs() < 0.01 && (var - 1.0).abs() < 0.01,
        "{mean} {var}"
    );
}

fn linear_dataset() -> TrajectoryDataset {
    let cfg = SystemConfig::Linear(LinearConfig::rotation(0.1, 30, 0.05));
    generate_dataset(&cfg, 5, 2)
}

#[test]
fn normalization_properties() {
    let ds = linear_dataset();
    let (norm, stats) = ds.normalize().unwrap();
    let post = norm.channel_stats().unwrap();
    for c in 0..2 {
        assert!(post.mean[c].abs() < 1e-10);
        assert!((post.std[c] - 1.0).abs() < 1e-10);
    }
    assert_eq!(norm.normalization(), Some(&stats));
    let back = norm.denormalize();
    for (a, b) in back.measurements().iter().zip(ds.measurements()) {
        assert!((a - b).abs() < 1e-12);
    }
    // Standardizing standardized data changes nothing.
    let raw_again =
        TrajectoryDataset::new(5, 30, 2, norm.measurements().to_vec(), None, 0.0, false).unwrap();
    let (twice, _) = raw_again.normalize().unwrap();
    for (a, b) in twice.measurements().iter().zip(norm.measurements()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn images_are_not_rescaled() {
    let cfg = SystemConfig::Pendulum(PendulumConfig {
        horizon: 5,
        ..PendulumConfig::default()
    });
    let ds = generate_dataset(&cfg, 2, 1);
    let (norm, stats) = ds.normalize().unwrap();
    assert_eq!(stats, NormStats::identity(576));
    assert_eq!(norm.measurements(), ds.measurements());
}

#[test]
fn zero_variance_channel_is_rejected() {
    let ds = TrajectoryDataset::new(
        1,
        3,
        2,
        vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0],
        None,
        0.0,
        false,
    )
    .unwrap();
    assert!(matches!(
        ds.normalize(),
        Err(DatasetError::ZeroVariance { channel: 0 })
    ));
}

#[test]
fn dataset_file_round_trip() {
    let ds = linear_dataset();
    let mut bytes = Vec::new();
    ds.write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"SSMT");
    let back = TrajectoryDataset::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, ds);
    let header = read_header(&mut bytes.as_slice()).unwrap();
    assert_eq!((header.len, header.horizon, header.dim), (5, 30, 2));
    assert!(header.has_truth && !header.is_image);
    assert_eq!(header.noise_std, 0.05);

    let (norm, _) = ds.normalize().unwrap();
    assert!(matches!(
        norm.write_to(&mut Vec::new()),
        Err(DatasetError::Normalized)
    ));
    bytes[0] = b'X';
    assert!(matches!(
        TrajectoryDataset::read_from(&mut bytes.as_slice()),
        Err(DatasetError::BadMagic)
    ));
}

#[test]
fn select_keeps_order() {
    let ds = linear_dataset();
    let sub = ds.select(&[3, 0]);
    assert_eq!(sub.len(), 2);
    assert_eq!(sub.trajectory(0), ds.trajectory(3));
    assert_eq!(sub.ground_truth(1), ds.ground_truth(0));
}
