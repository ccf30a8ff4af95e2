use madiff_core::denoiser::{
    analytic_eps, log_density, train_tiny_denoiser, ConditionClass, Factorization,
    GaussianMixtureModel, NoisePredictor, TinyTrainConfig,
};
use madiff_core::diffusion::NoiseSchedule;
use madiff_core::prompt::PromptEmbedding;
use madiff_core::rng::{normals, rng_for};
use madiff_core::tensor::LatentImage;

fn random_image(seed: u64, label: &str, shape: (usize, usize, usize), scale: f64) -> LatentImage {
    let (c, h, w) = shape;
    let v = normals(&mut rng_for(seed, label), c * h * w);
    LatentImage::from_vec(c, h, w, v.into_iter().map(|x| x * scale).collect()).unwrap()
}

fn mixture(seed: u64, f: Factorization) -> GaussianMixtureModel {
    let shape = (3, 2, 2);
    let means: Vec<LatentImage> = (0..3)
        .map(|k| random_image(seed, &format!("mean{k}"), shape, 0.7))
        .collect();
    GaussianMixtureModel::new(vec![0.2, 0.5, 0.3], means, 0.3)
        .unwrap()
        .with_factorization(f)
        .with_class(ConditionClass {
            name: "a".into(),
            key: PromptEmbedding::new(vec![1.0, 0.0]).unwrap(),
            members: vec![(0, 1.0), (2, 3.0)],
        })
        .unwrap()
}

/// `-sqrt(1 - a) * d/dx log p` by central differences.
fn fd_eps(
    gmm: &GaussianMixtureModel,
    x: &LatentImage,
    a: f64,
    cond: Option<&PromptEmbedding>,
) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut p = x.as_slice().to_vec();
            let mut m = p.clone();
            p[i] += h;
            m[i] -= h;
            let lp = log_density(gmm, &x.with_data(p), a, cond).unwrap();
            let lm = log_density(gmm, &x.with_data(m), a, cond).unwrap();
            -(1.0 - a).sqrt() * (lp - lm) / (2.0 * h)
        })
        .collect()
}

#[test]
fn analytic_eps_matches_log_density_gradient() {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let key = PromptEmbedding::new(vec![0.9, 0.1]).unwrap();
    for f in [Factorization::Joint, Factorization::PerSite] {
        for seed in 0..5 {
            let gmm = mixture(seed, f);
            for t in [10, 300, 900] {
                let a = schedule.alpha_bar()[t];
                let x = random_image(seed, &format!("x{t}"), gmm.shape(), 1.0);
                for cond in [None, Some(&key)] {
                    let eps = analytic_eps(&gmm, &x, t, cond, &schedule).unwrap();
                    let fd = fd_eps(&gmm, &x, a, cond);
                    for (e, o) in eps.as_slice().iter().zip(&fd) {
                        let rel = (e - o).abs() / o.abs().max(1e-3);
                        assert!(rel <= 1e-5, "{f:?} seed {seed} t {t}: {e} vs {o}");
                    }
                }
            }
        }
    }
}

#[test]
fn joint_eps_matches_posterior_mean_formula() {
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
    let gmm = mixture(11, Factorization::Joint);
    let x = random_image(11, "x", gmm.shape(), 1.0);
    let t = 40;
    let a = schedule.alpha_bar()[t];
    let s2 = a * 0.3 * 0.3 + 1.0 - a;
    let logs: Vec<f64> = gmm
        .weights()
        .iter()
        .zip(gmm.means())
        .map(|(w, m)| {
            let d2: f64 = x
                .as_slice()
                .iter()
                .zip(m.as_slice())
                .map(|(xi, mi)| (xi - a.sqrt() * mi).powi(2))
                .sum();
            w.ln() - d2 / (2.0 * s2)
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = r.iter().sum();
    let expected: Vec<f64> = (0..x.len())
        .map(|i| {
            let mean: f64 = r
                .iter()
                .zip(gmm.means())
                .map(|(ri, m)| ri / z * m.as_slice()[i])
                .sum();
            (1.0 - a).sqrt() / s2 * (x.as_slice()[i] - a.sqrt() * mean)
        })
        .collect();
    let eps = analytic_eps(&gmm, &x, t, None, &schedule).unwrap();
    for (e, o) in eps.as_slice().iter().zip(&expected) {
        assert!((e - o).abs() <= 1e-12, "{e} vs {o}");
    }
}

#[test]
fn conditioned_samples_follow_class_weights() {
    let gmm = mixture(3, Factorization::Joint);
    let key = PromptEmbedding::new(vec![1.0, 0.0]).unwrap();
    let mut rng = rng_for(3, "mc");
    let n = 4000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let s = gmm.sample(&mut rng, Some(&key)).unwrap();
        let nearest = (0..3)
            .min_by(|&a, &b| {
                let da = s.sub(&gmm.means()[a]).norm();
                let db = s.sub(&gmm.means()[b]).norm();
                da.total_cmp(&db)
            })
            .unwrap();
        counts[nearest] += 1;
    }
    assert_eq!(counts[1], 0);
    let p = 0.75;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    let freq = counts[2] as f64 / n as f64;
    assert!((freq - p).abs() <= 4.0 * sd, "class frequency {freq}");
}

#[test]
fn tiny_denoiser_overfits_one_image() {
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let img = LatentImage::from_vec(
        1,
        4,
        4,
        (0..16).map(|i| ((i * 7) % 16) as f64 / 8.0 - 1.0).collect(),
    )
    .unwrap();
    let cfg = TinyTrainConfig {
        steps: 1500,
        batch_size: 8,
        lr: 3e-3,
        hidden: 16,
        t_min: 1,
        seed: 4,
    };
    let (model, report) =
        train_tiny_denoiser(&[(img.clone(), 0)], vec![], &schedule, &cfg).unwrap();
    let window = 100;
    let head: f64 = report.losses[..window].iter().sum::<f64>() / window as f64;
    let tail: f64 = report.losses[report.losses.len() - window..]
        .iter()
        .sum::<f64>()
        / window as f64;
    assert!(tail < 0.1 * head, "loss {head} -> {tail}");
    let out = model.predict(&img, 50, None).unwrap();
    assert_eq!(out.shape(), img.shape());
    assert!(out.is_finite());
}
