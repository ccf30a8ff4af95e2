use madiff_core::denoiser::{ConditionClass, GaussianMixtureModel, GmmPredictor, NoisePredictor};
use madiff_core::diffusion::{
    ddim_invert_update, invert, invert_step, roundtrip_error, sample, sample_step, NoiseSchedule,
};
use madiff_core::eval::{roundtrip_fixture, roundtrip_study};
use madiff_core::prompt::PromptEmbedding;
use madiff_core::rng::{normals, rng_for};
use madiff_core::tensor::LatentImage;
use madiff_core::Result;
use proptest::prelude::*;

struct ConstEps(f64);

impl NoisePredictor for ConstEps {
    fn predict(
        &self,
        x: &LatentImage,
        _t: usize,
        _c: Option<&PromptEmbedding>,
    ) -> Result<LatentImage> {
        Ok(x.map(|_| self.0))
    }
}

fn image(seed: u64, label: &str, shape: (usize, usize, usize)) -> LatentImage {
    let (c, h, w) = shape;
    LatentImage::from_vec(c, h, w, normals(&mut rng_for(seed, label), c * h * w)).unwrap()
}

#[test]
fn inversion_matches_fine_step_reference() {
    let (gmm, images) = roundtrip_fixture(4, 2, 0.05).unwrap();
    let coarse = NoiseSchedule::linear(1000, 1e-4, 0.02)
        .unwrap()
        .with_inversion(500, 50)
        .unwrap();
    let fine = NoiseSchedule::linear(1000, 1e-4, 0.02)
        .unwrap()
        .with_inversion(500, 5)
        .unwrap();
    let pc = GmmPredictor::new(gmm.clone(), coarse.clone());
    let pf = GmmPredictor::new(gmm, fine.clone());
    for x0 in &images {
        let a = invert(x0, &pc, &coarse).unwrap();
        let mut x = x0.clone();
        for i in 0..fine.inversion_steps() {
            let eps = pf.predict(&x, fine.timestep(i), None).unwrap();
            x = ddim_invert_update(&x, &eps, fine.alpha_at(i), fine.alpha_at(i + 1)).unwrap();
        }
        let rel = a.noise_map().sub(&x).norm() / x.norm();
        assert!(rel < 0.02, "coarse vs fine relative difference {rel}");
    }
}

#[test]
fn conditioned_sampling_lands_near_class_mean() {
    let shape = (3, 4, 4);
    let means: Vec<LatentImage> = (0..3).map(|k| image(0, &format!("m{k}"), shape)).collect();
    let key = PromptEmbedding::new(vec![0.0, 1.0]).unwrap();
    let gmm = GaussianMixtureModel::uniform(means.clone(), 0.05)
        .unwrap()
        .with_class(ConditionClass {
            name: "c".into(),
            key: key.clone(),
            members: vec![(1, 1.0)],
        })
        .unwrap();
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)
        .unwrap()
        .with_inversion(200, 20)
        .unwrap();
    let pred = GmmPredictor::new(gmm, schedule.clone());
    let s = schedule.inversion_steps();
    let sa = schedule.alpha_at(s).sqrt();
    let mut hits = 0;
    for seed in 0..100 {
        let x_t = image(seed, "x_T", shape);
        let (x_s, maps) = sample(
            &x_t,
            schedule.effective_steps(),
            s,
            Some(&key),
            &pred,
            None,
            &schedule,
        )
        .unwrap();
        assert!(maps.is_empty());
        let d: Vec<f64> = means.iter().map(|m| x_s.sub(&m.scale(sa)).norm()).collect();
        if d[1] < d[0] && d[1] < d[2] {
            hits += 1;
        }
    }
    assert!(hits >= 90, "{hits}/100 runs nearest to the class mean");
}

#[test]
fn roundtrip_error_shrinks_with_more_steps() {
    let (gmm, images) = roundtrip_fixture(6, 9, 0.05).unwrap();
    let errs: Vec<f64> = [10, 25, 50, 100]
        .iter()
        .map(|&n| {
            roundtrip_study(&gmm, &images, 1000, n, (1e-4, 0.02))
                .unwrap()
                .mean_error
        })
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{errs:?}");
    }
    assert!(errs[3] < errs[0], "{errs:?}");
}

#[test]
fn roundtrip_error_is_relative_l2() {
    let schedule = NoiseSchedule::linear(10, 1e-3, 0.1)
        .unwrap()
        .with_inversion(10, 1)
        .unwrap();
    let x = image(1, "x", (1, 2, 2));
    let e = roundtrip_error(&x, &ConstEps(0.3), &schedule).unwrap();
    assert!(e < 1e-12, "{e}");
    assert!(roundtrip_error(&x.map(|_| 0.0), &ConstEps(0.3), &schedule).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invert_then_sample_step_is_identity_for_constant_eps(
        seed in 0u64..1000,
        c in -2.0f64..2.0,
        i in 0usize..49,
    ) {
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.05).unwrap().with_inversion(100, 2).unwrap();
        let x = image(seed, "x", (2, 3, 3));
        let p = ConstEps(c);
        let up = invert_step(&x, i, &p, &schedule).unwrap();
        let back = sample_step(&up, i + 1, None, &p, &schedule).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn linear_schedules_decrease_strictly(
        t in 1usize..2000,
        lo in 1e-5f64..0.05,
        span in 0.0f64..0.3,
    ) {
        let hi = (lo + span).min(0.5);
        let s = NoiseSchedule::linear(t, lo, hi).unwrap();
        let a = s.alpha_bar();
        prop_assert_eq!(a.len(), t + 1);
        prop_assert_eq!(a[0], 1.0);
        prop_assert!(a.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    }
}
