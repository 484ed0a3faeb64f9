use findnet::ctsim::corrupt::TRACE_TOL;
use findnet::ctsim::{
    corrupt_sinogram, fbp, li_complete, make_sample, make_sample_parts, radon, CorruptionConfig,
    MetalTrace, SampleConfig, Sinogram,
};
use findnet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, n], |_| rng.random_range(-1.0..1.0))
}

fn masked_mae(a: &Tensor, b: &Tensor, mask: &Tensor) -> f64 {
    let mut num = 0.0;
    for ((x, y), m) in a.data().iter().zip(b.data()).zip(mask.data()) {
        num += m * (x - y).abs();
    }
    num / mask.sum()
}

#[test]
fn radon_and_fbp_are_linear() {
    let (x, y) = (random_image(24, 1), random_image(24, 2));
    let (a, b) = (0.7, -1.3);
    let combo = x.scale(a).add(&y.scale(b)).unwrap();
    let (rx, ry, rc) = (
        radon(&x, 20, 36).unwrap(),
        radon(&y, 20, 36).unwrap(),
        radon(&combo, 20, 36).unwrap(),
    );
    let expect = rx.data.scale(a).add(&ry.data.scale(b)).unwrap();
    assert!(rc.data.max_abs_diff(&expect) < 1e-9);

    let (fx, fy) = (fbp(&rx, 24).unwrap(), fbp(&ry, 24).unwrap());
    let p = Sinogram::new(rx.data.scale(a).add(&ry.data.scale(b)).unwrap()).unwrap();
    let expect = fx.scale(a).add(&fy.scale(b)).unwrap();
    assert!(fbp(&p, 24).unwrap().max_abs_diff(&expect) < 1e-9);
}

#[test]
fn trace_covers_exactly_rays_through_metal() {
    let cfg = SampleConfig::for_size(32);
    let (_, _, parts) = make_sample_parts("t", 3, &cfg).unwrap();
    let g = cfg.geometry;
    let proj = radon(&parts.phantom.metal_mask(), g.n_angles, g.n_dets).unwrap();
    for (&t, &p) in parts.trace.mask.data().iter().zip(proj.data.data()) {
        assert_eq!(t == 1.0, p > TRACE_TOL);
    }
    assert!(!parts.trace.is_empty());
}

#[test]
fn li_is_idempotent_on_samples() {
    let cfg = SampleConfig::for_size(32);
    let (_, _, parts) = make_sample_parts("t", 8, &cfg).unwrap();
    let twice = li_complete(&parts.completed, &parts.trace).unwrap();
    assert_eq!(twice, parts.completed);
}

#[test]
fn corruption_produces_streaks() {
    let cfg = SampleConfig::for_size(64);
    let (sample, _, parts) = make_sample_parts("t", 21, &cfg).unwrap();
    let g = cfg.geometry;
    let px = g.pixel_size(64);
    let measured = Sinogram::new(
        radon(&parts.phantom.image, g.n_angles, g.n_dets)
            .unwrap()
            .data
            .scale(px),
    )
    .unwrap();
    let noise_only = CorruptionConfig {
        beta: 0.0,
        ..cfg.corruption
    };
    let seeded = || ChaCha8Rng::seed_from_u64(99);
    let hard = corrupt_sinogram(&measured, &parts.trace, &cfg.corruption, &mut seeded()).unwrap();
    let soft = corrupt_sinogram(&measured, &parts.trace, &noise_only, &mut seeded()).unwrap();
    let reference = fbp(&measured, 64).unwrap();
    let off_metal_max = |s: &Sinogram| {
        let r = fbp(s, 64).unwrap();
        r.data()
            .iter()
            .zip(reference.data())
            .zip(sample.mask.data())
            .filter(|(_, &m)| m == 1.0)
            .fold(0.0f64, |acc, ((a, b), _)| acc.max((a - b).abs() / px))
    };
    let (streak, noise) = (off_metal_max(&hard), off_metal_max(&soft));
    assert!(streak > 5.0 * noise, "streak {streak} vs noise {noise}");
}

#[test]
fn no_metal_samples_are_clean() {
    let mut cfg = SampleConfig::for_size(32);
    cfg.phantom.metal.count = 0;
    let (s, meta) = make_sample("n", 4, &cfg).unwrap();
    assert!(s.no_metal && meta.no_metal);
    assert!(s.mask.data().iter().all(|&v| v == 1.0));
    assert_eq!(s.x0, s.y);
    let mae = masked_mae(&s.y, &s.x_gt, &s.mask);
    assert!(mae < 0.01, "noise-only MAE {mae}");
}

#[test]
fn mask_complements_metal() {
    let cfg = SampleConfig::for_size(32);
    for seed in 0..4 {
        let (s, _, parts) = make_sample_parts("c", seed, &cfg).unwrap();
        let metal = parts.phantom.metal_mask();
        assert!(s
            .mask
            .data()
            .iter()
            .zip(metal.data())
            .all(|(i, m)| i * m == 0.0 && i + m == 1.0));
    }
}

#[test]
fn li_beats_raw_corruption_on_most_seeds() {
    let cfg = SampleConfig::for_size(64);
    let seeds = 20;
    let wins = (0..seeds)
        .filter(|&seed| {
            let (s, _) = make_sample("w", seed, &cfg).unwrap();
            masked_mae(&s.y, &s.x_gt, &s.mask) > masked_mae(&s.x0, &s.x_gt, &s.mask)
        })
        .count();
    assert!(
        wins * 10 >= seeds as usize * 8,
        "LI better on {wins}/{seeds}"
    );
}

#[test]
fn empty_trace_leaves_sinogram() {
    let s = radon(&random_image(16, 5), 8, 24).unwrap();
    assert_eq!(li_complete(&s, &MetalTrace::empty(8, 24)).unwrap(), s);
}

proptest! {
    #[test]
    fn li_idempotent_and_exact_on_linear_rows(
        slope in -3.0f64..3.0,
        offset in -5.0f64..5.0,
        runs in proptest::collection::vec((1usize..18, 1usize..4), 1..4),
    ) {
        let n = 24;
        let row: Vec<f64> = (0..n).map(|j| offset + slope * j as f64).collect();
        let mut trace = Tensor::zeros(&[1, n]);
        let mut dirty = row.clone();
        for (start, len) in runs {
            for j in start..(start + len).min(n - 1) {
                trace.data_mut()[j] = 1.0;
                dirty[j] = 100.0;
            }
        }
        let trace = MetalTrace { mask: trace };
        let s = Sinogram::new(Tensor::new(&[1, n], dirty).unwrap()).unwrap();
        let once = li_complete(&s, &trace).unwrap();
        let twice = li_complete(&once, &trace).unwrap();
        prop_assert_eq!(&once, &twice);
        for (a, b) in once.data.data().iter().zip(&row) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
