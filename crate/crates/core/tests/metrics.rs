use findnet::ctsim::{make_sample, CtSample, SampleConfig, SizeClass};
use findnet::metrics::{
    evaluate, mae, masked_mse, psnr, read_rows_csv, ssim, summarize, MetricRow, AVERAGE, PSNR_CAP,
};
use findnet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, n, n], |_| rng.random_range(0.0..1.0))
}

fn random_mask(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Tensor::from_fn(&[1, n, n], |_| if rng.random_bool(0.8) { 1.0 } else { 0.0 });
    m.data_mut()[0] = 1.0;
    m
}

fn split(count: u64) -> Vec<CtSample> {
    let cfg = SampleConfig::for_size(32);
    (0..count)
        .map(|i| make_sample(&format!("e{i}"), 40 + i, &cfg).unwrap().0)
        .collect()
}

fn row(id: &str, class: SizeClass, mae: f64, ssim: f64, psnr: f64) -> MetricRow {
    MetricRow {
        id: id.into(),
        size_class: class,
        mae,
        ssim,
        psnr,
    }
}

#[test]
fn oracle_prediction_is_perfect_in_every_group() {
    let samples = split(6);
    let report = evaluate(&samples, |s| Ok(s.x_gt.clone()), None).unwrap();
    for r in &report.rows {
        assert_eq!(r.mae, 0.0);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.psnr, PSNR_CAP);
    }
    for g in &report.summary {
        assert_eq!(g.mae, 0.0);
        assert!(g.mae_impr_pct.is_none());
    }
    assert!(report.group(AVERAGE).is_some());
}

#[test]
fn self_baseline_has_zero_improvement() {
    let samples = split(5);
    let li = evaluate(&samples, |s| Ok(s.x0.clone()), None).unwrap();
    let again = evaluate(&samples, |s| Ok(s.x0.clone()), Some(&li.rows)).unwrap();
    for g in &again.summary {
        assert_eq!(g.mae_impr_pct, Some(0.0));
        assert_eq!(g.ssim_impr_pct, Some(0.0));
        assert_eq!(g.psnr_impr_pct, Some(0.0));
    }
    // the peak is the largest masked ground-truth value
    let peak = samples
        .iter()
        .flat_map(|s| s.x_gt.data().iter().zip(s.mask.data()))
        .filter(|(_, m)| **m == 1.0)
        .map(|(v, _)| *v)
        .fold(f64::MIN, f64::max);
    assert_eq!(li.peak, peak);
}

#[test]
fn group_means_and_improvement_signs() {
    let rows = vec![
        row("a", SizeClass::Large, 0.3, 0.5, 20.0),
        row("b", SizeClass::Large, 0.1, 0.7, 30.0),
        row("c", SizeClass::Small, 0.2, 0.9, 40.0),
    ];
    let base = vec![
        row("a", SizeClass::Large, 0.4, 0.5, 20.0),
        row("b", SizeClass::Large, 0.4, 0.5, 20.0),
        row("c", SizeClass::Small, 0.1, 0.9, 40.0),
    ];
    let s = summarize(&rows, Some(&base));
    let names: Vec<&str> = s.iter().map(|r| r.group.as_str()).collect();
    assert_eq!(names, vec!["large", "small", AVERAGE]);
    assert!((s[0].mae - 0.2).abs() < 1e-12);
    assert!((s[0].ssim - 0.6).abs() < 1e-12);
    assert!((s[2].psnr - 30.0).abs() < 1e-12);
    assert!((s[0].mae_impr_pct.unwrap() - 50.0).abs() < 1e-12);
    assert!((s[0].ssim_impr_pct.unwrap() - 20.0).abs() < 1e-12);
    assert!((s[0].psnr_impr_pct.unwrap() - 25.0).abs() < 1e-12);
    assert!((s[1].mae_impr_pct.unwrap() + 100.0).abs() < 1e-12);
}

#[test]
fn csv_round_trip_and_headers() {
    let samples = split(3);
    let report = evaluate(&samples, |s| Ok(s.y.clone()), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (rp, sp) = (dir.path().join("r.csv"), dir.path().join("s.csv"));
    report.write(&rp, &sp).unwrap();
    let text = std::fs::read_to_string(&rp).unwrap();
    assert!(text.starts_with("id,size_class,mae,ssim,psnr\n"));
    let summary = std::fs::read_to_string(&sp).unwrap();
    assert!(summary.starts_with("group,mae,ssim,psnr,mae_impr_pct,ssim_impr_pct,psnr_impr_pct\n"));
    let back = read_rows_csv(&rp).unwrap();
    assert_eq!(back, report.rows);
}

#[test]
fn evaluation_errors() {
    let samples = split(2);
    assert!(evaluate(&[], |s: &CtSample| Ok(s.x0.clone()), None).is_err());
    let err = evaluate(&samples, |_| Ok(Tensor::zeros(&[1, 16, 16])), None).unwrap_err();
    assert!(err.to_string().contains("e0"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_ignore_masked_pixels(seed in 0u64..10_000, junk in -50.0f64..50.0) {
        let n = 16;
        let (x, y, m) = (random(n, seed), random(n, seed + 1), random_mask(n, seed + 2));
        let mut xp = x.clone();
        for (v, mm) in xp.data_mut().iter_mut().zip(m.data()) {
            if *mm == 0.0 {
                *v += junk;
            }
        }
        prop_assert_eq!(mae(&x, &y, &m).unwrap(), mae(&xp, &y, &m).unwrap());
        prop_assert_eq!(psnr(&x, &y, &m, 1.0).unwrap(), psnr(&xp, &y, &m, 1.0).unwrap());
        prop_assert_eq!(ssim(&x, &y, &m, 1.0).unwrap(), ssim(&xp, &y, &m, 1.0).unwrap());
    }

    #[test]
    fn mae_is_a_metric(seed in 0u64..10_000) {
        let n = 8;
        let (a, b, c) = (random(n, seed), random(n, seed + 1), random(n, seed + 2));
        let m = random_mask(n, seed + 3);
        let (ab, ba) = (mae(&a, &b, &m).unwrap(), mae(&b, &a, &m).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!(ab <= mae(&a, &c, &m).unwrap() + mae(&c, &b, &m).unwrap() + 1e-12);
        prop_assert_eq!(mae(&a, &a, &m).unwrap(), 0.0);
        prop_assert!(ab > 0.0);
    }

    #[test]
    fn psnr_decreases_with_error(seed in 0u64..10_000, s1 in 0.01f64..1.0, s2 in 0.01f64..1.0) {
        let n = 8;
        let (x, d) = (random(n, seed), random(n, seed + 1));
        let m = Tensor::ones(&[1, n, n]);
        let (lo, hi) = (s1.min(s2), s1.max(s2));
        let ya = x.add(&d.scale(lo)).unwrap();
        let yb = x.add(&d.scale(hi)).unwrap();
        prop_assert!(masked_mse(&x, &ya, &m).unwrap() <= masked_mse(&x, &yb, &m).unwrap());
        prop_assert!(psnr(&x, &ya, &m, 1.0).unwrap() >= psnr(&x, &yb, &m, 1.0).unwrap());
    }

    #[test]
    fn ssim_is_bounded(seed in 0u64..10_000) {
        let n = 12;
        let (x, y, m) = (random(n, seed), random(n, seed + 1), random_mask(n, seed + 2));
        let s = ssim(&x, &y, &m, 1.0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
