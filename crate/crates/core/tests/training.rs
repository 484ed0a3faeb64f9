use findnet::ctsim::{make_sample, CtSample, SampleConfig, SizeClass};
use findnet::model::{FeResNet, FindNet, ModelConfig, SampleVars, StageTrace};
use findnet::numerics::gradcheck::DEFAULT_STEP;
use findnet::numerics::Mode;
use findnet::params::{grad_check_module, ParamStore};
use findnet::training::{
    adamw_step, fit, loss_and_grads, loss_on_tape, loss_total, lr_at, mean_loss, AdamConfig,
    EarlyStopping, FitOptions, LossWeights, OptimizerState, RunFiles, StepOutcome, TrainConfig,
};
use findnet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn random_sample(n: usize, seed: u64) -> CtSample {
    let mut mask = Tensor::ones(&[1, n, n]);
    for i in [n * n / 2 + n / 2, n * n / 2 + n / 2 + 1] {
        mask.data_mut()[i] = 0.0;
    }
    CtSample {
        id: format!("r{seed}"),
        y: random(&[1, n, n], seed, 1.0),
        x_gt: random(&[1, n, n], seed + 1, 1.0),
        mask,
        x0: random(&[1, n, n], seed + 2, 1.0),
        size_class: SizeClass::Small,
        no_metal: false,
    }
}

fn small(stages: usize) -> ModelConfig {
    ModelConfig {
        stages,
        n_kernels: 3,
        kernel_size: 3,
        blocks: 1,
        width: 4,
        ..ModelConfig::default()
    }
}

fn perturb_projections(net: &mut FindNet, seed: u64) {
    let mut nets: Vec<&FeResNet> = net.layout.m_init.iter().collect();
    for st in &net.layout.stages {
        nets.push(&st.mnet);
        nets.push(&st.xnet);
    }
    let ids: Vec<_> = nets.iter().map(|n| n.project.kernels).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = net.params.get(id).shape().to_vec();
        *net.params.get_mut(id) = random(&shape, seed + i as u64, 0.05);
    }
}

fn store_with(values: &[Tensor]) -> ParamStore {
    let mut store = ParamStore::new();
    for (i, v) in values.iter().enumerate() {
        store.add(
            format!("p{i}"),
            findnet::params::ParamKind::Learnable,
            v.clone(),
        );
    }
    store
}

fn ct_samples(n: usize, count: usize, seed: u64) -> Vec<CtSample> {
    let cfg = SampleConfig::for_size(n);
    (0..count as u64)
        .map(|i| make_sample(&format!("s{i}"), seed + i, &cfg).unwrap().0)
        .collect()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        model: small(2),
        epochs,
        ..TrainConfig::default()
    };
    cfg.optimizer.base_lr = 1e-3;
    cfg.schedule.warmup_steps = 2;
    cfg
}

#[test]
fn loss_on_tape_matches_value_and_vanishes_on_perfect_trace() {
    let net = {
        let mut n = FindNet::new(small(2)).unwrap();
        perturb_projections(&mut n, 1);
        n
    };
    let s = random_sample(8, 2);
    let w = LossWeights {
        omega: vec![0.3, 0.5, 1.0],
        gamma1: 0.2,
        gamma2: 0.7,
    };
    let (trace, _) = net.forward(&s, Mode::Train).unwrap();
    let value = loss_total(&trace, &s, &w).unwrap();
    let (tape_value, _, _) = loss_and_grads(&net, &s, &w).unwrap();
    assert!((value - tape_value).abs() <= 1e-12 * value.abs());
    assert!(value > 0.0);

    let perfect = StageTrace {
        x: vec![s.x_gt.clone(); 3],
        a: vec![s.y.sub(&s.x_gt).unwrap(); 2],
        m: vec![],
    };
    assert_eq!(loss_total(&perfect, &s, &w).unwrap(), 0.0);

    let mut masked = s.clone();
    masked.mask = Tensor::zeros(s.mask.shape());
    assert_eq!(loss_total(&trace, &masked, &w).unwrap(), 0.0);

    let short = LossWeights::for_stages(3);
    assert!(loss_total(&trace, &s, &short).is_err());
}

#[test]
fn loss_gradients_through_full_model() {
    let mut net = FindNet::new(ModelConfig {
        stages: 2,
        width: 8,
        ..ModelConfig::default()
    })
    .unwrap();
    perturb_projections(&mut net, 5);
    for e in net.params.entries().to_vec() {
        if e.name.ends_with("center") {
            let id = net.params.find(&e.name).unwrap();
            *net.params.get_mut(id) = Tensor::scalar(0.2);
        }
    }
    let s = random_sample(16, 6);
    let w = LossWeights::for_stages(2);
    let report = grad_check_module(
        &net.params,
        &[s.y.clone(), s.x_gt.clone()],
        Mode::Train,
        |f, v| {
            let sv = SampleVars {
                y: v[0],
                mask: f.leaf(s.mask.clone()),
                x0: f.leaf(s.x0.clone()),
                ones: f.leaf(Tensor::ones(s.y.shape())),
            };
            let vars = net.forward_bound(f, &sv)?;
            loss_on_tape(f, &vars, &sv, v[1], &w)
        },
        DEFAULT_STEP,
        Some(3),
    )
    .unwrap();
    let err = report.max_rel_error;
    assert!(err < 1e-4, "loss gradient error {err} at {}", report.worst);
}

#[test]
fn adamw_first_step_is_sign_like() {
    let p = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let g = Tensor::new(&[4], vec![0.3, -4.0, 1e-3, 0.0]).unwrap();
    let mut store = store_with(std::slice::from_ref(&p));
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut st = OptimizerState::new(&store, cfg);
    let lr = 1e-2;
    assert_eq!(
        adamw_step(&mut store, std::slice::from_ref(&g), &mut st, lr).unwrap(),
        StepOutcome::Applied
    );
    assert_eq!(st.step, 1);
    for ((after, before), g) in store.entries()[0]
        .value
        .data()
        .iter()
        .zip(p.data())
        .zip(g.data())
    {
        let expect = before - lr * g / (g.abs() + cfg.eps);
        assert!((after - expect).abs() < 1e-15, "{after} vs {expect}");
    }
}

#[test]
fn adamw_zero_gradient_cases() {
    let p = Tensor::new(&[3], vec![1.0, -2.0, 0.25]).unwrap();
    let zero = Tensor::zeros(&[3]);
    let lr = 0.1;

    let mut store = store_with(std::slice::from_ref(&p));
    let mut st = OptimizerState::new(
        &store,
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
    );
    adamw_step(&mut store, std::slice::from_ref(&zero), &mut st, lr).unwrap();
    assert_eq!(store.entries()[0].value, p);

    let mut store = store_with(std::slice::from_ref(&p));
    let mut st = OptimizerState::new(&store, AdamConfig::default());
    adamw_step(&mut store, std::slice::from_ref(&zero), &mut st, lr).unwrap();
    for (a, b) in store.entries()[0].value.data().iter().zip(p.data()) {
        assert!((a - b * (1.0 - lr * 1e-5)).abs() < 1e-16);
    }
}

#[test]
fn adamw_rejects_non_finite_and_respects_clamp_and_buffers() {
    let p = Tensor::new(&[2], vec![0.9, 0.1]).unwrap();
    let mut store = store_with(&[p.clone(), p.clone()]);
    let id = store.find("p0").unwrap();
    store.entry_mut(id).clamp = Some((0.0, 1.0));
    let buf = store.find("p1").unwrap();
    store.entry_mut(buf).kind = findnet::params::ParamKind::Buffer;
    let mut st = OptimizerState::new(&store, AdamConfig::default());

    let bad = vec![
        Tensor::new(&[2], vec![f64::NAN, 1.0]).unwrap(),
        Tensor::zeros(&[2]),
    ];
    assert_eq!(
        adamw_step(&mut store, &bad, &mut st, 0.5).unwrap(),
        StepOutcome::Rejected
    );
    assert_eq!(st.step, 0);
    assert_eq!(store.entries()[0].value, p);

    let push = vec![
        Tensor::new(&[2], vec![-1.0, 1.0]).unwrap(),
        Tensor::full(&[2], 5.0),
    ];
    adamw_step(&mut store, &push, &mut st, 0.5).unwrap();
    assert_eq!(store.entries()[0].value.data(), &[1.0, 0.0]);
    assert_eq!(store.entries()[1].value, p);
    assert!(adamw_step(&mut store, &push, &mut st, 0.0).is_err());
}

#[test]
fn omega_scaling_scales_loss_and_keeps_first_update() {
    let mut net = FindNet::new(small(2)).unwrap();
    perturb_projections(&mut net, 9);
    let s = random_sample(8, 10);
    let w = LossWeights::for_stages(2);
    let c = 7.5;
    let (l1, g1, _) = loss_and_grads(&net, &s, &w).unwrap();
    let (l2, g2, _) = loss_and_grads(&net, &s, &w.scaled(c)).unwrap();
    assert!((l2 - c * l1).abs() <= 1e-12 * l2);

    // ε → 0 isolates the m̂/√v̂ direction, which is what is scale invariant
    let cfg = AdamConfig {
        clip_norm: f64::INFINITY,
        eps: 1e-300,
        ..AdamConfig::default()
    };
    let step = |grads: &[Tensor]| {
        let mut store = net.params.clone();
        let mut st = OptimizerState::new(&store, cfg);
        adamw_step(&mut store, grads, &mut st, 1e-3).unwrap();
        store
    };
    let (a, b) = (step(&g1), step(&g2));
    for ((ea, eb), e0) in a
        .entries()
        .iter()
        .zip(b.entries())
        .zip(net.params.entries())
    {
        let da = ea.value.sub(&e0.value).unwrap();
        let db = eb.value.sub(&e0.value).unwrap();
        assert!(da.max_abs_diff(&db) <= 1e-15, "{}", ea.name);
    }
}

#[test]
fn fit_records_schedule_and_is_reproducible() {
    let train = ct_samples(32, 4, 100);
    let val = ct_samples(32, 2, 200);
    let cfg = tiny_config(3);
    let run = || {
        let mut net = FindNet::new(cfg.model.clone()).unwrap();
        let out = fit(&mut net, &train, &val, &cfg, &FitOptions::default()).unwrap();
        (net, out)
    };
    let (net, out) = run();
    let schedule = cfg.schedule_for(train.len()).unwrap();
    for rec in &out.steps {
        assert_eq!(
            rec.lr,
            lr_at(rec.step - 1, &schedule, cfg.optimizer.base_lr)
        );
    }
    for row in &out.history {
        assert_eq!(
            row.lr,
            lr_at(row.step - 1, &schedule, cfg.optimizer.base_lr)
        );
    }
    assert_eq!(out.rejected_steps, 0);
    // the returned model is the best-validation checkpoint
    let w = cfg.loss.weights(2).unwrap();
    assert_eq!(mean_loss(&net, &val, &w).unwrap(), out.best_val);

    let (net2, out2) = run();
    assert_eq!(out.history, out2.history);
    assert_eq!(net.params, net2.params);
}

#[test]
fn early_stopping_returns_best_epoch() {
    let train = ct_samples(32, 3, 300);
    let val = ct_samples(32, 2, 400);
    let mut cfg = tiny_config(6);
    cfg.early_stopping = EarlyStopping {
        patience: 1,
        min_delta: 0.0,
    };
    // a huge step size makes the validation loss wander
    cfg.optimizer.base_lr = 0.3;
    let mut net = FindNet::new(cfg.model.clone()).unwrap();
    let out = fit(&mut net, &train, &val, &cfg, &FitOptions::default()).unwrap();
    let vals: Vec<f64> = out.history.iter().map(|r| r.val_loss).collect();
    let first_bad = vals.windows(2).position(|w| w[1] >= w[0]).map(|i| i + 2);
    match first_bad {
        Some(epoch) => {
            assert!(out.stopped_early);
            assert_eq!(out.history.len(), epoch);
            assert_eq!(out.best_epoch, epoch - 1);
        }
        None => assert_eq!(out.history.len(), 6),
    }
    let w = cfg.loss.weights(2).unwrap();
    assert_eq!(mean_loss(&net, &val, &w).unwrap(), out.best_val);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let train = ct_samples(32, 3, 500);
    let val = ct_samples(32, 2, 600);
    let cfg = tiny_config(3);

    let full_dir = tempfile::tempdir().unwrap();
    let mut full = FindNet::new(cfg.model.clone()).unwrap();
    let opts = FitOptions {
        files: Some(RunFiles::new(full_dir.path())),
        ..FitOptions::default()
    };
    let whole = fit(&mut full, &train, &val, &cfg, &opts).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = FitOptions {
        files: Some(RunFiles::new(dir.path())),
        resume: true,
        epoch_limit: Some(1),
    };
    let mut part = FindNet::new(cfg.model.clone()).unwrap();
    let head = fit(&mut part, &train, &val, &cfg, &first).unwrap();
    assert_eq!(head.history.len(), 1);
    let mut rest = FindNet::new(cfg.model.clone()).unwrap();
    let tail = fit(
        &mut rest,
        &train,
        &val,
        &cfg,
        &FitOptions {
            epoch_limit: None,
            ..first
        },
    )
    .unwrap();
    assert_eq!(tail.history, whole.history);
    assert_eq!(tail.steps, whole.steps);
    assert_eq!(rest.params, full.params);
    let read = |d: &std::path::Path| std::fs::read(d.join("history.csv")).unwrap();
    assert_eq!(read(dir.path()), read(full_dir.path()));
    let header = String::from_utf8(read(dir.path())).unwrap();
    assert!(header.starts_with("epoch,step,train_loss,val_loss,lr\n"));
    assert!(dir.path().join("best.fnt").exists() && dir.path().join("last.json").exists());
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = tiny_config(4);
    let text = serde_json::to_string(&cfg).unwrap();
    let back: TrainConfig = findnet::config::from_json(text.as_bytes()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(serde_json::to_string(&back).unwrap(), text);
    match findnet::config::from_json::<TrainConfig>(br#"{"optimizer": {"lr": 1.0}}"#) {
        Err(findnet::Error::Config { key, .. }) => assert_eq!(key, "optimizer.lr"),
        other => panic!("{other:?}"),
    }
    let bad = TrainConfig {
        loss: findnet::training::LossConfig {
            omega: Some(vec![1.0]),
            ..Default::default()
        },
        ..cfg
    };
    match bad.validate() {
        Err(findnet::Error::Config { key, .. }) => assert_eq!(key, "loss.omega"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lr_stays_within_bounds(
        warmup in 0u64..50,
        extra in 1u64..500,
        floor in 0.0f64..1.0,
        step in 0u64..1000,
    ) {
        let cfg = findnet::training::ScheduleConfig {
            warmup_steps: warmup,
            total_steps: warmup + extra,
            min_lr_fraction: floor,
        };
        let lr = lr_at(step, &cfg, 2.0);
        prop_assert!(lr <= 2.0 + 1e-15);
        if step >= warmup {
            prop_assert!(lr >= 2.0 * floor - 1e-15);
            prop_assert!(lr_at(step + 1, &cfg, 2.0) <= lr + 1e-15);
        }
    }

    #[test]
    fn loss_is_non_negative(seed in 0u64..1000, g1 in 0.0f64..2.0, g2 in 0.0f64..2.0) {
        let s = random_sample(4, seed);
        let trace = StageTrace {
            x: vec![random(&[1, 4, 4], seed + 7, 1.0), random(&[1, 4, 4], seed + 8, 1.0)],
            a: vec![random(&[1, 4, 4], seed + 9, 1.0)],
            m: vec![],
        };
        let w = LossWeights { omega: vec![0.5, 1.0], gamma1: g1, gamma2: g2 };
        prop_assert!(loss_total(&trace, &s, &w).unwrap() >= 0.0);
    }
}
