use findnet::model::FeResNet;
use findnet::numerics::gradcheck::DEFAULT_STEP;
use findnet::numerics::{grad_check, Mode, Tape, Var};
use findnet::params::{grad_check_module, seeded_rng, Forward, ParamBuilder, ParamStore};
use findnet::spectral::{
    frequency_grid, merge_branches, softplus_inv, split_branches, FourierUnit, GffcBlock,
    LocalFourierUnit, SpectralConfig,
};
use findnet::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ out ⊙ R` for a fixed random `R`.
fn project(f: &mut Forward<'_>, out: Var, seed: u64) -> Result<Var> {
    let r = random(f.value(out).shape(), seed);
    let w = f.tape.mul_const(out, &r)?;
    Ok(f.tape.sum(w))
}

fn set(store: &mut ParamStore, name: &str, value: f64) {
    let id = store
        .find(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    store
        .get_mut(id)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = value);
}

#[test]
fn fourier_unit_gradients() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(1);
    let fu = FourierUnit::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, 2, true);
    set(&mut store, "center", 0.3);
    set(&mut store, "sigma", softplus_inv(0.7));
    let x = random(&[2, 8, 8], 2);
    let report = grad_check_module(
        &store,
        &[x],
        Mode::Train,
        |f, v| {
            let y = fu.forward(f, v[0])?;
            project(f, y, 3)
        },
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    let err = report.max_rel_error;
    assert!(err < 1e-4, "FU max rel error {err}");
}

#[test]
fn local_fourier_unit_gradients() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(4);
    let lfu = LocalFourierUnit::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, true);
    set(&mut store, "center", 0.5);
    let x = random(&[2, 8, 8], 5);
    let report = grad_check_module(
        &store,
        &[x],
        Mode::Train,
        |f, v| {
            let y = lfu.forward(f, v[0])?;
            project(f, y, 6)
        },
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    let err = report.max_rel_error;
    assert!(err < 1e-4, "LFU max rel error {err}");
}

#[test]
fn gffc_block_gradients_across_alpha() {
    for (i, alpha) in [0.0, 0.5, 0.8].into_iter().enumerate() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(10 + i as u64);
        let block = GffcBlock::new(
            &mut ParamBuilder::new(&mut store, &mut rng),
            4,
            4,
            alpha,
            alpha,
            SpectralConfig::default(),
        )
        .unwrap();
        for e in store.entries().to_vec() {
            if e.name.ends_with("center") {
                set(&mut store, &e.name, 0.25);
            }
        }
        let (l, g) = (block.conv.local_in, block.conv.global_in);
        let x = random(&[4, 8, 8], 20 + i as u64);
        let report = grad_check_module(
            &store,
            &[x],
            Mode::Train,
            |f, v| {
                let br = split_branches(f, v[0], l, g)?;
                let y = block.forward(f, br)?;
                let y = merge_branches(f, y)?;
                project(f, y, 30)
            },
            DEFAULT_STEP,
            Some(40),
        )
        .unwrap();
        let err = report.max_rel_error;
        assert!(err < 1e-4, "GFFC α={alpha} max rel error {err}");
    }
}

#[test]
fn fe_resnet_gradients() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(7);
    let net = FeResNet::new(
        &mut ParamBuilder::new(&mut store, &mut rng),
        4,
        8,
        2,
        0.5,
        SpectralConfig::default(),
    )
    .unwrap();
    // a zero projection would hide every interior gradient
    let proj = net.project.kernels;
    let shape = store.get(proj).shape().to_vec();
    *store.get_mut(proj) = random(&shape, 8).scale(0.2);
    let x = random(&[1, 4, 8, 8], 9).into_shape(&[4, 8, 8]).unwrap();
    let report = grad_check_module(
        &store,
        &[x],
        Mode::Train,
        |f, v| {
            let y = net.forward(f, v[0])?;
            project(f, y, 10)
        },
        DEFAULT_STEP,
        Some(12),
    )
    .unwrap();
    let err = report.max_rel_error;
    assert!(err < 1e-4, "FE-ResNet max rel error {err}");
}

#[test]
fn wide_gaussian_matches_unfiltered_unit() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(11);
    let filtered = FourierUnit::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, 3, true);
    set(&mut store, "sigma", 1e6);
    let mut plain = filtered.clone();
    plain.use_gaussian = false;
    let x = random(&[3, 16, 16], 12);
    let run = |fu: &FourierUnit| {
        let mut f = Forward::new(&store, Mode::Train);
        let v = f.leaf(x.clone());
        let y = fu.forward(&mut f, v).unwrap();
        f.value(y).clone()
    };
    let diff = run(&filtered).max_abs_diff(&run(&plain));
    assert!(diff < 1e-6, "σ=1e6 disagreement {diff}");
}

#[test]
fn gain_increases_with_sigma() {
    let grid = frequency_grid(16, 16).unwrap();
    for center in [0.0, 0.4, 0.9] {
        let err = grad_check(
            |t: &mut Tape, s| {
                let c = t.leaf(Tensor::scalar(center));
                let g = t.gaussian_gain(&grid.distance, s, c, 1e-6)?;
                Ok(t.sum(g))
            },
            &Tensor::scalar(0.8),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "∂G/∂σ error {err}");

        let mut t = Tape::new();
        let s = t.leaf(Tensor::scalar(0.8));
        let c = t.leaf(Tensor::scalar(center));
        let g = t.gaussian_gain(&grid.distance, s, c, 1e-6).unwrap();
        let planes = grid.distance.len();
        for k in 0..planes {
            let mut seed = Tensor::zeros(&[planes]);
            seed.data_mut()[k] = 1.0;
            let flat = t.reshape(g, &[planes]).unwrap();
            let pick = t.mul_const(flat, &seed).unwrap();
            let one = t.sum(pick);
            let grads = t.backward(one).unwrap();
            assert!(grads.get(s).item() >= 0.0);
        }
    }
}

#[test]
fn identity_spectral_path_preserves_input() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(13);
    let fu = FourierUnit::new(&mut ParamBuilder::new(&mut store, &mut rng), 1, 1, false);
    // identity 1×1 conv over the stacked (re, im) channels
    let k = fu.conv.kernels;
    *store.get_mut(k) = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    set(&mut store, "bn.running_var", 1.0 - 1e-5);
    // δ + c has a real, positive spectrum, so the spectral ReLU keeps all of it
    let x = Tensor::from_fn(&[1, 8, 8], |i| if i == 0 { 1.5 } else { 0.25 });
    let mut f = Forward::new(&store, Mode::Infer);
    let v = f.leaf(x.clone());
    let y = fu.forward(&mut f, v).unwrap();
    assert!(f.value(y).max_abs_diff(&x) < 1e-12);
}

#[test]
fn alpha_zero_block_is_conv_bn_relu() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(14);
    let block = GffcBlock::new(
        &mut ParamBuilder::new(&mut store, &mut rng),
        3,
        5,
        0.0,
        0.0,
        SpectralConfig::default(),
    )
    .unwrap();
    assert!(block.conv.gg.is_none() && block.conv.lg.is_none());
    let x = random(&[3, 8, 8], 15);

    let mut f = Forward::new(&store, Mode::Train);
    let v = f.leaf(x.clone());
    let br = split_branches(&mut f, v, 3, 0).unwrap();
    let out = block.forward(&mut f, br).unwrap();
    let got = f.value(out.local).clone();

    let mut t = Tape::new();
    let xv = t.leaf(x);
    let w = t.leaf(store.get(block.conv.ll.kernels).clone());
    let scale = t.leaf(store.get(block.norm.local.scale).clone());
    let shift = t.leaf(store.get(block.norm.local.shift).clone());
    let c = t.conv2d(xv, w, 1).unwrap();
    let (b, _) = t.batch_norm_train(c, scale, shift).unwrap();
    let r = t.relu(b);
    assert_eq!(&got, t.value(r));
}
