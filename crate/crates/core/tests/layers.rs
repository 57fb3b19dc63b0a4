use invgrad::layers::{
    ActivationKind, ActivationLayer, CouplingLayer, DownsampleLayer, Half, InitSpec, Keep, Layer, ParamTangent,
    ResidualTheta, ResidualX, Subnet, SubnetSpec,
};
use invgrad::metrics::{max_abs, rel_l2};
use invgrad::{AllocTag, Error, Ledger, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(ledger: &Ledger, shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(ledger, shape, data, AllocTag::Activation).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn coupling(channels: usize, half: Half, seed: u64) -> CouplingLayer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = InitSpec { out_gain: 1.0, ..InitSpec::default() };
    let subnet = Subnet::random(channels / 2, SubnetSpec { depth: 2, hidden_width: 4 }, &init, &mut rng);
    CouplingLayer::new(channels, half, subnet).unwrap()
}

/// `F(x_c) = x_c`: a single dense layer holding the identity matrix.
fn identity_coupling(channels: usize) -> CouplingLayer<f64> {
    let h = channels / 2;
    let mut subnet = Subnet::zeros(h, SubnetSpec { depth: 1, hidden_width: 1 });
    for i in 0..h {
        subnet.params_mut()[i * h + i] = 1.0;
    }
    CouplingLayer::new(channels, Half::Low, subnet).unwrap()
}

fn zero_coupling(channels: usize) -> CouplingLayer<f64> {
    CouplingLayer::new(channels, Half::Low, Subnet::zeros(channels / 2, SubnetSpec::default())).unwrap()
}

fn trunk_layers() -> Vec<(&'static str, Layer<f64>)> {
    vec![
        ("coupling-low", Layer::Coupling(coupling(4, Half::Low, 1))),
        ("coupling-high", Layer::Coupling(coupling(4, Half::High, 2))),
        ("tanh", Layer::Activation(ActivationLayer::new(ActivationKind::Tanh).unwrap())),
        ("leaky", Layer::Activation(ActivationLayer::new(ActivationKind::leaky_relu()).unwrap())),
        ("downsample", Layer::Downsample(DownsampleLayer)),
    ]
}

/// Column `k` of the input Jacobian is `jvp_input(e_k)`.
fn dense_jacobian(layer: &Layer<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            let u = tensor(x.ledger(), x.shape(), &e);
            layer.jvp_input(x, &u).unwrap().to_f64()
        })
        .collect()
}

/// `v J` with `J` stored column-wise.
fn row_times(v: &[f64], cols: &[Vec<f64>]) -> Vec<f64> {
    cols.iter().map(|c| c.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

#[test]
fn zero_subnet_coupling_is_identity() {
    let ledger = Ledger::new();
    let layer = Layer::Coupling(zero_coupling(4));
    let x = tensor(&ledger, &[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(layer.forward(&x).unwrap().to_f64(), vec![1.0, 2.0, 3.0, 4.0]);
    let u = tensor(&ledger, &[1, 1, 4], &[0.5, -1.0, 2.0, 0.25]);
    assert_eq!(layer.jvp_input(&x, &u).unwrap().to_f64(), u.to_f64());
    assert_eq!(layer.vijp_input(&x, &u).unwrap().to_f64(), u.to_f64());
    let (_, res) = layer.forward_residuals(&x, Keep::ALL).unwrap();
    assert_eq!(layer.vjp_input(res.x.as_ref().unwrap(), &u).unwrap().to_f64(), u.to_f64());
    let zero = tensor(&ledger, &[1, 1, 4], &[0.0; 4]);
    let g = layer.vjp_params(res.theta.as_ref().unwrap(), &zero).unwrap().unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_subnet_coupling_adds_conditioner() {
    let ledger = Ledger::new();
    let layer = Layer::Coupling(identity_coupling(4));
    let x = tensor(&ledger, &[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
    let y = layer.forward(&x).unwrap();
    assert_eq!(y.to_f64(), vec![1.0, 2.0, 4.0, 6.0]);
    assert_eq!(layer.inverse(&y).unwrap().to_f64(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn coupling_rejects_odd_channels_and_bad_shapes() {
    let subnet = Subnet::<f64>::zeros(1, SubnetSpec::default());
    assert!(matches!(CouplingLayer::new(3, Half::Low, subnet), Err(Error::InvalidSpec(_))));
    let ledger = Ledger::new();
    let layer = Layer::Coupling(zero_coupling(4));
    let x = tensor(&ledger, &[1, 1, 6], &[0.0; 6]);
    assert!(matches!(layer.forward(&x), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn downsample_reads_patches_row_major() {
    let ledger = Ledger::new();
    let d = DownsampleLayer;
    let x = tensor(&ledger, &[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
    let y = d.forward(&x, AllocTag::Activation).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4]);
    assert_eq!(y.to_f64(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn downsample_matches_enumerated_index_map() {
    let ledger = Ledger::new();
    let (h, w, c) = (4, 6, 3);
    let data: Vec<f64> = (0..h * w * c).map(|v| v as f64).collect();
    let x = tensor(&ledger, &[h, w, c], &data);
    let y = DownsampleLayer.forward(&x, AllocTag::Activation).unwrap();
    assert_eq!(y.shape(), &[h / 2, w / 2, 4 * c]);
    let yd = y.to_f64();
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let slot = (i % 2) * 2 + (j % 2);
                let out = ((i / 2) * (w / 2) + j / 2) * 4 * c + slot * c + k;
                assert_eq!(yd[out], data[(i * w + j) * c + k]);
            }
        }
    }
    let back = DownsampleLayer.inverse(&y, AllocTag::Activation).unwrap();
    assert_eq!(back.to_f64(), data);
}

#[test]
fn downsample_products_are_exact_rearrangements() {
    let ledger = Ledger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = Layer::<f64>::Downsample(DownsampleLayer);
    let x = tensor(&ledger, &[4, 4, 2], &random_vec(&mut rng, 32));
    let u = tensor(&ledger, &[4, 4, 2], &random_vec(&mut rng, 32));
    let v = tensor(&ledger, &[2, 2, 8], &random_vec(&mut rng, 32));
    assert_eq!(layer.jvp_input(&x, &u).unwrap().to_f64(), layer.forward(&u).unwrap().to_f64());
    assert_eq!(layer.vijp_input(&x, &u).unwrap().to_f64(), layer.forward(&u).unwrap().to_f64());
    let (_, res) = layer.forward_residuals(&x, Keep::X).unwrap();
    assert_eq!(layer.vjp_input(res.x.as_ref().unwrap(), &v).unwrap().to_f64(), layer.inverse(&v).unwrap().to_f64());
}

#[test]
fn downsample_rejects_odd_extent() {
    let ledger = Ledger::new();
    let x = tensor(&ledger, &[3, 2, 1], &[0.0; 6]);
    assert!(matches!(DownsampleLayer.forward(&x, AllocTag::Activation), Err(Error::InvalidShape { .. })));
}

#[test]
fn tanh_inverse_and_domain() {
    let ledger = Ledger::new();
    let tanh = ActivationLayer::new(ActivationKind::Tanh).unwrap();
    let zero = tensor(&ledger, &[1, 1, 1], &[0.0]);
    assert_eq!(tanh.inverse(&zero).unwrap().to_f64(), vec![0.0]);
    let one = tensor(&ledger, &[1, 1, 2], &[0.5, 1.0]);
    assert!(matches!(tanh.inverse(&one), Err(Error::Domain { .. })));
    let h = tensor(&ledger, &[1, 1, 2], &[0.3, -2.0]);
    let at_zero = tensor(&ledger, &[1, 1, 2], &[0.0, 0.0]);
    assert_eq!(tanh.vijp(&at_zero, &h).unwrap().to_f64(), h.to_f64());
}

#[test]
fn saturated_tanh_vijp_is_singular() {
    let ledger = Ledger::new();
    let layer = Layer::<f64>::Activation(ActivationLayer::new(ActivationKind::Tanh).unwrap());
    let x = tensor(&ledger, &[1, 1, 2], &[0.1, 400.0]);
    let h = tensor(&ledger, &[1, 1, 2], &[1.0, 1.0]);
    assert!(matches!(layer.vijp_input(&x, &h), Err(Error::Singular { .. })));
}

#[test]
fn leaky_relu_rejects_nonpositive_slope() {
    assert!(ActivationLayer::new(ActivationKind::LeakyRelu { alpha: 0.0 }).is_err());
    assert!(ActivationLayer::new(ActivationKind::LeakyRelu { alpha: -0.5 }).is_err());
}

#[test]
fn round_trip_every_layer_kind() {
    let ledger = Ledger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, layer) in trunk_layers() {
        for _ in 0..5 {
            let x = tensor(&ledger, &[4, 4, 4], &random_vec(&mut rng, 64));
            let back = layer.inverse(&layer.forward(&x).unwrap()).unwrap();
            let err = back.to_f64().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-10, "{name}: {err:e}");
        }
    }
}

#[test]
fn jvp_input_matches_central_difference() {
    let ledger = Ledger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let eps = 1e-6;
    for (name, layer) in trunk_layers() {
        let x = random_vec(&mut rng, 32);
        let u = random_vec(&mut rng, 32);
        let xt = tensor(&ledger, &[2, 4, 4], &x);
        let t = layer.jvp_input(&xt, &tensor(&ledger, &[2, 4, 4], &u)).unwrap().to_f64();
        let shift = |s: f64| {
            let p: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + s * b).collect();
            layer.forward(&tensor(&ledger, &[2, 4, 4], &p)).unwrap().to_f64()
        };
        let (fp, fm) = (shift(eps), shift(-eps));
        let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let err = rel_l2(&t, &fd);
        assert!(err <= 1e-7, "{name}: {err:e}");
    }
}

#[test]
fn vjp_input_matches_dense_jacobian() {
    let ledger = Ledger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (name, layer) in trunk_layers() {
        if matches!(layer, Layer::Downsample(_)) {
            continue;
        }
        let x = tensor(&ledger, &[1, 1, 4], &random_vec(&mut rng, 4));
        let jac = dense_jacobian(&layer, &x);
        let v = random_vec(&mut rng, 4);
        let (_, res) = layer.forward_residuals(&x, Keep::X).unwrap();
        let got = layer.vjp_input(res.x.as_ref().unwrap(), &tensor(&ledger, &[1, 1, 4], &v)).unwrap().to_f64();
        let err = rel_l2(&got, &row_times(&v, &jac));
        assert!(err <= 1e-10, "{name}: {err:e}");
    }
}

#[test]
fn vijp_inverts_the_dense_jacobian() {
    let ledger = Ledger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (name, layer) in trunk_layers() {
        if matches!(layer, Layer::Downsample(_)) {
            continue;
        }
        for _ in 0..4 {
            let x = tensor(&ledger, &[1, 1, 4], &random_vec(&mut rng, 4));
            let jac = dense_jacobian(&layer, &x);
            let h = random_vec(&mut rng, 4);
            let w = layer.vijp_input(&x, &tensor(&ledger, &[1, 1, 4], &h)).unwrap().to_f64();
            let err = rel_l2(&row_times(&w, &jac), &h);
            assert!(err <= 1e-10, "{name}: {err:e}");
        }
    }
}

#[test]
fn missing_residual_is_reported() {
    let ledger = Ledger::new();
    let layer = Layer::Coupling(coupling(4, Half::Low, 3));
    let v = tensor(&ledger, &[1, 1, 4], &[1.0; 4]);
    assert!(matches!(layer.vjp_input(&ResidualX::Nothing, &v), Err(Error::MissingResidual { .. })));
    assert!(matches!(layer.vjp_params(&ResidualTheta::Nothing, &v), Err(Error::MissingResidual { .. })));
}

fn param_jacobian(c: &CouplingLayer<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..c.n_params()).map(|i| c.jvp_params(x, ParamTangent::Basis(i)).unwrap().to_f64()).collect()
}

#[test]
fn jvp_params_zero_direction_and_parameter_free_layers() {
    let ledger = Ledger::new();
    let c = coupling(4, Half::Low, 4);
    let x = tensor(&ledger, &[2, 2, 4], &[0.3; 16]);
    let zero = vec![0.0; c.n_params()];
    assert!(c.jvp_params(&x, ParamTangent::Dense(&zero)).unwrap().data().iter().all(|&v| v == 0.0));
    let tanh = Layer::<f64>::Activation(ActivationLayer::new(ActivationKind::Tanh).unwrap());
    assert!(tanh.jvp_params(&x, ParamTangent::None).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(matches!(tanh.jvp_params(&x, ParamTangent::Dense(&[1.0])), Err(Error::LengthMismatch { .. })));
    assert!(matches!(c.jvp_params(&x, ParamTangent::Dense(&[1.0])), Err(Error::LengthMismatch { .. })));
}

#[test]
fn jvp_params_matches_single_weight_difference() {
    let ledger = Ledger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let c = coupling(4, Half::High, 5);
    let x = tensor(&ledger, &[2, 2, 4], &random_vec(&mut rng, 16));
    let eps = 1e-6;
    for i in 0..c.n_params() {
        let t = c.jvp_params(&x, ParamTangent::Basis(i)).unwrap().to_f64();
        let eval = |s: f64| {
            let mut p = c.clone();
            p.params_mut()[i] += s;
            p.forward(&x).unwrap().to_f64()
        };
        let (fp, fm) = (eval(eps), eval(-eps));
        let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        if max_abs(&fd) == 0.0 {
            assert_eq!(max_abs(&t), 0.0, "param {i}");
            continue;
        }
        let err = rel_l2(&t, &fd);
        assert!(err <= 1e-7, "param {i}: {err:e}");
    }
}

#[test]
fn vjp_params_matches_dense_parameter_jacobian() {
    let ledger = Ledger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let c = coupling(4, Half::Low, 6);
    assert!(c.n_params() <= 40);
    let layer = Layer::Coupling(c.clone());
    let x = tensor(&ledger, &[1, 1, 4], &random_vec(&mut rng, 4));
    let v = random_vec(&mut rng, 4);
    let (_, res) = layer.forward_residuals(&x, Keep::ALL).unwrap();
    let g = layer.vjp_params(res.theta.as_ref().unwrap(), &tensor(&ledger, &[1, 1, 4], &v)).unwrap().unwrap();
    let oracle = row_times(&v, &param_jacobian(&c, &x));
    let err = rel_l2(&g.to_f64(), &oracle);
    assert!(err <= 1e-10, "{err:e}");

    let zero = tensor(&ledger, &[1, 1, 4], &[0.0; 4]);
    let g0 = layer.vjp_params(res.theta.as_ref().unwrap(), &zero).unwrap().unwrap();
    assert!(g0.data().iter().all(|&v| v == 0.0));
}

#[test]
fn vjp_params_matches_surrogate_difference() {
    let ledger = Ledger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let c = coupling(4, Half::High, 7);
    let layer = Layer::Coupling(c.clone());
    let x = tensor(&ledger, &[2, 3, 4], &random_vec(&mut rng, 24));
    let v = random_vec(&mut rng, 24);
    let (_, res) = layer.forward_residuals(&x, Keep::ALL).unwrap();
    let g = layer.vjp_params(res.theta.as_ref().unwrap(), &tensor(&ledger, &[2, 3, 4], &v)).unwrap().unwrap().to_f64();
    let eps = 1e-6;
    let fd: Vec<f64> = (0..c.n_params())
        .map(|i| {
            let surrogate = |s: f64| {
                let mut p = c.clone();
                p.params_mut()[i] += s;
                p.forward(&x).unwrap().to_f64().iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
            };
            (surrogate(eps) - surrogate(-eps)) / (2.0 * eps)
        })
        .collect();
    let err = rel_l2(&g, &fd);
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn fused_steps_agree_with_separate_operators() {
    let ledger = Ledger::new();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for (name, layer) in trunk_layers() {
        let x = tensor(&ledger, &[2, 2, 4], &random_vec(&mut rng, 16));
        let h = tensor(&ledger, &[2, 2, 4], &random_vec(&mut rng, 16));
        let (y, hn, g) = layer.advance(&x, &h, true).unwrap();
        assert_eq!(y.to_f64(), layer.forward(&x).unwrap().to_f64(), "{name}");
        let hv = layer.vijp_input(&x, &h).unwrap();
        assert!(rel_l2(&hn.to_f64(), &hv.to_f64()) <= 1e-14, "{name}");
        let (_, res) = layer.forward_residuals(&x, Keep::ALL).unwrap();
        let gv = layer.vjp_params(res.theta.as_ref().unwrap(), &hv).unwrap();
        assert_eq!(g.is_some(), gv.is_some(), "{name}");
        if let (Some(a), Some(b)) = (g, gv) {
            assert!(rel_l2(&a.to_f64(), &b.to_f64()) <= 1e-12, "{name}");
        }

        let v = tensor(&ledger, y.shape(), &random_vec(&mut rng, 16));
        let (vx, vg) = layer.reverse_from_input(&x, &v).unwrap();
        let vx_ref = layer.vjp_input(res.x.as_ref().unwrap(), &v).unwrap();
        assert!(rel_l2(&vx.to_f64(), &vx_ref.to_f64()) <= 1e-14, "{name}");
        if let Some(a) = vg {
            let b = layer.vjp_params(res.theta.as_ref().unwrap(), &v).unwrap().unwrap();
            assert!(rel_l2(&a.to_f64(), &b.to_f64()) <= 1e-12, "{name}");
        }
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn vec16() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, 16)
    }

    fn pick(i: usize) -> Layer<f64> {
        trunk_layers().swap_remove(i).1
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn jvp_is_linear(i in 0usize..5, x in vec16(), u in vec16(), w in vec16(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let ledger = Ledger::new();
            let layer = pick(i);
            let shape = [2, 2, 4];
            let xt = tensor(&ledger, &shape, &x);
            let comb: Vec<f64> = u.iter().zip(&w).map(|(p, q)| a * p + b * q).collect();
            let lhs = layer.jvp_input(&xt, &tensor(&ledger, &shape, &comb)).unwrap().to_f64();
            let ju = layer.jvp_input(&xt, &tensor(&ledger, &shape, &u)).unwrap().to_f64();
            let jw = layer.jvp_input(&xt, &tensor(&ledger, &shape, &w)).unwrap().to_f64();
            let scale = 1.0 + max_abs(&ju) * a.abs() + max_abs(&jw) * b.abs();
            for k in 0..lhs.len() {
                prop_assert!((lhs[k] - (a * ju[k] + b * jw[k])).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn jvp_and_vjp_are_adjoint(i in 0usize..5, x in vec16(), u in vec16(), v in vec16()) {
            let ledger = Ledger::new();
            let layer = pick(i);
            let xt = tensor(&ledger, &[2, 2, 4], &x);
            let (y, res) = layer.forward_residuals(&xt, Keep::X).unwrap();
            let ju = layer.jvp_input(&xt, &tensor(&ledger, &[2, 2, 4], &u)).unwrap().to_f64();
            let vj = layer.vjp_input(res.x.as_ref().unwrap(), &tensor(&ledger, y.shape(), &v)).unwrap().to_f64();
            let lhs: f64 = v.iter().zip(&ju).map(|(a, b)| a * b).sum();
            let rhs: f64 = vj.iter().zip(&u).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        }

        #[test]
        fn inverse_undoes_forward(i in 0usize..5, x in vec16()) {
            let ledger = Ledger::new();
            let layer = pick(i);
            let xt = tensor(&ledger, &[2, 2, 4], &x);
            let back = layer.inverse(&layer.forward(&xt).unwrap()).unwrap().to_f64();
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}
