use invgrad::engines::{compute_in, fd_gradient, fd_gradient_with, phase1_forward, phase1_reverse, phase2};
use invgrad::layers::{CouplingLayer, Half, Head, Layer, Subnet, SubnetSpec};
use invgrad::metrics::{cosine, max_rel_err, rel_l2, EXACT_FLOOR, FD_FLOOR};
use invgrad::{compute, AllocTag, EngineOptions, Error, Ledger, Network, NetworkSpec, StrategyId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(blocks: Vec<usize>, channels: usize) -> NetworkSpec {
    NetworkSpec { input: [8, 8, channels], blocks, ..NetworkSpec::default() }
}

fn sample(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn run(s: StrategyId, net: &Network<f64>, x: &[f64]) -> invgrad::GradReport {
    compute(s, net, x, 1, &EngineOptions::default()).unwrap()
}

#[test]
fn exact_strategies_agree_with_backprop() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..4 {
        let blocks: Vec<usize> = (0..3).map(|_| rng.random_range(1..=3)).collect();
        let channels = [4, 8][rng.random_range(0..2)];
        let mut s = spec(blocks.clone(), channels);
        s.alternate_halves = seed % 2 == 1;
        let net = Network::<f64>::random(&s, seed).unwrap();
        let x = sample(net.input_len(), seed + 10);
        let oracle = run(StrategyId::Backprop, &net, &x);
        for strategy in [StrategyId::Forward, StrategyId::RevBackprop, StrategyId::Moonwalk, StrategyId::Mixed] {
            let r = run(strategy, &net, &x);
            assert_eq!(r.n_params(), net.n_params());
            let err = max_rel_err(&r.flat(), &oracle.flat(), EXACT_FLOOR);
            assert!(err <= 1e-8, "{strategy} blocks {blocks:?} c{channels}: {err:e}");
            assert!((r.loss - oracle.loss).abs() <= 1e-12 * oracle.loss.abs());
        }
    }
}

#[test]
fn exact_strategies_agree_with_tanh_and_leaky_activations() {
    for kind in [invgrad::layers::ActivationKind::Tanh, invgrad::layers::ActivationKind::leaky_relu()] {
        let s = NetworkSpec { activation: Some(kind), ..spec(vec![2, 1, 2], 4) };
        let net = Network::<f64>::random(&s, 3).unwrap();
        let x = sample(net.input_len(), 4);
        let oracle = run(StrategyId::Backprop, &net, &x);
        for strategy in [StrategyId::Forward, StrategyId::RevBackprop, StrategyId::Moonwalk, StrategyId::Mixed] {
            let err = max_rel_err(&run(strategy, &net, &x).flat(), &oracle.flat(), EXACT_FLOOR);
            assert!(err <= 1e-7, "{kind:?} {strategy}: {err:e}");
        }
    }
}

fn small_net(seed: u64) -> Network<f64> {
    let s = NetworkSpec {
        input: [4, 4, 2],
        blocks: vec![2, 2],
        subnet: SubnetSpec { depth: 2, hidden_width: 4 },
        ..NetworkSpec::default()
    };
    Network::random(&s, seed).unwrap()
}

#[test]
fn backprop_matches_central_differences() {
    let net = small_net(1);
    assert!(net.n_params() <= 500);
    let x = sample(net.input_len(), 2);
    let bp = run(StrategyId::Backprop, &net, &x);
    let fd = fd_gradient(&net, &x, 1, 1e-5).unwrap();
    let err = max_rel_err(&bp.flat(), &fd.flat(), FD_FLOOR);
    assert!(err <= 1e-5, "{err:e}");
}

#[test]
fn difference_error_shrinks_with_step() {
    let net = small_net(5);
    let x = sample(net.input_len(), 6);
    let bp = run(StrategyId::Backprop, &net, &x).flat();
    let coarse = rel_l2(&fd_gradient(&net, &x, 1, 1e-3).unwrap().flat(), &bp);
    let fine = rel_l2(&fd_gradient(&net, &x, 1, 1e-5).unwrap().flat(), &bp);
    assert!(fine < coarse, "{fine:e} vs {coarse:e}");
}

#[test]
fn kinks_are_flagged_only_where_a_gate_switches() {
    // Linear subnets have no gates.
    let linear = NetworkSpec { subnet: SubnetSpec { depth: 1, hidden_width: 1 }, ..spec(vec![1, 1], 4) };
    let net = Network::<f64>::random(&linear, 3).unwrap();
    let x = sample(net.input_len(), 4);
    assert!(fd_gradient(&net, &x, 0, 1e-1).unwrap().kinks.is_empty());

    // A wide step switches some gates; away from them the quotient is still accurate to O(eps^2).
    let net = small_net(7);
    let x = sample(net.input_len(), 8);
    let bp = run(StrategyId::Backprop, &net, &x).flat();
    let coarse = fd_gradient(&net, &x, 1, 2e-2).unwrap();
    assert!(!coarse.kinks.is_empty());
    assert!(coarse.kinks.windows(2).all(|w| w[0] < w[1]));
    let (a, b) = invgrad::metrics::without(&bp, &coarse.flat(), &coarse.kinks);
    let smooth = max_rel_err(&a, &b, FD_FLOOR);
    let all = max_rel_err(&bp, &coarse.flat(), FD_FLOOR);
    assert!(smooth < all && smooth < 1e-2, "{smooth:e} vs {all:e}");
    assert!(fd_gradient(&net, &x, 1, 1e-5).unwrap().kinks.is_empty());
}

#[test]
fn difference_step_must_be_positive() {
    let net = small_net(5);
    let x = sample(net.input_len(), 6);
    assert!(fd_gradient(&net, &x, 1, 0.0).is_err());
}

/// Trunk of zero-subnet couplings and no downsampling: the identity map.
fn identity_net() -> Network<f64> {
    let s = NetworkSpec { input: [2, 2, 4], blocks: vec![3], downsample: false, ..NetworkSpec::default() };
    let layers = (0..3)
        .map(|_| Layer::Coupling(CouplingLayer::new(4, Half::Low, Subnet::zeros(2, SubnetSpec::default())).unwrap()))
        .collect();
    let head = Head::random(4, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    Network::from_layers(s, layers, head).unwrap()
}

#[test]
fn identity_trunk_input_gradient_is_head_gradient() {
    let net = identity_net();
    let x = sample(net.input_len(), 1);
    let h0 = phase1_forward(&net, &x, 1, &EngineOptions::default()).unwrap();
    let ledger = Ledger::new();
    let xt = net.input_tensor(&ledger, &x).unwrap();
    let cache = net.head().cache(&xt, 1).unwrap();
    assert_eq!(h0, net.head().input_grad(&cache, &xt).unwrap().to_f64());
}

#[test]
fn input_gradient_phases_agree() {
    let net = Network::<f64>::random(&spec(vec![2, 2, 2], 4), 7).unwrap();
    let x = sample(net.input_len(), 8);
    let bp = run(StrategyId::Backprop, &net, &x);
    let want = bp.input_grad.clone().unwrap();
    let fwd = phase1_forward(&net, &x, 1, &EngineOptions::default()).unwrap();
    assert!(max_rel_err(&fwd, &want, EXACT_FLOOR) <= 1e-8);
    let chunked = phase1_forward(&net, &x, 1, &EngineOptions { phase1_chunk: 7, ..EngineOptions::default() }).unwrap();
    assert!(max_rel_err(&chunked, &fwd, EXACT_FLOOR) <= 1e-12);

    let rev = phase1_reverse(&net, &x, 1).unwrap();
    assert!(max_rel_err(&rev.h0, &fwd, EXACT_FLOOR) <= 1e-8);
    assert!(max_rel_err(&rev.head_grad, &bp.head_grad, EXACT_FLOOR) <= 1e-12);
    assert_eq!(rev.residual_theta_peak, 0);
    assert!(rev.peak_tracked_bytes < bp.peak_tracked_bytes);
}

#[test]
fn phase_two_streams_one_gradient_at_a_time() {
    let net = Network::<f64>::random(&spec(vec![3, 2, 1], 4), 9).unwrap();
    let x = sample(net.input_len(), 10);
    let bp = run(StrategyId::Backprop, &net, &x);
    let p2 = phase2(&net, &x, &bp.input_grad.clone().unwrap()).unwrap();
    assert_eq!(p2.max_live_trunk_grads, 1);
    for (i, (g, want)) in p2.layer_grads.iter().zip(&bp.layer_grads).enumerate() {
        assert_eq!(g.len(), want.len());
        if !g.is_empty() {
            assert!(max_rel_err(g, want, EXACT_FLOOR) <= 1e-8, "layer {i}");
        }
    }
    let ledger = Ledger::new();
    let xt = net.input_tensor(&ledger, &x).unwrap();
    let xl = net.forward(&xt).unwrap();
    let cache = net.head().cache(&xl, 1).unwrap();
    let hl = net.head().input_grad(&cache, &xl).unwrap().to_f64();
    assert!(max_rel_err(&p2.output_grad, &hl, EXACT_FLOOR) <= 1e-8);

    for strategy in [StrategyId::Moonwalk, StrategyId::Mixed] {
        assert_eq!(run(strategy, &net, &x).max_live_trunk_grads, Some(1));
    }
}

#[test]
fn memory_ordering_with_several_layers_per_block() {
    let s = NetworkSpec { subnet: SubnetSpec { depth: 3, hidden_width: 16 }, ..spec(vec![3, 3, 3], 4) };
    let net = Network::<f64>::random(&s, 11).unwrap();
    let x = sample(net.input_len(), 12);
    let peak = |s| run(s, &net, &x).peak_tracked_bytes;
    let (bp, mixed, moon) = (peak(StrategyId::Backprop), peak(StrategyId::Mixed), peak(StrategyId::Moonwalk));
    assert!(bp > mixed && mixed > moon, "{bp} {mixed} {moon}");
    for s in [StrategyId::Forward, StrategyId::RevBackprop, StrategyId::ProjForward] {
        assert!(peak(s) < mixed, "{s}");
    }
}

#[test]
fn reversible_backprop_without_activations_matches() {
    let net = Network::<f64>::random(&spec(vec![2, 3, 2], 8), 13).unwrap();
    let x = sample(net.input_len(), 14);
    let bp = run(StrategyId::Backprop, &net, &x);
    let rev = run(StrategyId::RevBackprop, &net, &x);
    assert!(max_rel_err(&rev.flat(), &bp.flat(), EXACT_FLOOR) <= 1e-6);
}

#[test]
fn saturated_tanh_halts_reversible_backprop() {
    let mut s = NetworkSpec { activation: Some(invgrad::layers::ActivationKind::Tanh), ..spec(vec![1, 1, 1], 4) };
    s.init.out_gain = 200.0;
    let net = Network::<f32>::random(&s, 0).unwrap();
    let x: Vec<f32> = sample(net.input_len(), 1).iter().map(|&v| v as f32).collect();
    let err = compute(StrategyId::RevBackprop, &net, &x, 0, &EngineOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Domain { .. }), "{err}");
}

#[test]
fn projected_forward_is_seeded_and_unbiased_only_on_average() {
    let net = small_net(15);
    let x = sample(net.input_len(), 16);
    let opts = EngineOptions { seed: 42, ..EngineOptions::default() };
    let a = compute(StrategyId::ProjForward, &net, &x, 1, &opts).unwrap();
    let b = compute(StrategyId::ProjForward, &net, &x, 1, &opts).unwrap();
    assert_eq!(a.flat(), b.flat());
    assert!(a.stochastic);
    assert_eq!(a.tangent_seed, Some(42));
    let c = compute(StrategyId::ProjForward, &net, &x, 1, &EngineOptions { seed: 43, ..opts }).unwrap();
    assert_ne!(a.flat(), c.flat());

    // One sample is a rank-one projection and should not look like the gradient.
    let bp = run(StrategyId::Backprop, &net, &x).flat();
    assert!(cosine(&a.flat(), &bp) < 0.9);

    let mut mean = vec![0.0; bp.len()];
    let n = 4000;
    for seed in 0..n {
        let r = compute(StrategyId::ProjForward, &net, &x, 1, &EngineOptions { seed, ..opts }).unwrap();
        for (m, v) in mean.iter_mut().zip(r.flat()) {
            *m += v / n as f64;
        }
    }
    assert!(cosine(&mean, &bp) > 0.95, "{}", cosine(&mean, &bp));
}

#[test]
fn budget_guard_refuses_expensive_runs() {
    let net = Network::<f64>::random(&spec(vec![2, 2, 2], 4), 17).unwrap();
    let x = sample(net.input_len(), 18);
    let tight = EngineOptions { flop_budget: Some(1e3), ..EngineOptions::default() };
    for s in [StrategyId::Forward, StrategyId::Moonwalk] {
        assert!(matches!(compute(s, &net, &x, 0, &tight), Err(Error::BudgetExceeded { .. })), "{s}");
    }
    for s in [StrategyId::Backprop, StrategyId::RevBackprop, StrategyId::Mixed, StrategyId::ProjForward] {
        assert!(compute(s, &net, &x, 0, &tight).is_ok(), "{s}");
    }
    assert!(matches!(fd_gradient_with(&net, &x, 0, 1e-5, Some(1e3)), Err(Error::BudgetExceeded { .. })));
}

#[test]
fn injected_vijp_fault_breaks_moonwalk_only() {
    let mut net = Network::<f64>::random(&spec(vec![2, 2, 2], 4), 19).unwrap();
    let x = sample(net.input_len(), 20);
    let clean = run(StrategyId::Backprop, &net, &x).flat();
    net.inject_fault(0).unwrap();
    assert!(net.inject_fault(2).is_err());
    assert_eq!(run(StrategyId::Backprop, &net, &x).flat(), clean);
    for s in [StrategyId::Moonwalk, StrategyId::Mixed] {
        assert!(max_rel_err(&run(s, &net, &x).flat(), &clean, EXACT_FLOOR) > 1e-3, "{s}");
    }
}

#[test]
fn every_strategy_releases_its_memory() {
    let net = Network::<f64>::random(&NetworkSpec { activation: Some(invgrad::layers::ActivationKind::Tanh), ..spec(vec![1, 2, 1], 4) }, 21).unwrap();
    let x = sample(net.input_len(), 22);
    for s in StrategyId::ALL {
        let ledger = Ledger::new();
        let mut seen = Vec::new();
        let mut sink = |layer: usize, g: &[f64]| seen.push((layer, g.len()));
        let r = compute_in(s, &net, &x, 1, &EngineOptions::default(), &ledger, Some(&mut sink)).unwrap();
        assert_eq!(ledger.tracked_live_bytes(), 0, "{s}");
        for tag in [AllocTag::Parameter, AllocTag::Gradient] {
            assert_eq!(ledger.live_bytes(tag), 0, "{s} {tag}");
        }
        assert_eq!(r.peak_tracked_bytes, ledger.peak_tracked_bytes());
        let mut layers: Vec<usize> = seen.iter().map(|p| p.0).collect();
        layers.sort_unstable();
        let want: Vec<usize> = (0..net.layers().len()).filter(|&i| net.layers()[i].n_params() > 0).collect();
        assert_eq!(layers, want, "{s}");
        for (layer, len) in seen {
            assert_eq!(len, net.layers()[layer].n_params());
        }
    }
}

#[test]
fn single_precision_agrees_loosely() {
    let net64 = Network::<f64>::random(&spec(vec![1, 1, 1], 4), 23).unwrap();
    let net32: Network<f32> = net64.cast();
    let x = sample(net64.input_len(), 24);
    let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let want = run(StrategyId::Backprop, &net64, &x).flat();
    for s in [StrategyId::Backprop, StrategyId::Moonwalk, StrategyId::Mixed, StrategyId::RevBackprop] {
        let r = compute(s, &net32, &x32, 1, &EngineOptions::default()).unwrap();
        assert!(rel_l2(&r.flat(), &want) <= 1e-4, "{s}");
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let net = small_net(25);
    let x = sample(net.input_len(), 26);
    let opts = EngineOptions::default();
    assert!(matches!(compute(StrategyId::Backprop, &net, &x[1..], 0, &opts), Err(Error::LengthMismatch { .. })));
    assert!(matches!(compute(StrategyId::Mixed, &net, &x, 2, &opts), Err(Error::Label { .. })));
}

#[test]
fn strategy_names_parse() {
    for s in StrategyId::ALL {
        assert_eq!(s.name().parse::<StrategyId>().unwrap(), s);
    }
    assert_eq!("proj-forward".parse::<StrategyId>().unwrap(), StrategyId::ProjForward);
    assert_eq!("rev_backprop".parse::<StrategyId>().unwrap(), StrategyId::RevBackprop);
    assert!("adjoint".parse::<StrategyId>().is_err());
}
