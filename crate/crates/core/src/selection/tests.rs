use super::*;
use crate::data::{make_synthetic_images, Split};
use crate::nn::{build_arch, Activation, Conv2d, Linear};

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn plain(net: &Network, x: &Tensor) -> Tensor {
    net.predict(x).unwrap()
}

fn mixed_logits(net: &Network, state: &SelectionState, real: &Tensor, control: Option<&Tensor>) -> Tensor {
    let mut tape = Tape::new();
    let f = selection_forward(&mut tape, net, state, real, control, None, false).unwrap();
    tape.value(f.logits).clone()
}

fn toy_net(weights: [f64; 4]) -> Network {
    Network::new(
        vec![2, 1, 1],
        1,
        vec![
            Layer::Conv(Conv2d {
                weight: Tensor::new(vec![2, 2, 1, 1], weights.to_vec()).unwrap(),
                bias: None,
                stride: 1,
                padding: 0,
            }),
            Layer::Activation(Activation::Relu),
            Layer::Flatten,
            Layer::Linear(Linear {
                weight: Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap(),
                bias: None,
            }),
        ],
    )
    .unwrap()
}

#[test]
fn saturated_beta_recovers_plain_forward() {
    let net = build_arch("small-cnn", &[1, 10, 10], 10, &mut stream(0, "init")).unwrap();
    let x = Tensor::randn(&[3, 1, 10, 10], 1.0, &mut stream(1, "x"));
    let c = Tensor::randn(&[3, 1, 10, 10], 1.0, &mut stream(2, "c"));
    let mut state = SelectionState::init(&net).unwrap();
    for l in &mut state.layers {
        l.theta.fill(60.0);
    }
    let diff = mixed_logits(&net, &state, &x, Some(&c)).max_abs_diff(&plain(&net, &x));
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn identical_control_is_invisible_for_any_beta() {
    let net = build_arch("resnet-tiny", &[3, 8, 8], 10, &mut stream(0, "init")).unwrap();
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut stream(1, "x"));
    let mut state = SelectionState::init(&net).unwrap();
    let mut rng = stream(3, "theta");
    for l in &mut state.layers {
        for t in &mut l.theta {
            *t = rng.random_range(-4.0..4.0);
        }
    }
    let diff = mixed_logits(&net, &state, &x, Some(&x)).max_abs_diff(&plain(&net, &x));
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn hand_computed_mixing() {
    let net = toy_net([1.0, 0.0, 0.0, 1.0]);
    let real = Tensor::new(vec![1, 2, 1, 1], vec![2.0, 3.0]).unwrap();
    let ctl = Tensor::new(vec![1, 2, 1, 1], vec![10.0, 20.0]).unwrap();
    let mut state = SelectionState::init(&net).unwrap();
    state.layers[0].theta = vec![logit(0.3), logit(0.7)];
    let mut tape = Tape::new();
    let f = selection_forward(&mut tape, &net, &state, &real, Some(&ctl), None, false).unwrap();
    let m = tape.value(f.mixed[0]).data().to_vec();
    assert!((m[0] - (0.3 * 2.0 + 0.7 * 10.0)).abs() < 1e-12);
    assert!((m[1] - (0.7 * 3.0 + 0.3 * 20.0)).abs() < 1e-12);
}

#[test]
fn no_control_scales_by_beta() {
    let net = toy_net([1.0, 0.0, 0.0, 1.0]);
    let real = Tensor::new(vec![1, 2, 1, 1], vec![2.0, 3.0]).unwrap();
    let mut state = SelectionState::init(&net).unwrap();
    state.layers[0].theta = vec![logit(0.25), logit(0.5)];
    let mut tape = Tape::new();
    let f = selection_forward(&mut tape, &net, &state, &real, None, None, false).unwrap();
    let m = tape.value(f.mixed[0]).data();
    assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 1.5).abs() < 1e-12);
}

#[test]
fn gradients_reach_theta_only_through_mixing() {
    // zero real stream: loss = sum_j v_j (1 - β_j) relu(ã_j), so dL/dθ_j has sign -v_j
    let net = toy_net([1.0, 0.0, 0.0, 1.0]);
    let real = Tensor::zeros(&[4, 2, 1, 1]);
    let ctl = Tensor::full(&[4, 2, 1, 1], 1.5);
    let state = SelectionState::init(&net).unwrap();
    for detach in [false, true] {
        let mut tape = Tape::new();
        let f = selection_forward(&mut tape, &net, &state, &real, Some(&ctl), None, detach).unwrap();
        let loss = tape.sum(f.logits);
        let g = tape.backward(loss).unwrap();
        let gt = g.wrt(f.theta_nodes[0], &[2]);
        assert!(gt.data()[0] < 0.0 && gt.data()[1] > 0.0, "{:?}", gt.data());
        // only theta is a parameter on this tape
        assert_eq!(g.params().count(), 1);
    }
}

#[test]
fn mismatched_streams_are_rejected() {
    let net = toy_net([1.0, 0.0, 0.0, 1.0]);
    let state = SelectionState::init(&net).unwrap();
    let mut tape = Tape::new();
    let err = selection_forward(
        &mut tape,
        &net,
        &state,
        &Tensor::zeros(&[2, 2, 1, 1]),
        Some(&Tensor::zeros(&[3, 2, 1, 1])),
        None,
        false,
    )
    .unwrap_err();
    assert!(err.to_string().contains("control batch"), "{err}");
}

fn small_setup() -> (Network, Dataset) {
    let ds = make_synthetic_images(1, 64, [1, 6, 6], 3, 0.2, Split::Train).unwrap();
    let net = build_arch("small-cnn", &[1, 6, 6], 3, &mut stream(0, "init")).unwrap();
    (net, ds)
}

#[test]
fn zero_epochs_keep_half() {
    let (net, ds) = small_setup();
    let source = ControlSource::new(ControlMode::Noise, &ds, None).unwrap();
    let config = SelectionConfig {
        epochs: 0,
        ..Default::default()
    };
    let (state, report) = optimize_scaling(&net, SelectionState::init(&net).unwrap(), &source, &config).unwrap();
    assert_eq!(report.steps, 0);
    for l in &state.layers {
        assert!(l.beta().iter().all(|&b| b == 0.5));
    }
}

#[test]
fn optimization_is_deterministic_and_constrained() {
    let (net, ds) = small_setup();
    let knock = ds.images.map(|v| 1.0 - v);
    let config = SelectionConfig {
        epochs: 2,
        batch: 16,
        bias: true,
        calibration: 32,
        ..Default::default()
    };
    let run = || {
        let source = ControlSource::new(ControlMode::Knockoff, &ds, Some(&knock)).unwrap();
        optimize_scaling(&net, SelectionState::init(&net).unwrap(), &source, &config).unwrap()
    };
    let (a, ra) = run();
    let (b, _) = run();
    assert_eq!(a, b);
    assert_eq!(ra.steps, 8);
    assert_eq!(ra.max_constraint_violation, 0.0);
    assert!(a.layers.iter().any(|l| l.theta.iter().any(|&t| t != 0.0)));
}

#[test]
fn knockoff_mode_requires_cache() {
    let (_, ds) = small_setup();
    assert!(ControlSource::new(ControlMode::Knockoff, &ds, None).is_err());
}

#[test]
fn control_batches() {
    let (_, ds) = small_setup();
    let idx = [3, 1, 4];
    let noise = ControlSource::new(ControlMode::Noise, &ds, None).unwrap();
    let a = make_control_batch(&noise, &idx, &mut stream(5, "c")).unwrap();
    let b = make_control_batch(&noise, &idx, &mut stream(5, "c")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[3, 1, 6, 6]);

    let rs = ControlSource::new(ControlMode::RandomSample, &ds, None).unwrap();
    let r = make_control_batch(&rs, &idx, &mut stream(5, "c")).unwrap();
    let row = ds.example_dim();
    for got in r.data().chunks_exact(row) {
        assert!(ds.images.data().chunks_exact(row).any(|x| x == got));
    }

    let none = ControlSource::new(ControlMode::None, &ds, None).unwrap();
    assert!(make_control_batch(&none, &idx, &mut stream(5, "c")).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn selstate_round_trip() {
    let (net, _) = small_setup();
    let mut state = SelectionState::init(&net).unwrap();
    state.layers[1].theta[3] = -0.25;
    let back = SelectionState::from_sections(&state.to_sections()).unwrap();
    assert_eq!(back, state);
    assert_eq!(state.to_sections()[0].name, "SELSTATE");
}

#[test]
fn control_mode_names() {
    for m in ControlMode::ALL {
        assert_eq!(m.as_str().parse::<ControlMode>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
    }
    assert!("nope".parse::<ControlMode>().is_err());
}
