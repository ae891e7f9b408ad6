//! Central finite-difference checks of every differentiable op and of the
//! smoothed end-to-end network.

use morphsnn_core::diffusion::{build_operator_tape, diffuse_tape};
use morphsnn_core::network::{ForwardOptions, MorphNet, NetConfig};
use morphsnn_core::neuron::{lif_step_tape, LifParams, LifTapeState, SpikeTensor};
use morphsnn_core::numgrad::{ConvGeom, SpikeFn};
use morphsnn_core::stsp::{momentum_update_tape, topk_prune_tape};
use morphsnn_core::gradcheck::{network_loss, network_relative_error, op_relative_error, OpFn};
use morphsnn_core::{Matrix, Mode, Rng, Tape};

const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

/// Values in `[0.1, 1]` with random sign, kept away from kinks at zero.
fn away_from_zero(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let mut m = random(rows, cols, 0.1, 1.0, rng);
    for v in m.data_mut() {
        if rng.bernoulli(0.5) {
            *v = -*v;
        }
    }
    m
}

fn assert_op(name: &str, inputs: &[Matrix], f: &OpFn) {
    let err = op_relative_error(inputs, f, 1e-6).unwrap();
    assert!(err < OP_TOL, "{name}: relative error {err:.3e}");
}

#[test]
fn elementwise_and_linear_ops() {
    let mut rng = Rng::new(1);
    let a = away_from_zero(3, 4, &mut rng);
    let b = away_from_zero(3, 4, &mut rng);
    let c = away_from_zero(4, 2, &mut rng);
    let row = away_from_zero(1, 4, &mut rng);
    let s = away_from_zero(1, 1, &mut rng);
    let pos = random(3, 4, 0.2, 2.0, &mut rng);

    assert_op("matmul", &[a.clone(), c.clone()], &|t, v| t.matmul(v[0], v[1]));
    assert_op("transpose", std::slice::from_ref(&a), &|t, v| Ok(t.transpose(v[0])));
    assert_op("add", &[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]));
    assert_op("sub", &[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]));
    assert_op("mul", &[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]));
    assert_op("scale", std::slice::from_ref(&a), &|t, v| Ok(t.scale(v[0], -1.7)));
    assert_op("add_scalar", std::slice::from_ref(&a), &|t, v| Ok(t.add_scalar(v[0], 0.3)));
    assert_op("add_row_broadcast", &[a.clone(), row.clone()], &|t, v| t.add_row_broadcast(v[0], v[1]));
    assert_op("mul_scalar_var", &[a.clone(), s.clone()], &|t, v| t.mul_scalar_var(v[0], v[1]));
    assert_op("sum", std::slice::from_ref(&a), &|t, v| Ok(t.sum(v[0])));
    assert_op("mean", std::slice::from_ref(&a), &|t, v| Ok(t.mean(v[0])));
    assert_op("sum_rows", std::slice::from_ref(&a), &|t, v| Ok(t.sum_rows(v[0])));
    assert_op("powf", std::slice::from_ref(&pos), &|t, v| Ok(t.powf(v[0], -0.5)));
    assert_op("relu", std::slice::from_ref(&a), &|t, v| Ok(t.relu(v[0])));
    assert_op("leaky_relu", std::slice::from_ref(&a), &|t, v| Ok(t.leaky_relu(v[0], 0.01)));
    assert_op("sigmoid", std::slice::from_ref(&a), &|t, v| Ok(t.sigmoid(v[0])));
    assert_op("spike(sigmoid)", std::slice::from_ref(&a), &|t, v| Ok(t.spike(v[0], SpikeFn::Sigmoid { slope: 4.0 })));
}

#[test]
fn row_and_selection_ops() {
    let mut rng = Rng::new(2);
    let a = away_from_zero(4, 5, &mut rng);
    let b = away_from_zero(2, 5, &mut rng);
    let small = random(3, 4, -0.05, 0.05, &mut rng);

    assert_op("softmax_rows(1)", std::slice::from_ref(&a), &|t, v| t.softmax_rows(v[0], 1.0));
    assert_op("softmax_rows(0.01)", std::slice::from_ref(&small), &|t, v| t.softmax_rows(v[0], 0.01));
    assert_op("cross_entropy", std::slice::from_ref(&a), &|t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]));
    assert_op("slice_cols", std::slice::from_ref(&a), &|t, v| t.slice_cols(v[0], 1, 3));
    assert_op("gather_rows", std::slice::from_ref(&a), &|t, v| t.gather_rows(v[0], &[3, 0, 3]));
    assert_op("concat_rows", &[a.clone(), b.clone()], &|t, v| t.concat_rows(&[v[0], v[1], v[0]]));
}

#[test]
fn spatial_ops() {
    let mut rng = Rng::new(3);
    let geom = ConvGeom { batch: 2, in_channels: 2, out_channels: 3, height: 4, width: 4 };
    let x = away_from_zero(2, 2 * 16, &mut rng);
    let w = away_from_zero(3, 2 * 9, &mut rng);
    let b = away_from_zero(1, 3, &mut rng);
    assert_op("conv3x3", &[x.clone(), w, b], &|t, v| t.conv3x3(v[0], v[1], v[2], geom));

    let gamma = random(1, 2, 0.5, 1.5, &mut rng);
    let beta = away_from_zero(1, 2, &mut rng);
    assert_op("batch_norm(batch)", &[x.clone(), gamma.clone(), beta.clone()], &|t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 2, 16, 1e-5, None)?.0)
    });
    let (mean, var) = ([0.1, -0.2], [0.8, 1.3]);
    assert_op("batch_norm(running)", &[x.clone(), gamma, beta], &|t, v| {
        Ok(t.batch_norm(v[0], v[1], v[2], 2, 16, 1e-5, Some((&mean, &var)))?.0)
    });
    assert_op("avg_pool2", std::slice::from_ref(&x), &|t, v| t.avg_pool2(v[0], 2, 4, 4));
    assert_op("gap", &[x], &|t, v| t.gap(v[0], 2, 16));
}

#[test]
fn graph_ops() {
    let mut rng = Rng::new(4);
    let s = random(4, 4, 0.1, 1.0, &mut rng);
    let x = away_from_zero(4, 3, &mut rng);
    assert_op("build_operator", std::slice::from_ref(&s), &|t, v| Ok(build_operator_tape(t, v[0])?.0));
    assert_op("diffuse", &[s.clone(), x], &|t, v| {
        let (p, _) = build_operator_tape(t, v[0])?;
        diffuse_tape(t, p, v[1], 2)
    });
    let prev = random(4, 4, 0.1, 1.0, &mut rng);
    assert_op("momentum_update", &[prev, s.clone()], &|t, v| momentum_update_tape(t, Some(v[0]), v[1], 0.2));
    assert_op("topk_prune", &[s], &|t, v| Ok(topk_prune_tape(t, v[0], 2)?.0));
}

#[test]
fn lif_recurrence() {
    let mut rng = Rng::new(5);
    let c1 = away_from_zero(2, 6, &mut rng);
    let c2 = away_from_zero(2, 6, &mut rng);
    let params = LifParams { spike_fn: SpikeFn::Sigmoid { slope: 4.0 }, ..LifParams::default() };
    assert_op("lif two steps", &[c1, c2], &|t, v| {
        let mut state = LifTapeState::default();
        let s1 = lif_step_tape(t, &mut state, v[0], &params)?;
        let s2 = lif_step_tape(t, &mut state, v[1], &params)?;
        t.add(s1, s2)
    });
}

fn small_net() -> MorphNet {
    let cfg = NetConfig {
        in_channels: 2,
        channels: 4,
        height: 8,
        width: 8,
        layers: 1,
        nodes: 3,
        diffusion_steps: 2,
        k: 2,
        heads: 2,
        timesteps: 2,
        classes: 3,
        ..NetConfig::default()
    };
    MorphNet::new(cfg, 11).unwrap().smooth_clone(4.0)
}

fn streams(net: &MorphNet, n: usize) -> Vec<SpikeTensor> {
    let c = &net.config;
    let mut rng = Rng::new(12);
    (0..n)
        .map(|_| {
            let len = c.timesteps * c.in_channels * c.height * c.width;
            SpikeTensor::from_vec([c.timesteps, c.in_channels, c.height, c.width], (0..len).map(|_| rng.bernoulli(0.3) as u8).collect())
                .unwrap()
        })
        .collect()
}

fn net_loss(net: &MorphNet, data: &[SpikeTensor], labels: &[usize]) -> f64 {
    network_loss(net, data, labels, 7).unwrap()
}

#[test]
fn end_to_end_smoothed_network() {
    let net = small_net();
    let data = streams(&net, 2);
    let labels = [0, 2];
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, true).unwrap();
    let refs: Vec<&SpikeTensor> = data.iter().collect();
    let mut rng = Rng::new(7);
    let out = net.forward(&mut tape, &vars, &refs, Mode::Train, &mut rng, ForwardOptions::default()).unwrap();
    let loss = tape.cross_entropy(out.logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    for v in [vars.layers[0].attention.w_proj, vars.layers[0].attention.a, vars.classifier_w, vars.encoder.kernel] {
        assert!(tape.grad_or_zeros(v).max_abs() > 0.0, "gradient did not reach {v:?}");
    }
    // Every entry of small tensors, a random subset of large ones.
    let err = network_relative_error(&net, &data, &labels, 1e-5, 12).unwrap();
    assert!(err < E2E_TOL, "relative error {err:.3e}");
}

#[test]
fn readout_weight_gradient() {
    let mut net = small_net();
    net.layers[0].readout = Matrix::from_rows(&[&[0.3, -0.4, 0.1]]);
    let data = streams(&net, 2);
    let labels = [1, 0];
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape, true).unwrap();
    let refs: Vec<&SpikeTensor> = data.iter().collect();
    let mut rng = Rng::new(7);
    let out = net.forward(&mut tape, &vars, &refs, Mode::Train, &mut rng, ForwardOptions::default()).unwrap();
    let loss = tape.cross_entropy(out.logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad_or_zeros(vars.layers[0].readout);
    assert!(g.max_abs() > 0.0);
    let eps = 1e-5;
    for i in 0..3 {
        let mut plus = net.clone();
        plus.layers[0].readout.data_mut()[i] += eps;
        let mut minus = net.clone();
        minus.layers[0].readout.data_mut()[i] -= eps;
        let fd = (net_loss(&plus, &data, &labels) - net_loss(&minus, &data, &labels)) / (2.0 * eps);
        let err = (g.data()[i] - fd).abs() / g.data()[i].abs().max(fd.abs()).max(1e-8);
        assert!(err < E2E_TOL, "w_{i}: analytic {} vs numeric {fd}", g.data()[i]);
    }
}
