//! Finite-difference cases for every tape primitive and composite loss, shared
//! by the gradient tests and the acceptance run.

use super::{assert_grad_close, finite_diff, uniform, uniform_away_from_zero};
use dgprune::domains::DomainBatch;
use dgprune::importance::{ood_risk_variance, record_domain_risks};
use dgprune::nn::{ArchConfig, GatePlacement, GatedModel};
use dgprune::objective::{coral_loss, erm_loss, mixup_loss};
use dgprune::pruning::collect_gradients;
use dgprune::tensor::{Tape, Tensor, Var, VarianceKind};

const STEP: f64 = 1e-4;
const REL: f64 = 1e-5;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

/// Builds `root(inputs)` with input `which` as the differentiated leaf; returns (value, grad).
fn eval(
    inputs: &[(Vec<usize>, Vec<f64>)],
    which: usize,
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, (s, v))| {
            let tensor = t(s, v);
            if i == which {
                tape.param(tensor)
            } else {
                tape.constant(tensor)
            }
        })
        .collect();
    let root = build(&mut tape, &vars);
    let value = tape.scalar(root);
    tape.backward(root).unwrap();
    (value, tape.grad(vars[which]).unwrap().to_vec())
}

fn check_all(inputs: &[(Vec<usize>, Vec<f64>)], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var, abs: f64, what: &str) {
    for which in 0..inputs.len() {
        let (_, analytic) = eval(inputs, which, build);
        let numeric = finite_diff(&inputs[which].1, STEP, |probe| {
            let mut altered = inputs.to_vec();
            altered[which].1 = probe.to_vec();
            eval(&altered, which, build).0
        });
        assert_grad_close(&analytic, &numeric, REL, 1e-6, abs, &format!("{what} input {which}"));
    }
}

pub fn conv2d_gradients_match_finite_differences() {
    let inputs = vec![
        (vec![2, 3, 8, 8], uniform(2 * 3 * 64, 1)),
        (vec![4, 3, 3, 3], uniform(4 * 27, 2)),
        (vec![4], uniform(4, 3)),
    ];
    check_all(
        &inputs,
        &|tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2]).unwrap();
            tape.sum(y)
        },
        1e-8,
        "conv2d",
    );
    // Non-linear downstream so the upstream gradient is not constant.
    check_all(
        &inputs,
        &|tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2]).unwrap();
            let sq = tape.square(y);
            tape.sum(sq)
        },
        1e-8,
        "conv2d squared",
    );
}

pub fn relu_gradient_matches_away_from_zero() {
    let inputs = [(vec![3, 7], uniform_away_from_zero(21, 4, 1e-2)), (vec![3, 7], uniform(21, 5))];
    check_all(
        &inputs[..1],
        &|tape, v| {
            let y = tape.relu(v[0]);
            let sq = tape.square(y);
            tape.sum(sq)
        },
        1e-8,
        "relu",
    );
}

pub fn channel_scale_gradients() {
    let inputs = vec![(vec![2, 3, 4, 4], uniform(96, 6)), (vec![3], uniform(3, 7))];
    check_all(
        &inputs,
        &|tape, v| {
            let y = tape.channel_scale(v[0], v[1]).unwrap();
            let sq = tape.square(y);
            tape.sum(sq)
        },
        1e-8,
        "channel_scale",
    );
}

pub fn global_avg_pool_gradient_is_uniform() {
    let x = uniform(2 * 3 * 5 * 4, 8);
    let mut tape = Tape::new();
    let v = tape.param(t(&[2, 3, 5, 4], &x));
    let y = tape.global_avg_pool(v).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    let expect = 1.0 / 20.0;
    assert!(tape.grad(v).unwrap().iter().all(|&g| (g - expect).abs() < 1e-15));
    check_all(
        &[(vec![2, 3, 5, 4], x)],
        &|tape, v| {
            let y = tape.global_avg_pool(v[0]).unwrap();
            let sq = tape.square(y);
            tape.sum(sq)
        },
        1e-8,
        "global_avg_pool",
    );
}

pub fn linear_gradients() {
    let inputs = vec![(vec![4, 5], uniform(20, 9)), (vec![3, 5], uniform(15, 10)), (vec![3], uniform(3, 11))];
    check_all(
        &inputs,
        &|tape, v| {
            let y = tape.linear(v[0], v[1], v[2]).unwrap();
            let sq = tape.square(y);
            tape.sum(sq)
        },
        1e-8,
        "linear",
    );
}

pub fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = uniform(4 * 5, 12);
    let labels = [0usize, 3, 4, 1];
    let (_, analytic) = eval(&[(vec![4, 5], logits.clone())], 0, &|tape, v| {
        tape.softmax_cross_entropy(v[0], &labels).unwrap()
    });
    for (b, row) in logits.chunks(5).enumerate() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for k in 0..5 {
            let p = row[k].exp() / z;
            let onehot = if labels[b] == k { 1.0 } else { 0.0 };
            assert!((analytic[b * 5 + k] - (p - onehot) / 4.0).abs() < 1e-15);
        }
    }
    check_all(
        &[(vec![4, 5], logits)],
        &|tape, v| tape.softmax_cross_entropy(v[0], &labels).unwrap(),
        1e-8,
        "cross_entropy",
    );
}

pub fn mse_gradient() {
    let labels = [2usize, 0, 1];
    check_all(
        &[(vec![3, 3], uniform(9, 13))],
        &|tape, v| tape.mse_loss(v[0], &labels).unwrap(),
        1e-8,
        "mse",
    );
}

pub fn mean_and_variance_gradients() {
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = uniform(4, 14).into_iter().map(|v| (vec![], vec![v])).collect();
    check_all(&inputs, &|tape, v| tape.mean(v).unwrap(), 1e-8, "mean");
    for kind in [VarianceKind::Population, VarianceKind::Sample] {
        check_all(&inputs, &|tape, v| tape.variance(v, kind).unwrap(), 1e-8, "variance");
    }
}

pub fn covariance_alignment_gradients() {
    // Deep-CORAL style penalty between two feature batches.
    let inputs = vec![(vec![6, 4], uniform(24, 15)), (vec![5, 4], uniform(20, 16))];
    check_all(
        &inputs,
        &|tape, v| {
            let ca = tape.covariance(v[0]).unwrap();
            let cb = tape.covariance(v[1]).unwrap();
            let d = tape.squared_distance(ca, cb).unwrap();
            tape.scale(d, 1.0 / 64.0).unwrap()
        },
        1e-8,
        "coral",
    );
}

pub fn select_rows_gradient() {
    let rows = [2usize, 0, 2];
    check_all(
        &[(vec![3, 4], uniform(12, 17))],
        &|tape, v| {
            let y = tape.select_rows(v[0], &rows).unwrap();
            let sq = tape.square(y);
            tape.sum(sq)
        },
        1e-8,
        "select_rows",
    );
}

pub fn composite_network_gradients() {
    // conv -> relu -> gate -> conv -> relu -> pool -> linear -> cross-entropy
    let inputs = vec![
        (vec![3, 2, 7, 7], uniform(3 * 2 * 49, 20)),
        (vec![4, 2, 3, 3], uniform(72, 21)),
        (vec![4], uniform(4, 22)),
        (vec![4], uniform(4, 23)),
        (vec![3, 4, 2, 2], uniform(48, 24)),
        (vec![3], uniform(3, 25)),
        (vec![5, 3], uniform(15, 26)),
        (vec![5], uniform(5, 27)),
    ];
    let labels = [4usize, 1, 0];
    let build = |tape: &mut Tape<f64>, v: &[Var]| {
        let h = tape.conv2d(v[0], v[1], v[2]).unwrap();
        let h = tape.relu(h);
        let h = tape.channel_scale(h, v[3]).unwrap();
        let h = tape.conv2d(h, v[4], v[5]).unwrap();
        let h = tape.relu(h);
        let p = tape.global_avg_pool(h).unwrap();
        let logits = tape.linear(p, v[6], v[7]).unwrap();
        tape.softmax_cross_entropy(logits, &labels).unwrap()
    };
    check_all(&inputs, &build, 1e-8, "composite");
}


pub fn arch() -> ArchConfig {
    ArchConfig {
        height: 7,
        width: 7,
        channels: vec![4, 3],
        kernel_sizes: vec![3, 3],
        n_classes: 3,
        ..ArchConfig::default()
    }
}

/// Three domains of `per` rows each, rows grouped by domain.
pub fn batch(per: usize, seed: u64) -> DomainBatch<f64> {
    let n = 3 * per;
    let images = uniform(n * 3 * 49, seed);
    DomainBatch {
        images: Tensor::new(vec![n, 3, 7, 7], images).unwrap(),
        labels: (0..n).map(|i| (i * 7 + seed as usize) % 3).collect(),
        domain_ids: (0..n).map(|i| i / per).collect(),
    }
}

/// Perturbs every parameter in turn and compares with the tape gradient.
fn check_model_gradients(
    model: &GatedModel<f64>,
    loss: &dyn Fn(&mut Tape<f64>, &GatedModel<f64>) -> (Var, dgprune::nn::ForwardPass),
    what: &str,
) {
    let mut tape = Tape::new();
    let (root, fwd) = loss(&mut tape, model);
    tape.backward(root).unwrap();
    let grads = collect_gradients(&tape, &fwd, model).unwrap();
    for (id, analytic) in model.param_ids().into_iter().zip(grads) {
        let x = model.param_values(id).to_vec();
        let numeric = finite_diff(&x, 1e-5, |p| {
            let mut m = model.clone();
            m.param_values_mut(id).copy_from_slice(p);
            let mut t = Tape::new();
            let (r, _) = loss(&mut t, &m);
            t.scalar(r)
        });
        assert_grad_close(&analytic, &numeric, 1e-5, 1e-6, 1e-9, &format!("{what} {id:?}"));
    }
}

pub fn erm_loss_gradients() {
    let model = GatedModel::build(&arch(), 1).unwrap();
    let b = batch(3, 2);
    check_model_gradients(&model, &|t, m| erm_loss(t, m, &b).unwrap(), "erm");
}

pub fn erm_loss_gradients_gate_before_activation() {
    let a = ArchConfig {
        gate_placement: GatePlacement::BeforeActivation,
        ..arch()
    };
    let model = GatedModel::build(&a, 3).unwrap();
    let b = batch(3, 4);
    check_model_gradients(&model, &|t, m| erm_loss(t, m, &b).unwrap(), "erm-before");
}

pub fn coral_loss_gradients() {
    let model = GatedModel::build(&arch(), 5).unwrap();
    let b = batch(4, 6);
    check_model_gradients(&model, &|t, m| coral_loss(t, m, &b, 3.0).unwrap(), "coral");
}

pub fn mixup_loss_gradients() {
    let model = GatedModel::build(&arch(), 7).unwrap();
    let b = batch(3, 8);
    check_model_gradients(&model, &|t, m| mixup_loss(t, m, &b, 0.37).unwrap(), "mixup");
}

pub fn risk_variance_gradients() {
    let model = GatedModel::build(&arch(), 9).unwrap();
    let b = batch(4, 10);
    for kind in [VarianceKind::Population, VarianceKind::Sample] {
        check_model_gradients(
            &model,
            &|t, m| {
                let (fwd, risks) = record_domain_risks(t, m, &b).unwrap();
                (ood_risk_variance(t, &risks, kind).unwrap(), fwd)
            },
            "variance",
        );
    }
}

pub fn mean_domain_risk_gradients() {
    let model = GatedModel::build(&arch(), 11).unwrap();
    let b = batch(4, 12);
    check_model_gradients(
        &model,
        &|t, m| {
            let (fwd, risks) = record_domain_risks(t, m, &b).unwrap();
            (t.mean(&risks.risks).unwrap(), fwd)
        },
        "mean risk",
    );
}


/// Primitive ops, then composite losses.
pub const PRIMITIVES: &[(&str, fn())] = &[
    ("conv2d_gradients_match_finite_differences", conv2d_gradients_match_finite_differences),
    ("relu_gradient_matches_away_from_zero", relu_gradient_matches_away_from_zero),
    ("channel_scale_gradients", channel_scale_gradients),
    ("global_avg_pool_gradient_is_uniform", global_avg_pool_gradient_is_uniform),
    ("linear_gradients", linear_gradients),
    ("cross_entropy_gradient_is_softmax_minus_onehot", cross_entropy_gradient_is_softmax_minus_onehot),
    ("mse_gradient", mse_gradient),
    ("mean_and_variance_gradients", mean_and_variance_gradients),
    ("covariance_alignment_gradients", covariance_alignment_gradients),
    ("select_rows_gradient", select_rows_gradient),
    ("composite_network_gradients", composite_network_gradients),
];

pub const LOSSES: &[(&str, fn())] = &[
    ("erm_loss_gradients", erm_loss_gradients),
    ("erm_loss_gradients_gate_before_activation", erm_loss_gradients_gate_before_activation),
    ("coral_loss_gradients", coral_loss_gradients),
    ("mixup_loss_gradients", mixup_loss_gradients),
    ("risk_variance_gradients", risk_variance_gradients),
    ("mean_domain_risk_gradients", mean_domain_risk_gradients),
];
