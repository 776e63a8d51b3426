//! Finite-difference checks for every tape primitive and composite loss.

mod common;

use common::grad_cases;
use common::uniform;
use dgprune::tensor::{Tape, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

macro_rules! fd_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                grad_cases::$name();
            }
        )*
    };
}

fd_tests!(
    conv2d_gradients_match_finite_differences,
    relu_gradient_matches_away_from_zero,
    channel_scale_gradients,
    global_avg_pool_gradient_is_uniform,
    linear_gradients,
    cross_entropy_gradient_is_softmax_minus_onehot,
    mse_gradient,
    mean_and_variance_gradients,
    covariance_alignment_gradients,
    select_rows_gradient,
    composite_network_gradients,
    erm_loss_gradients,
    erm_loss_gradients_gate_before_activation,
    coral_loss_gradients,
    mixup_loss_gradients,
    risk_variance_gradients,
    mean_domain_risk_gradients,
);

#[test]
fn square_at_three_has_gradient_six() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.square(x);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn constant_root_gives_zero_gradients() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let c = tape.constant(Tensor::scalar(5.0));
    let root = tape.scale(c, 2.0).unwrap();
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.square(x);
    assert_eq!(tape.backward(y).unwrap_err().kind(), "non_scalar_root");
}

#[test]
fn backward_twice_doubles_gradients_exactly() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1, 1, 4, 4], &uniform(16, 30)));
    let k = tape.param(t(&[2, 1, 2, 2], &uniform(8, 31)));
    let b = tape.param(t(&[2], &[0.1, -0.3]));
    let y = tape.conv2d(x, k, b).unwrap();
    let y = tape.relu(y);
    let sq = tape.square(y);
    let root = tape.sum(sq);
    tape.backward(root).unwrap();
    let once: Vec<Vec<f64>> = [x, k, b].iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
    tape.backward(root).unwrap();
    for (v, g1) in [x, k, b].iter().zip(&once) {
        let g2 = tape.grad(*v).unwrap();
        for (a, b) in g1.iter().zip(g2) {
            assert_eq!(2.0 * a, *b);
        }
    }
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
}

#[test]
fn restricted_backward_matches_full_backward_on_targets() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 1, 5, 5], &uniform(50, 32)));
    let k = tape.param(t(&[3, 1, 3, 3], &uniform(27, 33)));
    let b = tape.param(t(&[3], &uniform(3, 34)));
    let g = tape.param(t(&[3], &[1.0, 0.5, -0.7]));
    let h = tape.conv2d(x, k, b).unwrap();
    let h = tape.relu(h);
    let h = tape.channel_scale(h, g).unwrap();
    let sq = tape.square(h);
    let root = tape.sum(sq);
    tape.backward(root).unwrap();
    let full = tape.grad(g).unwrap().to_vec();
    tape.zero_grads();
    tape.backward_wrt(root, &[g]).unwrap();
    assert_eq!(tape.grad(g).unwrap(), full.as_slice());
    assert!(tape.grad(k).is_none());
}
