mod common;

use common::grad_cases::{arch, batch};
use dgprune::domains::DomainBatch;
use dgprune::nn::GatedModel;
use dgprune::objective::{erm_loss, mix_batch, mixup_loss, PretrainLoss};
use dgprune::pruning::{train_step, OptimizerConfig, TrainState};
use dgprune::tensor::{Tape, Tensor};

fn run_steps(loss: &PretrainLoss, steps: usize) -> (GatedModel<f64>, Vec<f64>) {
    let mut model = GatedModel::build(&arch(), 13).unwrap();
    let opt = OptimizerConfig {
        learning_rate: 0.05,
        momentum: 0.9,
    };
    let mut state = TrainState::new(&model, &opt, 99);
    let losses = (0..steps)
        .map(|s| train_step(&mut model, &mut state, &batch(3, 20 + s as u64), loss).unwrap())
        .collect();
    (model, losses)
}

#[test]
fn coral_with_zero_lambda_follows_erm_exactly() {
    let erm = run_steps(&PretrainLoss::Erm {}, 6);
    let coral = run_steps(&PretrainLoss::Coral { lambda: 0.0 }, 6);
    assert_eq!(erm, coral);
    assert_ne!(erm.0, run_steps(&PretrainLoss::Coral { lambda: 5.0 }, 6).0);
}

#[test]
fn mixup_with_unit_lambda_follows_erm_exactly() {
    let erm = run_steps(&PretrainLoss::Erm {}, 6);
    let mix = run_steps(
        &PretrainLoss::Mixup {
            beta_param: 0.2,
            fixed_lambda: Some(1.0),
        },
        6,
    );
    assert_eq!(erm, mix);
}

#[test]
fn mixup_half_lambda_with_equal_labels_is_loss_of_average_image() {
    let model = GatedModel::build(&arch(), 15).unwrap();
    let mut b = batch(2, 16);
    b.labels = vec![1; 6];
    let mut tape = Tape::new();
    let (mixed_loss, _) = mixup_loss(&mut tape, &model, &b, 0.5).unwrap();
    let mixed_loss = tape.scalar(mixed_loss);

    // Average each row with its partner in the next domain by hand.
    let row = 3 * 49;
    let src = b.images.values();
    let partner = [2, 3, 4, 5, 0, 1];
    let avg: Vec<f64> = (0..6)
        .flat_map(|r| (0..row).map(move |k| (r, k)))
        .map(|(r, k)| 0.5 * src[r * row + k] + 0.5 * src[partner[r] * row + k])
        .collect();
    let plain = DomainBatch {
        images: Tensor::new(vec![6, 3, 7, 7], avg).unwrap(),
        labels: vec![1; 6],
        domain_ids: b.domain_ids.clone(),
    };
    let mut tape = Tape::new();
    let (plain_loss, _) = erm_loss(&mut tape, &model, &plain).unwrap();
    assert!((mixed_loss - tape.scalar(plain_loss)).abs() < 1e-14);
}

#[test]
fn mixup_loss_is_convex_combination_of_label_losses() {
    let model = GatedModel::build(&arch(), 17).unwrap();
    let b = batch(3, 18);
    let lambda = 0.3;
    let mixed = mix_batch(&b, lambda).unwrap();
    let mut tape = Tape::new();
    let (loss, _) = mixup_loss(&mut tape, &model, &b, lambda).unwrap();
    let loss = tape.scalar(loss);

    let logits = model.forward(&mixed.images).unwrap();
    let k = 3;
    let ce = |labels: &[usize]| -> f64 {
        logits
            .values()
            .chunks(k)
            .zip(labels)
            .map(|(z, &y)| {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - z[y]
            })
            .sum::<f64>()
            / labels.len() as f64
    };
    let expected = lambda * ce(&mixed.labels_a) + (1.0 - lambda) * ce(&mixed.labels_b);
    assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    // Partners come from a different domain.
    assert!(mixed.labels_a.len() == 9);
}

#[test]
fn divergence_is_reported() {
    let mut model = GatedModel::build(&arch(), 19).unwrap();
    let mut state = TrainState::new(&model, &OptimizerConfig::default(), 0);
    let mut b = batch(2, 21);
    b.images.values_mut()[0] = f64::NAN;
    let err = train_step(&mut model, &mut state, &b, &PretrainLoss::Erm {}).unwrap_err();
    assert_eq!(err.kind(), "divergence");
}

#[test]
fn unbalanced_batch_is_rejected() {
    let mut model = GatedModel::build(&arch(), 19).unwrap();
    let mut state = TrainState::new(&model, &OptimizerConfig::default(), 0);
    let mut b = batch(2, 22);
    b.domain_ids[0] = 1;
    let err = train_step(&mut model, &mut state, &b, &PretrainLoss::Erm {}).unwrap_err();
    assert_eq!(err.kind(), "unbalanced_batch");
}
