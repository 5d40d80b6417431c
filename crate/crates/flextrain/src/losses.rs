//! Cross-entropy base loss and the two auto-distillation losses.
//!
//! Both distillation variants add a squared-L2 penalty between the final
//! features of two nested prefix configurations. The deeper feature is always
//! the detached teacher: the centralized variant trains prefix `k` toward the
//! feature of prefix `k' >= k`, the federated variant trains the sub-feature
//! `f_{k-1}` toward the device's own depth-`k` feature. Gradients never flow
//! through the teacher side.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{GradientSet, ResidualNet};

/// Which distillation penalty a training step applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillMode {
    #[serde(rename = "off")]
    Off,
    /// Centralized penalty against the next deeper prefix, `k' = k + 1`
    /// clamped to `K`.
    #[serde(rename = "centralized-k+1")]
    CentralizedNext,
    /// Centralized penalty against the full-depth prefix, `k' = K`.
    #[serde(rename = "centralized-full-K")]
    CentralizedFull,
    /// Device-side penalty against the one-step smaller prefix.
    #[serde(rename = "federated")]
    Federated,
}

impl Default for DistillMode {
    fn default() -> Self {
        DistillMode::Off
    }
}

/// Loss decomposition: `total = base_term + beta * distill_term`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub base_term: f64,
    pub distill_term: f64,
    pub beta: f64,
}

impl LossValue {
    pub fn new(base_term: f64, distill_term: f64, beta: f64) -> Self {
        Self {
            total: base_term + beta * distill_term,
            base_term,
            distill_term,
            beta,
        }
    }
}

/// Softmax cross-entropy, mean over the batch, with its analytic gradient at
/// the logits.
pub fn base_loss(logits: &Matrix, labels: &[usize]) -> Result<(LossValue, Matrix)> {
    let batch = logits.rows();
    let classes = logits.cols();
    if labels.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{batch} logit rows but {} labels",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::EmptyDataset);
    }
    for &y in labels {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, num_classes: classes });
        }
    }
    let mut grad = Matrix::zeros(batch, classes);
    let inv_b = 1.0 / batch as f64;
    let mut loss = 0.0;
    for b in 0..batch {
        let row = logits.row(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        loss += (max + denom.ln() - row[labels[b]]) * inv_b;
        let g = grad.row_mut(b);
        for c in 0..classes {
            let softmax = (row[c] - max).exp() / denom;
            g[c] = (softmax - if c == labels[b] { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok((LossValue::new(loss, 0.0, 0.0), grad))
}

/// Centralized auto-distillation: base loss at depth `k` plus
/// `beta * mean_b ||f_k - f_{k'}||^2` with the deeper feature `f_{k'}`
/// detached. One depth-`k'` forward supplies both features; gradients are
/// restricted to the depth-`k` prefix.
pub fn centralized_distill_loss(
    net: &ResidualNet,
    x: &Matrix,
    labels: &[usize],
    k: usize,
    k_prime: usize,
    beta: f64,
) -> Result<(LossValue, GradientSet)> {
    if k_prime < k {
        return Err(Error::InvalidConfig(format!(
            "teacher depth {k_prime} must be >= student depth {k}"
        )));
    }
    check_beta(beta)?;
    let trace = net.forward_prefix(x, k_prime)?;
    let logits = if k == k_prime {
        trace.logits().clone()
    } else {
        net.head_logits(trace.feature(k)?)
    };
    let (base, d_logits) = base_loss(&logits, labels)?;

    let (penalty, injection) = if k == k_prime {
        (0.0, Vec::new())
    } else {
        let student = trace.feature(k)?;
        let teacher = trace.feature(k_prime)?;
        let (penalty, d_student) = squared_l2_penalty(student, teacher, beta);
        let injection = if beta == 0.0 { Vec::new() } else { vec![(k, d_student)] };
        (penalty, injection)
    };
    let grads = net.backward_with_feature_grads(&trace, k, &d_logits, &injection)?;
    Ok((LossValue::new(base.base_term, penalty, beta), grads))
}

/// Federated auto-distillation: base loss at the device depth `k` plus
/// `beta * mean_b ||f_k - f_{k-1}||^2` with the device's own deeper feature
/// `f_k` detached; the penalty gradient flows into blocks `1..k-1` and the
/// pre-layer. Weakest devices (`k = 1`) carry no penalty.
pub fn federated_distill_loss(
    net: &ResidualNet,
    x: &Matrix,
    labels: &[usize],
    k: usize,
    beta: f64,
) -> Result<(LossValue, GradientSet)> {
    check_beta(beta)?;
    let trace = net.forward_prefix(x, k)?;
    let (base, d_logits) = base_loss(trace.logits(), labels)?;

    let (penalty, injection) = if k < 2 {
        (0.0, Vec::new())
    } else {
        let student = trace.feature(k - 1)?;
        let teacher = trace.feature(k)?;
        let (penalty, d_student) = squared_l2_penalty(student, teacher, beta);
        let injection = if beta == 0.0 { Vec::new() } else { vec![(k - 1, d_student)] };
        (penalty, injection)
    };
    let grads = net.backward_with_feature_grads(&trace, k, &d_logits, &injection)?;
    Ok((LossValue::new(base.base_term, penalty, beta), grads))
}

/// Dispatch one training-step loss according to the configured mode.
pub fn step_loss(
    net: &ResidualNet,
    x: &Matrix,
    labels: &[usize],
    k: usize,
    mode: DistillMode,
    beta: f64,
) -> Result<(LossValue, GradientSet)> {
    match mode {
        DistillMode::Off => {
            let trace = net.forward_prefix(x, k)?;
            let (base, d_logits) = base_loss(trace.logits(), labels)?;
            let grads = net.backward_prefix(&trace, &d_logits, k)?;
            Ok((base, grads))
        }
        DistillMode::CentralizedNext => {
            let k_prime = (k + 1).min(net.num_blocks());
            centralized_distill_loss(net, x, labels, k, k_prime, beta)
        }
        DistillMode::CentralizedFull => {
            centralized_distill_loss(net, x, labels, k, net.num_blocks(), beta)
        }
        DistillMode::Federated => federated_distill_loss(net, x, labels, k, beta),
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidConfig(format!("beta must be >= 0, got {beta}")));
    }
    Ok(())
}

/// `(mean_b sum_i (student - teacher)^2, d/d_student scaled by 2*beta/B)`.
fn squared_l2_penalty(student: &Matrix, teacher: &Matrix, beta: f64) -> (f64, Matrix) {
    let batch = student.rows();
    let mut penalty = 0.0;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    let scale = 2.0 * beta / batch as f64;
    for (i, (s, t)) in student.data().iter().zip(teacher.data().iter()).enumerate() {
        let diff = s - t;
        penalty += diff * diff;
        grad.data_mut()[i] = scale * diff;
    }
    (penalty / batch as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_net, ResidualNet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn randomized(input: usize, hidden: usize, classes: usize, blocks: usize, seed: u64) -> ResidualNet {
        let mut net = init_net(input, hidden, classes, blocks, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let dist = Normal::new(0.0, 0.4).unwrap();
        for a in net.params_mut().arrays_mut() {
            for v in a.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        net
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
            .unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        for classes in [2, 3, 7] {
            let logits = Matrix::zeros(4, classes);
            let labels = vec![0, 1 % classes, classes - 1, 0];
            let (loss, _) = base_loss(&logits, &labels).unwrap();
            assert!((loss.total - (classes as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn saturated_correct_logit_vanishes() {
        let mut logits = Matrix::zeros(1, 3);
        logits.set(0, 1, 30.0);
        let (loss, _) = base_loss(&logits, &[1]).unwrap();
        assert!(loss.total < 1e-9);
    }

    #[test]
    fn scalar_case_matches_direct_softmax_arithmetic() {
        let logits = Matrix::from_vec(1, 3, vec![1.0, 2.0, 0.5]).unwrap();
        let (loss, grad) = base_loss(&logits, &[1]).unwrap();
        let denom = 1.0f64.exp() + 2.0f64.exp() + 0.5f64.exp();
        let expect = denom.ln() - 2.0;
        assert!((loss.total - expect).abs() < 1e-14);
        for c in 0..3 {
            let softmax = logits.get(0, c).exp() / denom;
            let expect_g = softmax - if c == 1 { 1.0 } else { 0.0 };
            assert!((grad.get(0, c) - expect_g).abs() < 1e-14);
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = Matrix::zeros(2, 3);
        assert!(matches!(
            base_loss(&logits, &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn centralized_beta_zero_reduces_to_base() {
        let net = randomized(2, 4, 3, 3, 31);
        let x = random_batch(5, 2, 32);
        let labels = vec![0, 1, 2, 1, 0];
        let (loss, grads) = centralized_distill_loss(&net, &x, &labels, 2, 3, 0.0).unwrap();

        let trace = net.forward_prefix(&x, 2).unwrap();
        let (base, d_logits) = base_loss(trace.logits(), &labels).unwrap();
        let plain = net.backward_prefix(&trace, &d_logits, 2).unwrap();
        assert_eq!(loss.total, base.total);
        assert_eq!(grads.flat(), plain.flat());
    }

    #[test]
    fn centralized_equal_depths_have_zero_penalty() {
        let net = randomized(2, 4, 3, 3, 33);
        let x = random_batch(4, 2, 34);
        let labels = vec![0, 1, 2, 0];
        let (loss, _) = centralized_distill_loss(&net, &x, &labels, 2, 2, 0.7).unwrap();
        assert_eq!(loss.distill_term, 0.0);
        assert_eq!(loss.total, loss.base_term);
    }

    #[test]
    fn centralized_rejects_teacher_shallower_than_student() {
        let net = randomized(2, 4, 3, 3, 35);
        let x = random_batch(2, 2, 36);
        assert!(centralized_distill_loss(&net, &x, &[0, 1], 3, 2, 0.1).is_err());
    }

    #[test]
    fn centralized_total_matches_independent_arithmetic() {
        // batch of 1, beta = 0.2: recompute Eq.-style total from raw features
        let net = randomized(2, 3, 2, 3, 37);
        let x = random_batch(1, 2, 38);
        let labels = vec![1];
        let beta = 0.2;
        let (loss, grads) = centralized_distill_loss(&net, &x, &labels, 1, 2, beta).unwrap();

        let trace = net.forward_prefix(&x, 2).unwrap();
        let f1 = trace.feature(1).unwrap();
        let f2 = trace.feature(2).unwrap();
        let logits = net.head_logits(f1);
        let row = logits.row(0);
        let denom: f64 = row.iter().map(|z| z.exp()).sum();
        let ce = denom.ln() - row[1];
        let l2: f64 = f1
            .data()
            .iter()
            .zip(f2.data().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!((loss.total - (ce + beta * l2)).abs() < 1e-12);
        assert!((loss.distill_term - l2).abs() < 1e-12);

        // teacher-only block 2 gets exactly zero gradient
        let b2 = &grads.arrays.blocks[1];
        assert!(b2.dense1.weight.data().iter().all(|&v| v == 0.0));
        assert!(b2.dense2.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn federated_weakest_device_has_no_penalty() {
        let net = randomized(2, 4, 3, 3, 39);
        let x = random_batch(3, 2, 40);
        let labels = vec![0, 1, 2];
        let (loss, _) = federated_distill_loss(&net, &x, &labels, 1, 0.5).unwrap();
        assert_eq!(loss.distill_term, 0.0);
        assert_eq!(loss.total, loss.base_term);
    }

    #[test]
    fn federated_beta_zero_reduces_to_base() {
        let net = randomized(2, 4, 3, 3, 41);
        let x = random_batch(4, 2, 42);
        let labels = vec![0, 1, 2, 1];
        let (loss, grads) = federated_distill_loss(&net, &x, &labels, 3, 0.0).unwrap();
        let trace = net.forward_prefix(&x, 3).unwrap();
        let (base, d_logits) = base_loss(trace.logits(), &labels).unwrap();
        let plain = net.backward_prefix(&trace, &d_logits, 3).unwrap();
        assert_eq!(loss.total, base.total);
        assert_eq!(grads.flat(), plain.flat());
    }

    #[test]
    fn federated_penalty_never_touches_teacher_block() {
        // K=2, k=2: the penalty's teacher is f_2; block 2 must receive the
        // same gradient with and without the penalty.
        let net = randomized(2, 3, 2, 2, 43);
        let x = random_batch(2, 2, 44);
        let labels = vec![0, 1];
        let (loss_b, grads_b) = federated_distill_loss(&net, &x, &labels, 2, 0.8).unwrap();
        let (_, grads_0) = federated_distill_loss(&net, &x, &labels, 2, 0.0).unwrap();
        assert_eq!(grads_b.arrays.blocks[1], grads_0.arrays.blocks[1]);
        assert_eq!(grads_b.arrays.head, grads_0.arrays.head);
        // but the shallower prefix does see the penalty
        assert_ne!(grads_b.arrays.blocks[0], grads_0.arrays.blocks[0]);

        // and the total matches an independent evaluation
        let trace = net.forward_prefix(&x, 2).unwrap();
        let (base, _) = base_loss(trace.logits(), &labels).unwrap();
        let l2: f64 = trace
            .feature(2)
            .unwrap()
            .data()
            .iter()
            .zip(trace.feature(1).unwrap().data().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!((loss_b.total - (base.total + 0.8 * l2 / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn centralized_and_federated_penalties_agree() {
        // ||f_{k+1} - f_k||^2 is the same quantity in both variants; they
        // differ only in which side is detached.
        let net = randomized(2, 4, 3, 4, 45);
        let x = random_batch(3, 2, 46);
        let labels = vec![0, 1, 2];
        for k in 1..4 {
            let (c, _) = centralized_distill_loss(&net, &x, &labels, k, k + 1, 0.3).unwrap();
            let (f, _) = federated_distill_loss(&net, &x, &labels, k + 1, 0.3).unwrap();
            assert_eq!(c.distill_term, f.distill_term);
            assert!(c.distill_term >= 0.0);
        }
    }

    #[test]
    fn loss_value_decomposition_holds() {
        let v = LossValue::new(1.25, 0.5, 0.2);
        assert!((v.total - (v.base_term + v.beta * v.distill_term)).abs() < 1e-12);
    }
}
