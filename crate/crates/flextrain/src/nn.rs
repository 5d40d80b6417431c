//! Depth-flexible residual network with prefix forward/backward passes and
//! SGD-with-momentum updates.
//!
//! The network is a stack of `K` residual blocks between a dense
//! pre-processing layer and a dense decision head. A *prefix configuration*
//! of depth `k` runs the pre-layer, blocks `1..=k`, and the head, while
//! blocks `k+1..=K` act as the identity. Every block is `x + W2·relu(W1·x +
//! b1) + b2`, so structurally skipping a block and running it with zeroed
//! branch weights produce the same output.
//!
//! Everything is f64 and fully deterministic given a seed.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

static NET_UID: AtomicU64 = AtomicU64::new(1);

/// Dense affine layer; `weight` is `(out, in)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn all_finite(&self) -> bool {
        self.weight.all_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

/// Two-layer residual branch: the block computes `x + dense2(relu(dense1(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub dense1: DenseLayer,
    pub dense2: DenseLayer,
}

impl ResidualBlock {
    fn zeros(hidden: usize) -> Self {
        Self {
            dense1: DenseLayer::zeros(hidden, hidden),
            dense2: DenseLayer::zeros(hidden, hidden),
        }
    }

    pub fn param_count(&self) -> usize {
        self.dense1.param_count() + self.dense2.param_count()
    }
}

/// One array per weight array of the network. Shared layout for weights,
/// gradients, and optimizer velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamArrays {
    pub pre: DenseLayer,
    pub blocks: Vec<ResidualBlock>,
    pub head: DenseLayer,
}

impl ParamArrays {
    pub(crate) fn zeros(input_dim: usize, hidden_dim: usize, num_classes: usize, num_blocks: usize) -> Self {
        Self {
            pre: DenseLayer::zeros(hidden_dim, input_dim),
            blocks: (0..num_blocks).map(|_| ResidualBlock::zeros(hidden_dim)).collect(),
            head: DenseLayer::zeros(num_classes, hidden_dim),
        }
    }

    /// Arrays in canonical (checkpoint) order, with their manifest names.
    pub fn arrays(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::with_capacity(2 + 4 * self.blocks.len() + 2);
        out.push(("pre.weight".into(), self.pre.weight.data()));
        out.push(("pre.bias".into(), &self.pre.bias));
        for (i, b) in self.blocks.iter().enumerate() {
            let n = i + 1;
            out.push((format!("block{n}.dense1.weight"), b.dense1.weight.data()));
            out.push((format!("block{n}.dense1.bias"), &b.dense1.bias));
            out.push((format!("block{n}.dense2.weight"), b.dense2.weight.data()));
            out.push((format!("block{n}.dense2.bias"), &b.dense2.bias));
        }
        out.push(("head.weight".into(), self.head.weight.data()));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub(crate) fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 + 4 * self.blocks.len() + 2);
        out.push(self.pre.weight.data_mut());
        out.push(&mut self.pre.bias);
        for b in self.blocks.iter_mut() {
            out.push(b.dense1.weight.data_mut());
            out.push(&mut b.dense1.bias);
            out.push(b.dense2.weight.data_mut());
            out.push(&mut b.dense2.bias);
        }
        out.push(self.head.weight.data_mut());
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.pre.param_count()
            + self.blocks.iter().map(ResidualBlock::param_count).sum::<usize>()
            + self.head.param_count()
    }

    /// All parameter values flattened in canonical order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, a) in self.arrays() {
            out.extend_from_slice(a);
        }
        out
    }
}

/// Architecture hyper-parameters; builds fresh networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub num_blocks: usize,
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<ResidualNet> {
        init_net(self.input_dim, self.hidden_dim, self.num_classes, self.num_blocks, seed)
    }

    pub fn with_blocks(&self, num_blocks: usize) -> ModelSpec {
        ModelSpec { num_blocks, ..*self }
    }
}

/// The flexible model: pre-processing layer, `K` residual blocks, decision head.
#[derive(Clone, Debug)]
pub struct ResidualNet {
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    params: ParamArrays,
    seed: u64,
    uid: u64,
    version: u64,
}

/// Activations cached by a prefix forward pass, used for the backward pass.
///
/// Blocks are nested, so the depth-`j` feature for any `j <= depth` is
/// readable from the same trace.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    depth: usize,
    input: Matrix,
    pre_out: Matrix,
    /// Per block `j`: relu output of the branch (also the relu mask).
    acts: Vec<Matrix>,
    /// Per block `j`: post-block feature `h_j`.
    hidden: Vec<Matrix>,
    logits: Matrix,
    net_uid: u64,
    net_version: u64,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    /// Post-block feature `h_j` for `1 <= j <= depth`; `j = 0` is the
    /// pre-layer output.
    pub fn feature(&self, j: usize) -> Result<&Matrix> {
        if j > self.depth {
            return Err(Error::DepthOutOfRange { depth: j, max: self.depth });
        }
        Ok(if j == 0 { &self.pre_out } else { &self.hidden[j - 1] })
    }
}

/// Reverse-mode gradients for every weight array, restricted to a prefix
/// depth: arrays of blocks deeper than `depth` stay exactly zero.
#[derive(Clone, Debug)]
pub struct GradientSet {
    depth: usize,
    pub arrays: ParamArrays,
}

impl GradientSet {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn flat(&self) -> Vec<f64> {
        self.arrays.flat()
    }
}

/// Momentum buffers, one per weight array.
#[derive(Clone, Debug)]
pub struct Velocity {
    arrays: ParamArrays,
}

impl Velocity {
    pub fn zeros(net: &ResidualNet) -> Self {
        Self {
            arrays: ParamArrays::zeros(net.input_dim, net.hidden_dim, net.num_classes, net.num_blocks()),
        }
    }
}

/// Initialize a network. Dense weights use He fan-in scaling; the second
/// dense layer of every residual branch starts at zero so each block begins
/// as the identity map. Biases start at zero. Deterministic given `seed`.
pub fn init_net(
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    num_blocks: usize,
    seed: u64,
) -> Result<ResidualNet> {
    for (name, v) in [
        ("input_dim", input_dim),
        ("hidden_dim", hidden_dim),
        ("num_classes", num_classes),
        ("num_blocks", num_blocks),
    ] {
        if v == 0 {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1, got 0")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamArrays::zeros(input_dim, hidden_dim, num_classes, num_blocks);
    // Draw order: pre.weight, block1.dense1.weight .. blockK.dense1.weight,
    // head.weight. Branch second layers and all biases stay zero.
    fill_he(&mut params.pre.weight, input_dim, &mut rng);
    for block in params.blocks.iter_mut() {
        fill_he(&mut block.dense1.weight, hidden_dim, &mut rng);
    }
    fill_he(&mut params.head.weight, hidden_dim, &mut rng);
    Ok(ResidualNet {
        input_dim,
        hidden_dim,
        num_classes,
        params,
        seed,
        uid: NET_UID.fetch_add(1, Ordering::Relaxed),
        version: 0,
    })
}

fn fill_he(w: &mut Matrix, fan_in: usize, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    for v in w.data_mut() {
        *v = dist.sample(rng);
    }
}

impl ResidualNet {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// K, the number of residual blocks.
    pub fn num_blocks(&self) -> usize {
        self.params.blocks.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            num_classes: self.num_classes,
            num_blocks: self.num_blocks(),
        }
    }

    pub fn params(&self) -> &ParamArrays {
        &self.params
    }

    /// Mutable access to the weights; bumps the version so outstanding
    /// forward traces become stale.
    pub fn params_mut(&mut self) -> &mut ParamArrays {
        self.version += 1;
        &mut self.params
    }

    pub(crate) fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        params: ParamArrays,
        seed: u64,
    ) -> Self {
        Self {
            input_dim,
            hidden_dim,
            num_classes,
            params,
            seed,
            uid: NET_UID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Flat parameter vector in canonical (checkpoint) order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.flat()
    }

    /// Overwrite one parameter by flat index (canonical order). Test and
    /// tooling hook; bumps the version.
    pub fn set_flat_param(&mut self, index: usize, value: f64) {
        self.version += 1;
        let mut offset = 0;
        for a in self.params.arrays_mut() {
            if index < offset + a.len() {
                a[index - offset] = value;
                return;
            }
            offset += a.len();
        }
        panic!("flat parameter index {index} out of range {offset}");
    }

    pub fn weights_equal(&self, other: &ResidualNet) -> bool {
        self.spec() == other.spec() && self.params == other.params
    }

    pub fn all_finite(&self) -> bool {
        self.params.pre.all_finite()
            && self.params.head.all_finite()
            && self
                .params
                .blocks
                .iter()
                .all(|b| b.dense1.all_finite() && b.dense2.all_finite())
    }

    fn check_depth(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.num_blocks() {
            return Err(Error::DepthOutOfRange { depth: k, max: self.num_blocks() });
        }
        Ok(())
    }

    /// Run the prefix configuration of depth `k` on a batch `x` of shape
    /// `(batch, input_dim)`.
    pub fn forward_prefix(&self, x: &Matrix, k: usize) -> Result<ForwardTrace> {
        self.check_depth(k)?;
        if x.cols() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        if x.rows() == 0 {
            return Err(Error::ShapeMismatch("empty input batch".into()));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("input batch".into()));
        }
        let pre_out = x.affine(&self.params.pre.weight, &self.params.pre.bias);
        let mut acts = Vec::with_capacity(k);
        let mut hidden = Vec::with_capacity(k);
        let mut h = pre_out.clone();
        for block in &self.params.blocks[..k] {
            let a = h.affine(&block.dense1.weight, &block.dense1.bias).relu();
            let mut next = a.affine(&block.dense2.weight, &block.dense2.bias);
            next.add_assign(&h);
            acts.push(a);
            hidden.push(next.clone());
            h = next;
        }
        let logits = h.affine(&self.params.head.weight, &self.params.head.bias);
        Ok(ForwardTrace {
            depth: k,
            input: x.clone(),
            pre_out,
            acts,
            hidden,
            logits,
            net_uid: self.uid,
            net_version: self.version,
        })
    }

    /// Head logits for an arbitrary hidden-dim feature batch.
    pub fn head_logits(&self, features: &Matrix) -> Matrix {
        features.affine(&self.params.head.weight, &self.params.head.bias)
    }

    /// Exact reverse-mode gradients of a loss whose gradient at the logits is
    /// `loss_grad_at_logits`, for the prefix of depth `k`. The trace must come
    /// from this network at depth `k` with no intervening weight updates.
    pub fn backward_prefix(
        &self,
        trace: &ForwardTrace,
        loss_grad_at_logits: &Matrix,
        k: usize,
    ) -> Result<GradientSet> {
        if trace.depth != k {
            return Err(Error::ShapeMismatch(format!(
                "trace depth {} does not match requested depth {k}",
                trace.depth
            )));
        }
        self.backward_with_feature_grads(trace, k, loss_grad_at_logits, &[])
    }

    /// Backward pass where the head read the depth-`k` feature of `trace`
    /// (which may be deeper than `k`), plus extra gradients injected directly
    /// on intermediate features. `feature_grads` entries are `(depth j,
    /// dL/dh_j)` with `1 <= j <= k`; gradients never flow into blocks deeper
    /// than `k`.
    pub(crate) fn backward_with_feature_grads(
        &self,
        trace: &ForwardTrace,
        k: usize,
        loss_grad_at_logits: &Matrix,
        feature_grads: &[(usize, Matrix)],
    ) -> Result<GradientSet> {
        self.check_depth(k)?;
        if trace.net_uid != self.uid || trace.net_version != self.version {
            return Err(Error::StaleTrace);
        }
        if k > trace.depth {
            return Err(Error::DepthOutOfRange { depth: k, max: trace.depth });
        }
        if loss_grad_at_logits.rows() != trace.batch_size()
            || loss_grad_at_logits.cols() != self.num_classes
        {
            return Err(Error::ShapeMismatch(format!(
                "logit gradient is {}x{}, expected {}x{}",
                loss_grad_at_logits.rows(),
                loss_grad_at_logits.cols(),
                trace.batch_size(),
                self.num_classes
            )));
        }
        for (j, g) in feature_grads {
            if *j == 0 || *j > k {
                return Err(Error::DepthOutOfRange { depth: *j, max: k });
            }
            if g.rows() != trace.batch_size() || g.cols() != self.hidden_dim {
                return Err(Error::ShapeMismatch("feature gradient shape".into()));
            }
        }

        let mut grads = ParamArrays::zeros(self.input_dim, self.hidden_dim, self.num_classes, self.num_blocks());
        let f_k = trace.feature(k).expect("depth checked");
        grads.head.weight = loss_grad_at_logits.t_matmul(f_k);
        grads.head.bias = loss_grad_at_logits.col_sums();

        // d = dL/dh_j as the loop walks j = k .. 1.
        let mut d = loss_grad_at_logits.matmul(&self.params.head.weight);
        for (j, g) in feature_grads {
            if *j == k {
                d.add_assign(g);
            }
        }
        for j in (1..=k).rev() {
            let block = &self.params.blocks[j - 1];
            let a = &trace.acts[j - 1];
            let h_prev = trace.feature(j - 1).expect("depth checked");

            grads.blocks[j - 1].dense2.weight = d.t_matmul(a);
            grads.blocks[j - 1].dense2.bias = d.col_sums();

            let mut du = d.matmul(&block.dense2.weight);
            // relu mask: branch pre-activation was positive exactly where a > 0
            for (dv, av) in du.data_mut().iter_mut().zip(a.data().iter()) {
                if *av <= 0.0 {
                    *dv = 0.0;
                }
            }
            grads.blocks[j - 1].dense1.weight = du.t_matmul(h_prev);
            grads.blocks[j - 1].dense1.bias = du.col_sums();

            // identity path plus branch path
            d.add_assign(&du.matmul(&block.dense1.weight));
            for (fj, g) in feature_grads {
                if *fj == j - 1 && *fj >= 1 {
                    d.add_assign(g);
                }
            }
        }
        grads.pre.weight = d.t_matmul(&trace.input);
        grads.pre.bias = d.col_sums();
        Ok(GradientSet { depth: k, arrays: grads })
    }

    /// Clone the prefix configuration of depth `k` as a standalone network
    /// with `k` blocks. Pre-layer and head are included.
    pub fn prefix_clone(&self, k: usize) -> Result<ResidualNet> {
        self.check_depth(k)?;
        let params = ParamArrays {
            pre: self.params.pre.clone(),
            blocks: self.params.blocks[..k].to_vec(),
            head: self.params.head.clone(),
        };
        Ok(ResidualNet::from_parts(
            self.input_dim,
            self.hidden_dim,
            self.num_classes,
            params,
            self.seed,
        ))
    }
}

/// One SGD-with-momentum update restricted to the prefix the gradients were
/// computed for: `v <- momentum*v + g + weight_decay*w; w <- w - lr*v`.
/// Velocity buffers of inactive blocks are untouched.
pub fn sgd_step(
    net: &mut ResidualNet,
    velocity: &mut Velocity,
    grads: &GradientSet,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {momentum}")));
    }
    if !(weight_decay.is_finite() && weight_decay >= 0.0) {
        return Err(Error::InvalidConfig(format!("weight decay must be >= 0, got {weight_decay}")));
    }
    let depth = grads.depth;
    if depth > net.num_blocks() {
        return Err(Error::DepthOutOfRange { depth, max: net.num_blocks() });
    }
    for (name, a) in grads.arrays.arrays() {
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient array {name}")));
        }
    }

    let update = |w: &mut DenseLayer, v: &mut DenseLayer, g: &DenseLayer| {
        sgd_slice(w.weight.data_mut(), v.weight.data_mut(), g.weight.data(), lr, momentum, weight_decay);
        sgd_slice(&mut w.bias, &mut v.bias, &g.bias, lr, momentum, weight_decay);
    };

    net.version += 1;
    update(&mut net.params.pre, &mut velocity.arrays.pre, &grads.arrays.pre);
    for j in 0..depth {
        update(
            &mut net.params.blocks[j].dense1,
            &mut velocity.arrays.blocks[j].dense1,
            &grads.arrays.blocks[j].dense1,
        );
        update(
            &mut net.params.blocks[j].dense2,
            &mut velocity.arrays.blocks[j].dense2,
            &grads.arrays.blocks[j].dense2,
        );
    }
    update(&mut net.params.head, &mut velocity.arrays.head, &grads.arrays.head);

    if !net.all_finite() {
        return Err(Error::Diverged("weights became non-finite after update".into()));
    }
    Ok(())
}

fn sgd_slice(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
    for i in 0..w.len() {
        v[i] = momentum * v[i] + g[i] + weight_decay * w[i];
        w[i] -= lr * v[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net() -> ResidualNet {
        init_net(2, 4, 3, 3, 7).unwrap()
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect()).unwrap()
    }

    /// Give every array non-trivial values so gradients flow through the
    /// whole prefix (init leaves branch second layers at zero).
    pub(crate) fn randomize_all(net: &mut ResidualNet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 0.4).unwrap();
        for a in net.params_mut().arrays_mut() {
            for v in a.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_net(2, 8, 3, 4, 7).unwrap();
        let b = init_net(2, 8, 3, 4, 7).unwrap();
        let c = init_net(2, 8, 3, 4, 8).unwrap();
        assert!(a.weights_equal(&b));
        assert!(!a.weights_equal(&c));
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(init_net(0, 8, 3, 4, 7).is_err());
        assert!(init_net(2, 0, 3, 4, 7).is_err());
        assert!(init_net(2, 8, 0, 4, 7).is_err());
        assert!(init_net(2, 8, 3, 0, 7).is_err());
    }

    #[test]
    fn zeroed_branches_make_blocks_identity() {
        let mut net = tiny_net();
        // init already zeroes dense2; zero dense1 too so the branch is
        // exactly zero regardless of bias paths
        for b in net.params_mut().blocks.iter_mut() {
            for v in b.dense1.weight.data_mut() {
                *v = 0.0;
            }
        }
        let x = batch(5, 2, 1);
        let shallow = net.forward_prefix(&x, 1).unwrap();
        let deep = net.forward_prefix(&x, 3).unwrap();
        assert_eq!(shallow.logits(), deep.logits());
    }

    #[test]
    fn prefix_nesting_is_exact() {
        let mut net = tiny_net();
        randomize_all(&mut net, 11);
        let x = batch(4, 2, 2);
        let t2 = net.forward_prefix(&x, 2).unwrap();
        let t3 = net.forward_prefix(&x, 3).unwrap();
        for j in 1..=2 {
            assert_eq!(t2.feature(j).unwrap(), t3.feature(j).unwrap());
        }
    }

    #[test]
    fn forward_matches_hand_arithmetic_one_block() {
        // 1-block net, 2x2 weights set by hand, single input.
        let mut net = init_net(2, 2, 2, 1, 0).unwrap();
        {
            let p = net.params_mut();
            p.pre.weight = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
            p.pre.bias = vec![0.5, -0.5];
            p.blocks[0].dense1.weight = Matrix::from_vec(2, 2, vec![1.0, -1.0, 2.0, 0.0]).unwrap();
            p.blocks[0].dense1.bias = vec![0.0, 1.0];
            p.blocks[0].dense2.weight = Matrix::from_vec(2, 2, vec![0.5, 0.5, -1.0, 1.0]).unwrap();
            p.blocks[0].dense2.bias = vec![0.25, 0.0];
            p.head.weight = Matrix::from_vec(2, 2, vec![1.0, 2.0, -1.0, 1.0]).unwrap();
            p.head.bias = vec![0.0, 1.0];
        }
        let x = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        // h0 = [1.5, 1.5]; u = [1.5-1.5, 3.0+1.0] = [0, 4]; a = [0, 4]
        // branch = [0*0.5+4*0.5+0.25, 0*(-1)+4*1+0] = [2.25, 4.0]
        // h1 = [3.75, 5.5]
        // logits = [3.75+11, -3.75+5.5+1] = [14.75, 2.75]
        let t = net.forward_prefix(&x, 1).unwrap();
        assert_eq!(t.logits().row(0), &[14.75, 2.75]);
    }

    #[test]
    fn backward_matches_central_finite_differences() {
        let mut net = init_net(3, 8, 3, 4, 21).unwrap();
        randomize_all(&mut net, 22);
        let x = batch(4, 3, 3);
        let k = 4;
        // scalar loss: sum of squares of logits / 2, so dL/dz = z
        let loss_of = |n: &ResidualNet| -> f64 {
            let t = n.forward_prefix(&x, k).unwrap();
            t.logits().data().iter().map(|v| 0.5 * v * v).sum()
        };
        let trace = net.forward_prefix(&x, k).unwrap();
        let dlogits = trace.logits().clone();
        let grads = net.backward_prefix(&trace, &dlogits, k).unwrap();
        let flat = grads.flat();
        let h = 1e-5;
        let base = net.flat_params();
        for i in 0..base.len() {
            let mut plus = net.clone();
            plus.set_flat_param(i, base[i] + h);
            let mut minus = net.clone();
            minus.set_flat_param(i, base[i] - h);
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let denom = flat[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (flat[i] - fd).abs() / denom <= 1e-4,
                "param {i}: analytic {} vs fd {fd}",
                flat[i]
            );
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut net = tiny_net();
        randomize_all(&mut net, 5);
        let x = batch(3, 2, 9);
        let trace = net.forward_prefix(&x, 2).unwrap();
        let zeros = Matrix::zeros(3, 3);
        let grads = net.backward_prefix(&trace, &zeros, 2).unwrap();
        assert!(grads.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inactive_blocks_get_exactly_zero_gradient() {
        let mut net = tiny_net();
        randomize_all(&mut net, 6);
        let x = batch(3, 2, 10);
        let trace = net.forward_prefix(&x, 1).unwrap();
        let dlogits = trace.logits().clone();
        let grads = net.backward_prefix(&trace, &dlogits, 1).unwrap();
        for b in &grads.arrays.blocks[1..] {
            assert!(b.dense1.weight.data().iter().all(|&v| v == 0.0));
            assert!(b.dense1.bias.iter().all(|&v| v == 0.0));
            assert!(b.dense2.weight.data().iter().all(|&v| v == 0.0));
            assert!(b.dense2.bias.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut net = tiny_net();
        let x = batch(2, 2, 4);
        let trace = net.forward_prefix(&x, 2).unwrap();
        net.set_flat_param(0, 1.0);
        let dlogits = Matrix::zeros(2, 3);
        assert!(matches!(net.backward_prefix(&trace, &dlogits, 2), Err(Error::StaleTrace)));
    }

    #[test]
    fn sgd_plain_and_momentum_recursions() {
        let net = tiny_net();
        let x = batch(2, 2, 8);
        let trace = net.forward_prefix(&x, 3).unwrap();
        let dlogits = trace.logits().clone();
        let grads = net.backward_prefix(&trace, &dlogits, 3).unwrap();

        // momentum = 0, wd = 0: w' = w - lr*g
        let mut plain = net.clone();
        let mut vel = Velocity::zeros(&plain);
        sgd_step(&mut plain, &mut vel, &grads, 0.1, 0.0, 0.0).unwrap();
        let w0 = net.flat_params();
        let g = grads.flat();
        let w1 = plain.flat_params();
        for i in 0..w0.len() {
            assert_eq!(w1[i], w0[i] - 0.1 * g[i]);
        }

        // lr = 0: unchanged
        let mut frozen = net.clone();
        let mut vel = Velocity::zeros(&frozen);
        sgd_step(&mut frozen, &mut vel, &grads, 0.0, 0.9, 0.0).unwrap();
        assert!(frozen.weights_equal(&net));

        // two momentum steps on a fixed gradient:
        // v1 = g, w1 = w0 - lr*g; v2 = 0.9*g + g, w2 = w1 - lr*1.9*g
        let mut m = net.clone();
        let mut vel = Velocity::zeros(&m);
        sgd_step(&mut m, &mut vel, &grads, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut m, &mut vel, &grads, 0.1, 0.9, 0.0).unwrap();
        let w2 = m.flat_params();
        for i in 0..w0.len() {
            let expect = w0[i] - 0.1 * g[i] - 0.1 * 1.9 * g[i];
            assert!((w2[i] - expect).abs() <= 1e-15 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn sgd_leaves_inactive_blocks_untouched() {
        let mut net = tiny_net();
        randomize_all(&mut net, 13);
        let before = net.clone();
        let x = batch(2, 2, 14);
        let trace = net.forward_prefix(&x, 1).unwrap();
        let dlogits = trace.logits().clone();
        let grads = net.backward_prefix(&trace, &dlogits, 1).unwrap();
        let mut vel = Velocity::zeros(&net);
        sgd_step(&mut net, &mut vel, &grads, 0.05, 0.9, 0.01).unwrap();
        for j in 1..3 {
            assert_eq!(net.params().blocks[j], before.params().blocks[j]);
            assert_eq!(vel.arrays.blocks[j], ResidualBlock::zeros(4));
        }
        assert_ne!(net.params().blocks[0], before.params().blocks[0]);
    }

    #[test]
    fn sgd_rejects_nan_gradients() {
        let mut net = tiny_net();
        let x = batch(2, 2, 15);
        let trace = net.forward_prefix(&x, 2).unwrap();
        let dlogits = trace.logits().clone();
        let mut grads = net.backward_prefix(&trace, &dlogits, 2).unwrap();
        grads.arrays.pre.bias[0] = f64::NAN;
        let mut vel = Velocity::zeros(&net);
        let err = sgd_step(&mut net, &mut vel, &grads, 0.1, 0.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn nets_are_send() {
        fn assert_send<T: Send>() {}
        assert_send::<ResidualNet>();
        assert_send::<ForwardTrace>();
        assert_send::<GradientSet>();
    }
}
