//! External-feature branch: Linear -> ReLU -> BatchNorm -> FC, in exactly
//! that order, with running statistics for evaluation mode.

use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::nn::{uniform_init, ParamVisitor, ParamVisitorMut};
use crate::tensor::{BnMode, BnStats, Tape, Tensor, TensorId};

/// Running-average momentum for batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    /// Non-learnable running statistics, `[1 x d]` each.
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut ChaCha20Rng) -> Self {
        MlpParams {
            w1: uniform_init(vec![d_in, d_hidden], d_in, rng),
            b1: uniform_init(vec![1, d_hidden], d_in, rng),
            bn_gamma: Tensor::new(vec![1, d_hidden], vec![1.0; d_hidden]).unwrap(),
            bn_beta: Tensor::zeros(vec![1, d_hidden]),
            running_mean: Tensor::zeros(vec![1, d_hidden]),
            running_var: Tensor::new(vec![1, d_hidden], vec![1.0; d_hidden]).unwrap(),
            w2: uniform_init(vec![d_hidden, d_out], d_hidden, rng),
            b2: uniform_init(vec![1, d_out], d_hidden, rng),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut ParamVisitor) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.bn_gamma"), &self.bn_gamma);
        f(format!("{prefix}.bn_beta"), &self.bn_beta);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.bn_gamma"), &mut self.bn_gamma);
        f(format!("{prefix}.bn_beta"), &mut self.bn_beta);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }

    /// Running statistics, saved with checkpoints but never optimized.
    pub fn for_each_buffer(&self, prefix: &str, f: &mut ParamVisitor) {
        f(format!("{prefix}.running_mean"), &self.running_mean);
        f(format!("{prefix}.running_var"), &self.running_var);
    }

    pub fn for_each_buffer_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }

    pub fn bind(&self, tape: &mut Tape) -> ExternalMlpBinding {
        ExternalMlpBinding {
            w1: tape.var(self.w1.clone()),
            b1: tape.var(self.b1.clone()),
            bn_gamma: tape.var(self.bn_gamma.clone()),
            bn_beta: tape.var(self.bn_beta.clone()),
            w2: tape.var(self.w2.clone()),
            b2: tape.var(self.b2.clone()),
        }
    }

    /// Fold batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &BnStats) {
        for (r, &b) in self.running_mean.data.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in self.running_var.data.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExternalMlpBinding {
    pub w1: TensorId,
    pub b1: TensorId,
    pub bn_gamma: TensorId,
    pub bn_beta: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

impl ExternalMlpBinding {
    pub fn from_ids(next: &mut dyn FnMut() -> TensorId) -> Self {
        ExternalMlpBinding {
            w1: next(),
            b1: next(),
            bn_gamma: next(),
            bn_beta: next(),
            w2: next(),
            b2: next(),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(TensorId)) {
        f(self.w1);
        f(self.b1);
        f(self.bn_gamma);
        f(self.bn_beta);
        f(self.w2);
        f(self.b2);
    }
}

/// `FC(BN(ReLU(Linear1(x))))` over a `[B x d_in]` batch. In training mode
/// batch statistics are used and returned so the caller can update the
/// running averages; in eval mode the provided running statistics apply.
pub fn external_mlp(
    tape: &mut Tape,
    x: TensorId,
    binding: &ExternalMlpBinding,
    running: (&[f64], &[f64]),
    training: bool,
) -> Result<(TensorId, Option<BnStats>)> {
    let lin1 = tape.matmul(x, binding.w1)?;
    let pre = tape.add_row(lin1, binding.b1)?;
    let act = tape.relu(pre);
    let mode = if training {
        BnMode::Batch
    } else {
        BnMode::Running {
            mean: running.0.to_vec(),
            var: running.1.to_vec(),
        }
    };
    let (bn, stats) = tape.batch_norm(act, binding.bn_gamma, binding.bn_beta, mode, 1e-5)?;
    let lin2 = tape.matmul(bn, binding.w2)?;
    let out = tape.add_row(lin2, binding.b2)?;
    Ok((out, training.then_some(stats)))
}
