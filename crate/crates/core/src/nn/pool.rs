//! Attention pooling: collapse node embeddings to one graph-level vector
//! with learned softmax weights.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::{uniform_init, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPoolParams {
    /// `[d x d]` projection applied before scoring.
    pub w_p: crate::tensor::Tensor,
    /// `[d x 1]` scoring vector.
    pub v: crate::tensor::Tensor,
}

impl AttentionPoolParams {
    pub fn init(d: usize, rng: &mut ChaCha20Rng) -> Self {
        AttentionPoolParams {
            w_p: uniform_init(vec![d, d], d, rng),
            v: uniform_init(vec![d, 1], d, rng),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut ParamVisitor) {
        f(format!("{prefix}.w_p"), &self.w_p);
        f(format!("{prefix}.v"), &self.v);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(format!("{prefix}.w_p"), &mut self.w_p);
        f(format!("{prefix}.v"), &mut self.v);
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionPoolBinding {
        AttentionPoolBinding {
            w_p: tape.var(self.w_p.clone()),
            v: tape.var(self.v.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionPoolBinding {
    pub w_p: TensorId,
    pub v: TensorId,
}

impl AttentionPoolBinding {
    pub fn from_ids(next: &mut dyn FnMut() -> TensorId) -> Self {
        AttentionPoolBinding {
            w_p: next(),
            v: next(),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(TensorId)) {
        f(self.w_p);
        f(self.v);
    }
}

/// `score_i = v . tanh(W_p h_i)`, `beta = softmax(score)`,
/// `pooled = sum_i beta_i h_i`. Returns `(pooled [1 x d], beta [n x 1])`.
pub fn attention_pool(
    tape: &mut Tape,
    node_embs: TensorId,
    binding: &AttentionPoolBinding,
) -> Result<(TensorId, TensorId)> {
    let (n, _) = tape
        .value(node_embs)
        .dims2()
        .ok_or_else(|| Error::Contract("attention_pool needs [n x d] embeddings".into()))?;
    if n == 0 {
        return Err(Error::Precondition(
            "attention_pool over zero nodes".into(),
        ));
    }
    let proj = tape.matmul(node_embs, binding.w_p)?;
    let act = tape.tanh(proj);
    let scores = tape.matmul(act, binding.v)?;
    let beta = tape.segment_softmax(scores, vec![0; n])?;
    let beta_row = tape.transpose(beta)?;
    let pooled = tape.matmul(beta_row, node_embs)?;
    Ok((pooled, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_multi, Tensor};
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_node_passes_through() {
        let mut r = ChaCha20Rng::seed_from_u64(1);
        let p = AttentionPoolParams::init(3, &mut r);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let h = tape.input(Tensor::new(vec![1, 3], vec![0.4, -0.2, 1.0]).unwrap());
        let (pooled, beta) = attention_pool(&mut tape, h, &b).unwrap();
        assert_eq!(tape.data(beta), &[1.0]);
        assert_eq!(tape.data(pooled), &[0.4, -0.2, 1.0]);
    }

    #[test]
    fn identical_embeddings_get_uniform_weights() {
        let mut r = ChaCha20Rng::seed_from_u64(2);
        let p = AttentionPoolParams::init(2, &mut r);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let h = tape.input(Tensor::new(vec![4, 2], [[0.5, -1.0]; 4].concat()).unwrap());
        let (_, beta) = attention_pool(&mut tape, h, &b).unwrap();
        for &w in tape.data(beta) {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_input_is_a_precondition_error() {
        let mut r = ChaCha20Rng::seed_from_u64(3);
        let p = AttentionPoolParams::init(2, &mut r);
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let h = tape.input(Tensor::zeros(vec![0, 2]));
        assert!(matches!(
            attention_pool(&mut tape, h, &b),
            Err(crate::Error::Precondition(_))
        ));
    }

    #[test]
    fn pooled_matches_weighted_sum_oracle() {
        let mut r = ChaCha20Rng::seed_from_u64(4);
        let d = 3;
        let n = 5;
        let p = AttentionPoolParams::init(d, &mut r);
        let data: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let h = tape.input(Tensor::new(vec![n, d], data.clone()).unwrap());
        let (pooled, beta) = attention_pool(&mut tape, h, &b).unwrap();
        let betas = tape.data(beta).to_vec();
        assert!((betas.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for c in 0..d {
            let want: f64 = (0..n).map(|i| betas[i] * data[i * d + c]).sum();
            assert!((tape.data(pooled)[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_passes_grad_check() {
        let mut r = ChaCha20Rng::seed_from_u64(5);
        let p = AttentionPoolParams::init(2, &mut r);
        let embs = Tensor::new(
            vec![3, 2],
            (0..6).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let err = grad_check_multi(
            |tape, ids| {
                let b = AttentionPoolBinding {
                    w_p: ids[1],
                    v: ids[2],
                };
                let (pooled, _) = attention_pool(tape, ids[0], &b)?;
                let sq = tape.mul(pooled, pooled)?;
                Ok(tape.sum(sq))
            },
            &[embs, p.w_p.clone(), p.v.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
