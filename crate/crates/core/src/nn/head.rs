//! Fusion head: concatenate the three branch embeddings, layer-normalize,
//! apply dropout (training only) and squash through a sigmoid FC.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::{uniform_init, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionHeadParams {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    /// `[fused_width x 1]`
    pub w: Tensor,
    pub b: Tensor,
}

impl FusionHeadParams {
    pub fn init(fused_width: usize, rng: &mut ChaCha20Rng) -> Self {
        FusionHeadParams {
            ln_gamma: Tensor::new(vec![1, fused_width], vec![1.0; fused_width]).unwrap(),
            ln_beta: Tensor::zeros(vec![1, fused_width]),
            w: uniform_init(vec![fused_width, 1], fused_width, rng),
            b: uniform_init(vec![1, 1], fused_width, rng),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut ParamVisitor) {
        f(format!("{prefix}.ln_gamma"), &self.ln_gamma);
        f(format!("{prefix}.ln_beta"), &self.ln_beta);
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        f(format!("{prefix}.ln_gamma"), &mut self.ln_gamma);
        f(format!("{prefix}.ln_beta"), &mut self.ln_beta);
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }

    pub fn bind(&self, tape: &mut Tape) -> FusionHeadBinding {
        FusionHeadBinding {
            ln_gamma: tape.var(self.ln_gamma.clone()),
            ln_beta: tape.var(self.ln_beta.clone()),
            w: tape.var(self.w.clone()),
            b: tape.var(self.b.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionHeadBinding {
    pub ln_gamma: TensorId,
    pub ln_beta: TensorId,
    pub w: TensorId,
    pub b: TensorId,
}

impl FusionHeadBinding {
    pub fn from_ids(next: &mut dyn FnMut() -> TensorId) -> Self {
        FusionHeadBinding {
            ln_gamma: next(),
            ln_beta: next(),
            w: next(),
            b: next(),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(TensorId)) {
        f(self.ln_gamma);
        f(self.ln_beta);
        f(self.w);
        f(self.b);
    }
}

/// Fuse `[B x *]` temporal, spatial and external embeddings into accident
/// probabilities `[B x 1]`. All three branches are mandatory. In training
/// mode a dropout mask is drawn from `rng` (inverted dropout, scale
/// `1/(1-p)`).
pub fn fusion_head(
    tape: &mut Tape,
    h_temp: TensorId,
    h_spatial: TensorId,
    z_external: TensorId,
    binding: &FusionHeadBinding,
    dropout_p: f64,
    training: bool,
    rng: &mut ChaCha20Rng,
) -> Result<TensorId> {
    for (name, id) in [
        ("temporal", h_temp),
        ("spatial", h_spatial),
        ("external", z_external),
    ] {
        let cols = tape
            .value(id)
            .dims2()
            .ok_or_else(|| Error::Contract(format!("fusion {name} branch must be a matrix")))?
            .1;
        if cols == 0 {
            return Err(Error::Contract(format!(
                "fusion {name} branch is empty; all three branches are mandatory"
            )));
        }
    }
    let fused = tape.concat(&[h_temp, h_spatial, z_external], 1)?;
    let normed = tape.layer_norm(fused, binding.ln_gamma, binding.ln_beta, 1e-5)?;
    let dropped = if training && dropout_p > 0.0 {
        let keep = 1.0 - dropout_p;
        let mask: Vec<f64> = (0..tape.value(normed).numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        tape.dropout_mask(normed, mask)?
    } else {
        normed
    };
    let logits = tape.matmul(dropped, binding.w)?;
    let shifted = tape.add_row(logits, binding.b)?;
    Ok(tape.sigmoid(shifted))
}
