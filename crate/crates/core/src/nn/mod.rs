//! Learnable building blocks: graph attention, GRU cells, attention pooling,
//! the external-feature MLP and the fusion head.
//!
//! Parameters live outside any tape as plain [`Tensor`]s. Before a forward
//! pass they are bound onto a tape (`bind`), which yields a `*Binding` struct
//! of [`TensorId`]s; after `backward`, gradients are read back through the
//! binding in the same traversal order.

mod gat;
mod gru;
mod head;
mod mlp;
pub mod params_io;
mod pool;

pub use gat::{gat_forward, multi_scale_gat, AttentionPairs, GatLayerBinding, GatLayerParams, GatOutput};
pub use gru::{bigru_forward, bigru_forward_steps, gru_cell, BiGruLayerBinding, BiGruLayerParams, BiGruStack, BiGruStackBinding, GruBinding, GruParams};
pub use head::{fusion_head, FusionHeadBinding, FusionHeadParams};
pub use mlp::{external_mlp, ExternalMlpBinding, MlpParams, BN_MOMENTUM};
pub use pool::{attention_pool, AttentionPoolBinding, AttentionPoolParams};

use rand_chacha::ChaCha20Rng;

use crate::tensor::Tensor;

/// LeakyReLU slope used for attention logits.
pub const ATTENTION_LEAK: f64 = 0.2;

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization.
pub fn uniform_init(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha20Rng) -> Tensor {
    use rand::Rng;
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.gen::<f64>().mul_add(2.0 * bound, -bound))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Named traversal callback over parameter tensors.
pub type ParamVisitor<'a> = dyn FnMut(String, &Tensor) + 'a;
/// Mutable counterpart of [`ParamVisitor`].
pub type ParamVisitorMut<'a> = dyn FnMut(String, &mut Tensor) + 'a;
