//! Adam with bias correction over the flattened parameter vector.

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Per-parameter first/second moments and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }
}

/// Mapping from flat offsets back to parameter names, for diagnostics.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    /// `(name, end_offset)` per tensor, in flatten order.
    pub spans: Vec<(String, usize)>,
}

impl ParamLayout {
    pub fn of(params: &crate::model::ModelParams) -> Self {
        let mut spans = Vec::new();
        let mut offset = 0;
        params.for_each(&mut |name, t| {
            offset += t.data.len();
            spans.push((name, offset));
        });
        ParamLayout { spans }
    }

    pub fn name_of(&self, flat_index: usize) -> &str {
        for (name, end) in &self.spans {
            if flat_index < *end {
                return name;
            }
        }
        "<unknown>"
    }
}

/// One Adam update in place. Aborts with the offending parameter's name on a
/// non-finite gradient.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &TrainConfig,
    layout: &ParamLayout,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient in parameter '{}' (flat index {bad})",
            layout.name_of(bad)
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}
