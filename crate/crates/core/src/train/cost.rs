//! Closed-form computational cost model.
//!
//! Spatial attention costs `S*H*(E*d + N*d^2)` units per timestep (edge-wise
//! message passing plus node-wise transformations); the temporal GRU adds
//! `T*N*d^2`. Cost therefore scales linearly in S, H and T and near-linearly
//! in E for sparse graphs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub scales: usize,
    pub heads: usize,
    pub hidden: usize,
    pub lookback: usize,
    pub num_nodes: u64,
    pub num_edges: u64,
    /// `S*H*(E*d + N*d^2)`
    pub spatial_units_per_step: u64,
    /// `T*N*d^2`
    pub temporal_units: u64,
    /// `T * spatial_units_per_step + temporal_units`
    pub total_units: u64,
    /// Total at S = 1, H = 1 with everything else fixed.
    pub baseline_total_units: u64,
    pub ratio_to_baseline: f64,
}

pub fn estimate_cost(config: &ModelConfig, num_nodes: u64, num_edges: u64) -> Result<CostReport> {
    config.validate()?;
    if num_nodes == 0 || num_edges == 0 {
        return Err(Error::Range(format!(
            "cost model needs positive graph sizes, got N={num_nodes}, E={num_edges}"
        )));
    }
    let d = config.hidden as u64;
    let t = config.lookback as u64;
    let spatial = |s: u64, h: u64| s * h * (num_edges * d + num_nodes * d * d);
    let temporal = t * num_nodes * d * d;
    let spatial_units = spatial(config.scales as u64, config.heads as u64);
    let total = t * spatial_units + temporal;
    let baseline = t * spatial(1, 1) + temporal;
    Ok(CostReport {
        scales: config.scales,
        heads: config.heads,
        hidden: config.hidden,
        lookback: config.lookback,
        num_nodes,
        num_edges,
        spatial_units_per_step: spatial_units,
        temporal_units: temporal,
        total_units: total,
        baseline_total_units: baseline,
        ratio_to_baseline: total as f64 / baseline as f64,
    })
}

/// Plain-text table for terminal output.
pub fn format_cost_table(r: &CostReport) -> String {
    let mut out = String::new();
    out.push_str("cost model (abstract units)\n");
    out.push_str(&format!(
        "  config              S={} H={} d={} T={}\n",
        r.scales, r.heads, r.hidden, r.lookback
    ));
    out.push_str(&format!(
        "  graph               N={} E={}\n",
        r.num_nodes, r.num_edges
    ));
    out.push_str(&format!(
        "  spatial per step    {}\n",
        r.spatial_units_per_step
    ));
    out.push_str(&format!("  temporal (GRU)      {}\n", r.temporal_units));
    out.push_str(&format!("  total               {}\n", r.total_units));
    out.push_str(&format!(
        "  baseline (S=1,H=1)  {}\n",
        r.baseline_total_units
    ));
    out.push_str(&format!("  ratio               {:.4}\n", r.ratio_to_baseline));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(scales: usize, heads: usize, hidden: usize, lookback: usize) -> ModelConfig {
        ModelConfig {
            scales,
            heads,
            hidden,
            lookback,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn worked_example() {
        // S=1, H=1, E=10, N=5, d=4, T=1
        let r = estimate_cost(&config(1, 1, 4, 1), 5, 10).unwrap();
        assert_eq!(r.spatial_units_per_step, 10 * 4 + 5 * 16);
        assert_eq!(r.spatial_units_per_step, 120);
        assert_eq!(r.temporal_units, 80);
        assert_eq!(r.total_units, 200);
        assert_eq!(r.ratio_to_baseline, 1.0);
    }

    #[test]
    fn tripling_scales_triples_the_spatial_term() {
        let base = estimate_cost(&config(1, 4, 32, 24), 100, 300).unwrap();
        let tripled = estimate_cost(&config(3, 4, 32, 24), 100, 300).unwrap();
        assert_eq!(tripled.spatial_units_per_step, 3 * base.spatial_units_per_step);
    }

    #[test]
    fn unit_width_reduces_to_edge_plus_node_count() {
        let r = estimate_cost(&config(2, 3, 1, 5), 7, 11).unwrap();
        assert_eq!(r.spatial_units_per_step, 2 * 3 * (11 + 7));
    }

    #[test]
    fn zero_sizes_are_range_errors() {
        assert!(matches!(
            estimate_cost(&config(1, 1, 4, 1), 0, 10),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            estimate_cost(&config(1, 1, 4, 1), 5, 0),
            Err(Error::Range(_))
        ));
    }
}
