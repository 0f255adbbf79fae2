//! Graph attention: additive scoring over explicit (target, source) pairs,
//! per-target softmax normalization, multi-head concatenation, and the
//! multi-scale variant that attends over hop rings separately.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::{uniform_init, ParamVisitor, ParamVisitorMut, ATTENTION_LEAK};
use crate::tensor::{Tape, Tensor, TensorId};

/// One attention head: shared transform plus target/source score vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GatHeadParams {
    /// `[d_in x d_head]`
    pub w: Tensor,
    /// `[d_head x 1]`, scores the transformed target embedding.
    pub a_src: Tensor,
    /// `[d_head x 1]`, scores the transformed source embedding.
    pub a_dst: Tensor,
}

/// Multi-head GAT layer; heads are concatenated, so the output width is
/// `heads * d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams {
    pub heads: Vec<GatHeadParams>,
    pub d_in: usize,
    pub d_head: usize,
}

impl GatLayerParams {
    pub fn init(d_in: usize, d_head: usize, heads: usize, rng: &mut ChaCha20Rng) -> Self {
        let heads = (0..heads)
            .map(|_| GatHeadParams {
                w: uniform_init(vec![d_in, d_head], d_in, rng),
                a_src: uniform_init(vec![d_head, 1], d_head, rng),
                a_dst: uniform_init(vec![d_head, 1], d_head, rng),
            })
            .collect();
        GatLayerParams { heads, d_in, d_head }
    }

    pub fn output_width(&self) -> usize {
        self.heads.len() * self.d_head
    }

    pub fn for_each(&self, prefix: &str, f: &mut ParamVisitor) {
        for (h, head) in self.heads.iter().enumerate() {
            f(format!("{prefix}.h{h}.w"), &head.w);
            f(format!("{prefix}.h{h}.a_src"), &head.a_src);
            f(format!("{prefix}.h{h}.a_dst"), &head.a_dst);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        for (h, head) in self.heads.iter_mut().enumerate() {
            f(format!("{prefix}.h{h}.w"), &mut head.w);
            f(format!("{prefix}.h{h}.a_src"), &mut head.a_src);
            f(format!("{prefix}.h{h}.a_dst"), &mut head.a_dst);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> GatLayerBinding {
        GatLayerBinding {
            heads: self
                .heads
                .iter()
                .map(|h| GatHeadBinding {
                    w: tape.var(h.w.clone()),
                    a_src: tape.var(h.a_src.clone()),
                    a_dst: tape.var(h.a_dst.clone()),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatHeadBinding {
    pub w: TensorId,
    pub a_src: TensorId,
    pub a_dst: TensorId,
}

#[derive(Debug, Clone)]
pub struct GatLayerBinding {
    pub heads: Vec<GatHeadBinding>,
}

impl GatLayerBinding {
    /// Rebuild a binding from ids emitted in `for_each` order.
    pub fn from_ids(heads: usize, next: &mut dyn FnMut() -> TensorId) -> Self {
        GatLayerBinding {
            heads: (0..heads)
                .map(|_| GatHeadBinding {
                    w: next(),
                    a_src: next(),
                    a_dst: next(),
                })
                .collect(),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(TensorId)) {
        for h in &self.heads {
            f(h.w);
            f(h.a_src);
            f(h.a_dst);
        }
    }
}

/// Explicit attention edges: `targets[p]` attends to `sources[p]`. Self-pairs
/// are always included so every softmax segment is non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPairs {
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
    pub num_nodes: usize,
}

impl AttentionPairs {
    /// Self-pair plus sorted direct neighbors, for every node.
    pub fn one_hop(neighbors: &[Vec<usize>]) -> Self {
        let n = neighbors.len();
        let mut targets = Vec::new();
        let mut sources = Vec::new();
        for (i, nb) in neighbors.iter().enumerate() {
            targets.push(i);
            sources.push(i);
            for &j in nb {
                targets.push(i);
                sources.push(j);
            }
        }
        AttentionPairs {
            targets,
            sources,
            num_nodes: n,
        }
    }

    /// Self-pair plus the ring at exact distance `s` around each node.
    /// `rings[i][s-1]` must be sorted (see `Subgraph::local_rings`).
    pub fn ring(rings: &[Vec<Vec<usize>>], s: usize) -> Self {
        let n = rings.len();
        let mut targets = Vec::new();
        let mut sources = Vec::new();
        for (i, per_node) in rings.iter().enumerate() {
            targets.push(i);
            sources.push(i);
            for &j in &per_node[s - 1] {
                targets.push(i);
                sources.push(j);
            }
        }
        AttentionPairs {
            targets,
            sources,
            num_nodes: n,
        }
    }

    fn validate(&self) -> Result<()> {
        let mut covered = vec![false; self.num_nodes];
        if self.targets.len() != self.sources.len() {
            return Err(Error::Contract(
                "attention pair lists have different lengths".into(),
            ));
        }
        for (&t, &s) in self.targets.iter().zip(&self.sources) {
            if t >= self.num_nodes || s >= self.num_nodes {
                return Err(Error::Range(format!(
                    "attention pair ({t}, {s}) outside 0..{}",
                    self.num_nodes
                )));
            }
            covered[t] = true;
        }
        if let Some(node) = covered.iter().position(|&c| !c) {
            return Err(Error::Contract(format!(
                "node {node} has no attention pairs (missing self-pair)"
            )));
        }
        Ok(())
    }
}

/// GAT layer result: concatenated head outputs plus each head's attention
/// weights (aligned with the pair list) for inspection.
#[derive(Debug, Clone)]
pub struct GatOutput {
    pub out: TensorId,
    pub alphas: Vec<TensorId>,
}

/// Multi-head graph attention over explicit pairs:
/// `e = leaky_relu(a_src . W h_target + a_dst . W h_source)`, softmax over
/// the sources of each target, ELU on the aggregated messages.
pub fn gat_forward(
    tape: &mut Tape,
    node_feats: TensorId,
    pairs: &AttentionPairs,
    binding: &GatLayerBinding,
) -> Result<GatOutput> {
    pairs.validate()?;
    let n = tape
        .value(node_feats)
        .dims2()
        .ok_or_else(|| Error::Contract("gat_forward needs [n x d] features".into()))?
        .0;
    if n != pairs.num_nodes {
        return Err(Error::Dimension {
            op: "gat_forward",
            lhs: tape.shape(node_feats).to_vec(),
            rhs: vec![pairs.num_nodes],
        });
    }
    let mut head_outs = Vec::with_capacity(binding.heads.len());
    let mut alphas = Vec::with_capacity(binding.heads.len());
    for head in &binding.heads {
        let wh = tape.matmul(node_feats, head.w)?;
        let src_score = tape.matmul(wh, head.a_src)?;
        let dst_score = tape.matmul(wh, head.a_dst)?;
        let e_t = tape.gather_rows(src_score, pairs.targets.clone())?;
        let e_s = tape.gather_rows(dst_score, pairs.sources.clone())?;
        let e_sum = tape.add(e_t, e_s)?;
        let e = tape.leaky_relu(e_sum, ATTENTION_LEAK);
        let alpha = tape.segment_softmax(e, pairs.targets.clone())?;
        let msgs = tape.gather_rows(wh, pairs.sources.clone())?;
        let weighted = tape.scale_rows(msgs, alpha)?;
        let agg = tape.segment_sum_rows(weighted, pairs.targets.clone(), n)?;
        head_outs.push(tape.elu(agg));
        alphas.push(alpha);
    }
    let out = tape.concat(&head_outs, 1)?;
    Ok(GatOutput { out, alphas })
}

/// Run one GAT layer per hop scale (ring `s = 1..=S`) and concatenate the
/// per-scale embeddings. Scales whose ring is empty degrade to
/// self-attention.
pub fn multi_scale_gat(
    tape: &mut Tape,
    node_feats: TensorId,
    rings: &[Vec<Vec<usize>>],
    bindings: &[GatLayerBinding],
) -> Result<GatOutput> {
    if bindings.is_empty() {
        return Err(Error::Precondition(
            "multi_scale_gat needs at least one scale".into(),
        ));
    }
    let mut outs = Vec::with_capacity(bindings.len());
    let mut alphas = Vec::new();
    for (scale, binding) in bindings.iter().enumerate() {
        let pairs = AttentionPairs::ring(rings, scale + 1);
        let got = gat_forward(tape, node_feats, &pairs, binding)?;
        outs.push(got.out);
        alphas.extend(got.alphas);
    }
    let out = tape.concat(&outs, 1)?;
    Ok(GatOutput { out, alphas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_adjacency, khop_subgraph, RoadGraph, SegmentAttrs};
    use crate::tensor::{grad_check_multi, Tensor};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn rand_feats(n: usize, d: usize, rng: &mut ChaCha20Rng) -> Tensor {
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_node_self_pair_identity_transform() {
        // W = I, attention vectors zero: alpha = 1, output = elu(h)
        let mut tape = Tape::new();
        let h = tape.input(Tensor::new(vec![1, 2], vec![0.5, -0.8]).unwrap());
        let binding = GatLayerBinding {
            heads: vec![GatHeadBinding {
                w: tape.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
                a_src: tape.input(Tensor::zeros(vec![2, 1])),
                a_dst: tape.input(Tensor::zeros(vec![2, 1])),
            }],
        };
        let pairs = AttentionPairs {
            targets: vec![0],
            sources: vec![0],
            num_nodes: 1,
        };
        let got = gat_forward(&mut tape, h, &pairs, &binding).unwrap();
        assert_eq!(tape.data(got.alphas[0]), &[1.0]);
        let out = tape.data(got.out);
        assert!((out[0] - 0.5).abs() < 1e-15);
        assert!((out[1] - ((-0.8f64).exp_m1())).abs() < 1e-15);
    }

    #[test]
    fn symmetric_nodes_get_identical_outputs() {
        let mut r = rng(7);
        let mut tape = Tape::new();
        let params = GatLayerParams::init(3, 4, 2, &mut r);
        let binding = params.bind(&mut tape);
        // two nodes with identical features, connected
        let row: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut data = row.clone();
        data.extend_from_slice(&row);
        let feats = tape.input(Tensor::new(vec![2, 3], data).unwrap());
        let pairs = AttentionPairs::one_hop(&[vec![1], vec![0]]);
        let got = gat_forward(&mut tape, feats, &pairs, &binding).unwrap();
        let out = tape.data(got.out);
        let (a, b) = out.split_at(out.len() / 2);
        assert_eq!(a, b);
    }

    #[test]
    fn missing_self_pair_is_a_contract_error() {
        let mut tape = Tape::new();
        let feats = tape.input(Tensor::zeros(vec![2, 2]));
        let binding = GatLayerBinding {
            heads: vec![GatHeadBinding {
                w: tape.input(Tensor::zeros(vec![2, 2])),
                a_src: tape.input(Tensor::zeros(vec![2, 1])),
                a_dst: tape.input(Tensor::zeros(vec![2, 1])),
            }],
        };
        let pairs = AttentionPairs {
            targets: vec![0],
            sources: vec![1],
            num_nodes: 2,
        };
        let err = gat_forward(&mut tape, feats, &pairs, &binding).unwrap_err();
        assert!(err.to_string().contains("node 1"), "{err}");
    }

    /// Independent dense re-implementation of a GAT layer on a 4-node star.
    #[test]
    fn matches_dense_oracle_on_star() {
        let mut r = rng(11);
        let d_in = 3;
        let d_head = 2;
        let heads = 2;
        let params = GatLayerParams::init(d_in, d_head, heads, &mut r);
        let feats = rand_feats(4, d_in, &mut r);
        // star: 0 is the hub
        let neighbors = vec![vec![1, 2, 3], vec![0], vec![0], vec![0]];
        let pairs = AttentionPairs::one_hop(&neighbors);

        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let f_id = tape.input(feats.clone());
        let got = gat_forward(&mut tape, f_id, &pairs, &binding).unwrap();
        let ours = tape.data(got.out).to_vec();

        // dense oracle
        let leaky = |x: f64| if x >= 0.0 { x } else { 0.2 * x };
        let elu = |x: f64| if x > 0.0 { x } else { x.exp_m1() };
        let mut oracle = vec![vec![0.0; heads * d_head]; 4];
        for (h, head) in params.heads.iter().enumerate() {
            // wh[i] = feats[i] . W
            let mut wh = vec![vec![0.0; d_head]; 4];
            for i in 0..4 {
                for c in 0..d_head {
                    for k in 0..d_in {
                        wh[i][c] += feats.data[i * d_in + k] * head.w.data[k * d_head + c];
                    }
                }
            }
            let score = |v: &Tensor, row: &[f64]| -> f64 {
                row.iter().zip(&v.data).map(|(a, b)| a * b).sum()
            };
            for i in 0..4 {
                let mut partners = vec![i];
                partners.extend(&neighbors[i]);
                let es: Vec<f64> = partners
                    .iter()
                    .map(|&j| leaky(score(&head.a_src, &wh[i]) + score(&head.a_dst, &wh[j])))
                    .collect();
                let m = es.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = es.iter().map(|e| (e - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..d_head {
                    let agg: f64 = partners
                        .iter()
                        .zip(&exps)
                        .map(|(&j, &e)| e / z * wh[j][c])
                        .sum();
                    oracle[i][h * d_head + c] = elu(agg);
                }
            }
        }
        for i in 0..4 {
            for c in 0..heads * d_head {
                assert!(
                    (ours[i * heads * d_head + c] - oracle[i][c]).abs() < 1e-10,
                    "node {i} col {c}"
                );
            }
        }
    }

    #[test]
    fn attention_sums_to_one_per_target() {
        let mut r = rng(13);
        for _ in 0..10 {
            let n = r.gen_range(2..8);
            let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
            for i in 0..n {
                for j in (i + 1)..n {
                    if r.gen_bool(0.4) {
                        neighbors[i].push(j);
                        neighbors[j].push(i);
                    }
                }
            }
            let params = GatLayerParams::init(3, 2, 2, &mut r);
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape);
            let feats = rand_feats(n, 3, &mut r);
            let f_id = tape.input(feats);
            let pairs = AttentionPairs::one_hop(&neighbors);
            let got = gat_forward(&mut tape, f_id, &pairs, &binding).unwrap();
            for alpha in &got.alphas {
                let a = tape.data(*alpha);
                let mut sums = vec![0.0; n];
                for (&v, &t) in a.iter().zip(&pairs.targets) {
                    assert!(v > 0.0);
                    sums[t] += v;
                }
                for s in sums {
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn multi_scale_reduces_to_single_scale_on_one_hop() {
        let mut r = rng(17);
        let params = GatLayerParams::init(3, 2, 2, &mut r);
        let feats = rand_feats(3, 3, &mut r);
        // path 0-1-2
        let neighbors = vec![vec![1], vec![0, 2], vec![1]];
        let rings = vec![
            vec![vec![1], vec![2]],
            vec![vec![0, 2], vec![]],
            vec![vec![1], vec![0]],
        ];

        let mut tape1 = Tape::new();
        let b1 = params.bind(&mut tape1);
        let f1 = tape1.input(feats.clone());
        let single = gat_forward(&mut tape1, f1, &AttentionPairs::one_hop(&neighbors), &b1).unwrap();

        let mut tape2 = Tape::new();
        let b2 = params.bind(&mut tape2);
        let f2 = tape2.input(feats);
        let multi = multi_scale_gat(&mut tape2, f2, &rings, std::slice::from_ref(&b2)).unwrap();

        assert_eq!(tape1.data(single.out), tape2.data(multi.out));
    }

    #[test]
    fn ring_pairs_on_path_center_zero() {
        // path 0-1-2: scale-2 partners of node 0 are itself and node 2
        let rings = vec![
            vec![vec![1], vec![2]],
            vec![vec![0, 2], vec![]],
            vec![vec![1], vec![0]],
        ];
        let pairs = AttentionPairs::ring(&rings, 2);
        let for_zero: Vec<(usize, usize)> = pairs
            .targets
            .iter()
            .zip(&pairs.sources)
            .filter(|(&t, _)| t == 0)
            .map(|(&t, &s)| (t, s))
            .collect();
        assert_eq!(for_zero, vec![(0, 0), (0, 2)]);
        // node 1 has an empty ring-2: self-attention only
        let for_one: Vec<(usize, usize)> = pairs
            .targets
            .iter()
            .zip(&pairs.sources)
            .filter(|(&t, _)| t == 1)
            .map(|(&t, &s)| (t, s))
            .collect();
        assert_eq!(for_one, vec![(1, 1)]);
    }

    #[test]
    fn three_scales_triple_the_width() {
        let mut r = rng(19);
        let n = 5;
        let g = RoadGraph {
            num_nodes: n,
            edges: vec![(0, 1), (1, 2), (2, 3), (3, 4)],
            static_attrs: (0..n)
                .map(|_| SegmentAttrs {
                    road_type: 0,
                    lanes: 1,
                    length_m: 1.0,
                    speed_limit_kmh: 50.0,
                    poi_counts: [0; 5],
                })
                .collect(),
        };
        let adj = build_adjacency(&g).unwrap();
        let sg = khop_subgraph(&adj, 2, 3).unwrap();
        let rings = sg.local_rings(3);
        let params: Vec<GatLayerParams> =
            (0..3).map(|_| GatLayerParams::init(3, 2, 2, &mut r)).collect();
        let mut tape = Tape::new();
        let bindings: Vec<GatLayerBinding> = params.iter().map(|p| p.bind(&mut tape)).collect();
        let feats = rand_feats(sg.len(), 3, &mut r);
        let f_id = tape.input(feats);
        let got = multi_scale_gat(&mut tape, f_id, &rings, &bindings).unwrap();
        assert_eq!(tape.shape(got.out), &[sg.len(), 3 * 2 * 2]);
    }

    #[test]
    fn gat_layer_passes_grad_check() {
        let mut r = rng(23);
        let params = GatLayerParams::init(3, 2, 2, &mut r);
        let feats = rand_feats(4, 3, &mut r);
        let neighbors = vec![vec![1, 2, 3], vec![0], vec![0], vec![0]];
        let pairs = AttentionPairs::one_hop(&neighbors);

        let mut inputs = vec![feats];
        params.for_each("gat", &mut |_, t| inputs.push(t.clone()));
        let err = grad_check_multi(
            |tape, ids| {
                let binding = GatLayerBinding {
                    heads: vec![
                        GatHeadBinding {
                            w: ids[1],
                            a_src: ids[2],
                            a_dst: ids[3],
                        },
                        GatHeadBinding {
                            w: ids[4],
                            a_src: ids[5],
                            a_dst: ids[6],
                        },
                    ],
                };
                let got = gat_forward(tape, ids[0], &pairs, &binding)?;
                let sq = tape.mul(got.out, got.out)?;
                Ok(tape.sum(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn permuting_nodes_permutes_outputs() {
        let mut r = rng(29);
        let params = GatLayerParams::init(3, 2, 2, &mut r);
        let feats = rand_feats(4, 3, &mut r);
        let neighbors = vec![vec![1, 2], vec![0, 3], vec![0], vec![1]];
        // permutation: old -> new
        let perm = [2usize, 0, 3, 1];
        let mut p_feats = Tensor::zeros(vec![4, 3]);
        for old in 0..4 {
            for c in 0..3 {
                p_feats.data[perm[old] * 3 + c] = feats.data[old * 3 + c];
            }
        }
        let mut p_neighbors = vec![Vec::new(); 4];
        for (old, nb) in neighbors.iter().enumerate() {
            let mut mapped: Vec<usize> = nb.iter().map(|&j| perm[j]).collect();
            mapped.sort_unstable();
            p_neighbors[perm[old]] = mapped;
        }

        let run = |feats: Tensor, neighbors: &[Vec<usize>]| {
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape);
            let f_id = tape.input(feats);
            let pairs = AttentionPairs::one_hop(neighbors);
            let got = gat_forward(&mut tape, f_id, &pairs, &binding).unwrap();
            tape.data(got.out).to_vec()
        };
        let base = run(feats, &neighbors);
        let permuted = run(p_feats, &p_neighbors);
        let width = 4;
        for old in 0..4 {
            for c in 0..width {
                assert!(
                    (base[old * width + c] - permuted[perm[old] * width + c]).abs() < 1e-10
                );
            }
        }
    }
}
