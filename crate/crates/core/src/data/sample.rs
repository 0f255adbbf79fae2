//! Balanced sampling, stratified splits and sample assembly.
//!
//! Sampling decisions are recorded as lightweight [`SampleRef`]s
//! (segment, hour, label); feature assembly happens later against an
//! interpolated store, so the same manifest can be assembled under
//! different subgraph radii.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::data::normalize::{FeatureStats, NormStats};
use crate::data::schema::{external_features, FilledSpeedTable, IngestedStore};
use crate::error::{Error, Result};
use crate::graph::{khop_subgraph, SPATIAL_FEATURES};
use crate::model::{ModelConfig, SampleBatch, SampleItem, TEMPORAL_FEATURES};
use crate::tensor::Tensor;

/// One sampling decision: a (segment, hour) pair with its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: String,
    pub segment: usize,
    pub hour: i64,
    pub label: u8,
}

/// Balanced sampling result plus any fallback warnings.
#[derive(Debug, Clone)]
pub struct SamplingOutcome {
    pub samples: Vec<SampleRef>,
    pub warnings: Vec<String>,
}

/// Sample ids per partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRefs {
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

impl SplitRefs {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Exact largest-remainder apportionment of `total` into `weights.len()`
/// buckets proportional to `weights`.
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || weights.is_empty() {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        alloc[i] += 1;
    }
    alloc
}

/// Deterministic partial Fisher-Yates: shuffle-take `k` items.
fn shuffle_take<T>(mut items: Vec<T>, k: usize, rng: &mut ChaCha20Rng) -> Vec<T> {
    let k = k.min(items.len());
    for i in 0..k {
        let j = rng.gen_range(i..items.len());
        items.swap(i, j);
    }
    items.truncate(k);
    items
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha20Rng) {
    if items.is_empty() {
        return;
    }
    for i in 0..items.len() - 1 {
        let j = rng.gen_range(i..items.len());
        items.swap(i, j);
    }
}

/// Build a 1:1 balanced sample set: one positive per usable accident,
/// negatives drawn uniformly from non-accident (segment, hour) pairs with
/// the road-type distribution of the positives (largest-remainder targets,
/// unstratified fallback for deficits).
pub fn balanced_sample(
    store: &IngestedStore,
    lookback: usize,
    horizon_minutes: u32,
    seed: u64,
) -> Result<SamplingOutcome> {
    let start = store.start_hour();
    let end = store.end_hour();
    let first_valid = start + lookback as i64;
    if first_valid >= end {
        return Err(Error::Precondition(format!(
            "lookback {lookback} does not fit the {}-hour span",
            end - start
        )));
    }
    let mut warnings = Vec::new();

    // positives: one per accident whose lookback window fits the span
    let mut positives = Vec::new();
    for (idx, a) in store.accidents.iter().enumerate() {
        let hour = a.epoch_minute.div_euclid(60);
        if hour < first_valid || hour >= end {
            warnings.push(format!(
                "accident {idx} at segment {} (hour {hour}) skipped: lookback window outside span",
                a.segment_id
            ));
            continue;
        }
        positives.push(SampleRef {
            id: format!("p{idx}:{}@{}", a.segment_id, hour),
            segment: a.segment_id,
            hour,
            label: 1,
        });
    }
    if positives.is_empty() {
        return Err(Error::Precondition(
            "no usable accidents; cannot build positive samples".into(),
        ));
    }

    // hours with an accident at the segment within +-horizon are off limits
    let horizon = i64::from(horizon_minutes);
    let mut excluded: HashSet<(usize, i64)> = HashSet::new();
    for a in &store.accidents {
        let m = a.epoch_minute;
        let h_lo = (m - horizon).div_euclid(60) - 1;
        let h_hi = (m + horizon).div_euclid(60) + 1;
        for h in h_lo..=h_hi {
            let bucket = h * 60;
            if m >= bucket - horizon && m < bucket + 60 + horizon {
                excluded.insert((a.segment_id, h));
            }
        }
    }

    // negative candidates grouped by road type, in canonical order
    let road_type_of = |seg: usize| store.graph.static_attrs[seg].road_type;
    let mut types: Vec<u32> = positives
        .iter()
        .map(|p| road_type_of(p.segment))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    types.sort_unstable();
    let pos_per_type: Vec<f64> = types
        .iter()
        .map(|&t| positives.iter().filter(|p| road_type_of(p.segment) == t).count() as f64)
        .collect();
    let targets = largest_remainder(&pos_per_type, positives.len());

    let candidates_of_type = |t: u32| -> Vec<(usize, i64)> {
        let mut out = Vec::new();
        for seg in 0..store.graph.num_nodes {
            if road_type_of(seg) != t {
                continue;
            }
            for h in first_valid..end {
                if !excluded.contains(&(seg, h)) {
                    out.push((seg, h));
                }
            }
        }
        out
    };

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut negatives = Vec::new();
    let mut drawn: HashSet<(usize, i64)> = HashSet::new();
    let mut deficit = 0usize;
    for (&t, &target) in types.iter().zip(&targets) {
        let pool = candidates_of_type(t);
        if pool.len() < target {
            deficit += target - pool.len();
            warnings.push(format!(
                "road-type {t}: only {} negative candidates for a target of {target}; \
                 drawing the deficit unstratified",
                pool.len()
            ));
        }
        for (seg, h) in shuffle_take(pool, target, &mut rng) {
            drawn.insert((seg, h));
            negatives.push(SampleRef {
                id: format!("n{seg}@{h}"),
                segment: seg,
                hour: h,
                label: 0,
            });
        }
    }
    if deficit > 0 {
        let mut rest = Vec::new();
        for seg in 0..store.graph.num_nodes {
            for h in first_valid..end {
                let key = (seg, h);
                if !excluded.contains(&key) && !drawn.contains(&key) {
                    rest.push(key);
                }
            }
        }
        if rest.len() < deficit {
            return Err(Error::Precondition(format!(
                "only {} negative candidates for {} positives",
                negatives.len() + rest.len(),
                positives.len()
            )));
        }
        for (seg, h) in shuffle_take(rest, deficit, &mut rng) {
            negatives.push(SampleRef {
                id: format!("n{seg}@{h}"),
                segment: seg,
                hour: h,
                label: 0,
            });
        }
    }

    let mut samples = positives;
    samples.extend(negatives);
    Ok(SamplingOutcome { samples, warnings })
}

/// Shuffle once and cut into train/val/test, stratified by label: positives
/// and negatives are interleaved so every contiguous cut stays within one
/// sample of parity.
pub fn split(
    samples: &[SampleRef],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitRefs> {
    let (a, b, c) = ratios;
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {a} + {b} + {c}"
        )));
    }
    if a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::Config("split ratios must be non-negative".into()));
    }
    if samples.len() < 10 {
        return Err(Error::Precondition(format!(
            "need at least 10 samples to split, got {}",
            samples.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pos: Vec<SampleRef> = samples.iter().filter(|s| s.label == 1).cloned().collect();
    let mut neg: Vec<SampleRef> = samples.iter().filter(|s| s.label == 0).cloned().collect();
    shuffle(&mut pos, &mut rng);
    shuffle(&mut neg, &mut rng);

    let mut interleaved = Vec::with_capacity(samples.len());
    let mut pi = pos.into_iter();
    let mut ni = neg.into_iter();
    loop {
        match (pi.next(), ni.next()) {
            (Some(p), Some(n)) => {
                interleaved.push(p);
                interleaved.push(n);
            }
            (Some(p), None) => interleaved.push(p),
            (None, Some(n)) => interleaved.push(n),
            (None, None) => break,
        }
    }

    let sizes = largest_remainder(&[a, b, c], interleaved.len());
    let val_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    let train = interleaved[..val_start].to_vec();
    let val = interleaved[val_start..test_start].to_vec();
    let test = interleaved[test_start..].to_vec();
    Ok(SplitRefs { train, val, test })
}

// ---- assembly -----------------------------------------------------------------

/// Fully assembled, normalized partitions plus the statistics fitted on the
/// training partition.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub train: SampleBatch,
    pub val: SampleBatch,
    pub test: SampleBatch,
    pub stats: NormStats,
}

struct RawItem {
    subgraph: crate::graph::Subgraph,
    spatial: Vec<Vec<f64>>,
    temporal: Vec<Vec<Vec<f64>>>, // [t][node][feature]
    external: Vec<f64>,
    label: f64,
    id: String,
}

fn assemble_raw(
    store: &IngestedStore,
    filled: &FilledSpeedTable,
    r: &SampleRef,
    config: &ModelConfig,
) -> Result<RawItem> {
    let first = r.hour - config.lookback as i64;
    if first < store.start_hour() || r.hour >= store.end_hour() {
        return Err(Error::Contract(format!(
            "sample {} window [{first}, {}] outside the dataset span",
            r.id, r.hour
        )));
    }
    let subgraph = khop_subgraph(&store.adjacency, r.segment, config.subgraph_radius)?;
    let spatial: Vec<Vec<f64>> = subgraph
        .nodes
        .iter()
        .map(|&orig| store.graph.static_attrs[orig].features().to_vec())
        .collect();
    let mut temporal = Vec::with_capacity(config.lookback);
    for t in first..r.hour {
        let rows: Vec<Vec<f64>> = subgraph
            .nodes
            .iter()
            .map(|&orig| {
                let b = filled.get(orig, t);
                vec![b.avg_speed, b.veh_count, b.occupancy]
            })
            .collect();
        temporal.push(rows);
    }
    let weather = store
        .weather
        .get(r.hour)
        .ok_or_else(|| Error::Contract(format!("no weather for hour {}", r.hour)))?;
    let external = external_features(weather, &store.holidays);
    Ok(RawItem {
        subgraph,
        spatial,
        temporal,
        external,
        label: f64::from(r.label),
        id: r.id.clone(),
    })
}

fn finalize(raw: RawItem, stats: &NormStats) -> SampleItem {
    let n = raw.subgraph.len();
    let mut spatial = Vec::with_capacity(n * SPATIAL_FEATURES);
    for mut row in raw.spatial {
        stats.spatial.apply(&mut row);
        spatial.extend(row);
    }
    let temporal_steps = raw
        .temporal
        .into_iter()
        .map(|step| {
            let mut flat = Vec::with_capacity(n * TEMPORAL_FEATURES);
            for mut row in step {
                stats.temporal.apply(&mut row);
                flat.extend(row);
            }
            Tensor::new(vec![n, TEMPORAL_FEATURES], flat).expect("temporal shape")
        })
        .collect();
    let mut external = raw.external;
    stats.external.apply(&mut external);
    SampleItem {
        subgraph: raw.subgraph,
        spatial: Tensor::new(vec![n, SPATIAL_FEATURES], spatial).expect("spatial shape"),
        temporal_steps,
        external,
        label: raw.label,
        id: raw.id,
    }
}

/// Assemble every partition against the store: extract subgraphs and
/// feature windows, fit normalization statistics on the training partition
/// only, and apply them everywhere.
pub fn assemble(
    store: &IngestedStore,
    filled: &FilledSpeedTable,
    refs: &SplitRefs,
    config: &ModelConfig,
) -> Result<PreparedDataset> {
    config.validate()?;
    let build = |part: &[SampleRef]| -> Result<Vec<RawItem>> {
        part.iter()
            .map(|r| assemble_raw(store, filled, r, config))
            .collect()
    };
    let train_raw = build(&refs.train)?;
    let val_raw = build(&refs.val)?;
    let test_raw = build(&refs.test)?;

    // statistics from the training partition only
    let mut spatial_rows = Vec::new();
    let mut temporal_rows = Vec::new();
    let mut external_rows = Vec::new();
    for item in &train_raw {
        spatial_rows.extend(item.spatial.iter().cloned());
        for step in &item.temporal {
            temporal_rows.extend(step.iter().cloned());
        }
        external_rows.push(item.external.clone());
    }
    let stats = NormStats {
        spatial: FeatureStats::fit(&spatial_rows, SPATIAL_FEATURES),
        temporal: FeatureStats::fit(&temporal_rows, TEMPORAL_FEATURES),
        external: FeatureStats::fit(&external_rows, crate::model::EXTERNAL_FEATURES),
    };

    let pack = |raw: Vec<RawItem>| SampleBatch {
        items: raw.into_iter().map(|r| finalize(r, &stats)).collect(),
    };
    Ok(PreparedDataset {
        train: pack(train_raw),
        val: pack(val_raw),
        test: pack(test_raw),
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::{
        AccidentRecord, SpeedBucket, SpeedTable, WeatherRow, WeatherTable,
    };
    use crate::graph::{build_adjacency, RoadGraph, SegmentAttrs};
    use std::collections::BTreeSet;

    /// Small fully-observed store: a path graph, synthetic diurnal speeds.
    fn tiny_store(num_segments: usize, num_hours: usize, accidents: Vec<AccidentRecord>) -> IngestedStore {
        let edges: Vec<(usize, usize)> = (0..num_segments - 1).map(|i| (i, i + 1)).collect();
        let static_attrs: Vec<SegmentAttrs> = (0..num_segments)
            .map(|i| SegmentAttrs {
                road_type: (i % 3) as u32,
                lanes: 2,
                length_m: 500.0,
                speed_limit_kmh: 60.0,
                poi_counts: [1, 0, 2, 0, 1],
            })
            .collect();
        let graph = RoadGraph {
            num_nodes: num_segments,
            edges,
            static_attrs,
        };
        let adjacency = build_adjacency(&graph).unwrap();
        let start_hour = 426_000; // mid-2018
        let buckets = (0..num_segments * num_hours)
            .map(|i| {
                let t = i % num_hours;
                Some(SpeedBucket {
                    avg_speed: 40.0 + ((t % 24) as f64),
                    veh_count: 100.0,
                    occupancy: 0.3,
                })
            })
            .collect();
        let speeds = SpeedTable {
            start_hour,
            num_hours,
            num_segments,
            buckets,
        };
        let rows = (0..num_hours)
            .map(|t| WeatherRow {
                epoch_hour: start_hour + t as i64,
                temp_c: 20.0,
                precip_mm: 0.0,
                visibility_km: 10.0,
                wind_kmh: 5.0,
                event_code: (t % 2) as u32,
            })
            .collect();
        let weather = WeatherTable { start_hour, rows };
        IngestedStore {
            graph,
            adjacency,
            speeds,
            weather,
            accidents,
            holidays: BTreeSet::new(),
        }
    }

    fn accident(seg: usize, hour_offset: i64) -> AccidentRecord {
        AccidentRecord {
            segment_id: seg,
            epoch_minute: (426_000 + hour_offset) * 60 + 15,
            severity: 2,
            incident_type: 1,
        }
    }

    #[test]
    fn ten_accidents_give_twenty_samples() {
        let accidents: Vec<_> = (0..10).map(|i| accident(i, 30 + i as i64 * 7)).collect();
        let store = tiny_store(12, 24 * 10, accidents);
        let out = balanced_sample(&store, 24, 60, 9).unwrap();
        assert_eq!(out.samples.len(), 20);
        assert_eq!(out.samples.iter().filter(|s| s.label == 1).count(), 10);
    }

    #[test]
    fn negatives_match_positive_road_types_when_available() {
        // all accidents on segments with road_type 2 (ids 2, 5, 8, ...)
        let accidents: Vec<_> = (0..6).map(|i| accident(2 + 3 * (i % 3), 40 + i as i64 * 11)).collect();
        let store = tiny_store(12, 24 * 10, accidents);
        let out = balanced_sample(&store, 24, 60, 3).unwrap();
        for s in out.samples.iter().filter(|s| s.label == 0) {
            assert_eq!(store.graph.static_attrs[s.segment].road_type, 2);
        }
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn sampling_is_deterministic_under_a_seed() {
        let accidents: Vec<_> = (0..8).map(|i| accident(i, 50 + i as i64 * 13)).collect();
        let store = tiny_store(10, 24 * 12, accidents);
        let a = balanced_sample(&store, 24, 60, 42).unwrap();
        let b = balanced_sample(&store, 24, 60, 42).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = balanced_sample(&store, 24, 60, 43).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn negatives_avoid_accident_neighborhoods() {
        let accidents: Vec<_> = (0..8).map(|i| accident(i % 4, 60 + i as i64 * 9)).collect();
        let store = tiny_store(8, 24 * 10, accidents.clone());
        let out = balanced_sample(&store, 24, 60, 1).unwrap();
        for s in out.samples.iter().filter(|s| s.label == 0) {
            for a in &accidents {
                if a.segment_id == s.segment {
                    let bucket = s.hour * 60;
                    let clear = a.epoch_minute < bucket - 60 || a.epoch_minute >= bucket + 120;
                    assert!(clear, "negative {} collides with accident at {}", s.id, a.epoch_minute);
                }
            }
        }
    }

    #[test]
    fn empty_accident_list_fails_loudly() {
        let store = tiny_store(8, 24 * 5, Vec::new());
        assert!(matches!(
            balanced_sample(&store, 24, 60, 0),
            Err(Error::Precondition(_))
        ));
    }

    fn fake_samples(n_pos: usize, n_neg: usize) -> Vec<SampleRef> {
        let mut out = Vec::new();
        for i in 0..n_pos {
            out.push(SampleRef {
                id: format!("p{i}"),
                segment: i,
                hour: 1000 + i as i64,
                label: 1,
            });
        }
        for i in 0..n_neg {
            out.push(SampleRef {
                id: format!("n{i}"),
                segment: i,
                hour: 2000 + i as i64,
                label: 0,
            });
        }
        out
    }

    #[test]
    fn hundred_samples_split_seventy_ten_twenty() {
        let refs = split(&fake_samples(50, 50), (0.7, 0.1, 0.2), 5).unwrap();
        assert_eq!(refs.train.len(), 70);
        assert_eq!(refs.val.len(), 10);
        assert_eq!(refs.test.len(), 20);
        assert_eq!(refs.total(), 100);
    }

    #[test]
    fn ten_samples_split_seven_one_two() {
        let refs = split(&fake_samples(5, 5), (0.7, 0.1, 0.2), 5).unwrap();
        assert_eq!(refs.train.len(), 7);
        assert_eq!(refs.val.len(), 1);
        assert_eq!(refs.test.len(), 2);
    }

    #[test]
    fn bad_ratios_are_a_config_error() {
        assert!(matches!(
            split(&fake_samples(5, 5), (0.7, 0.1, 0.1), 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn splits_are_disjoint_complete_and_balanced_over_many_seeds() {
        let samples = fake_samples(25, 25);
        for seed in 0..50 {
            let refs = split(&samples, (0.7, 0.1, 0.2), seed).unwrap();
            let mut ids = HashSet::new();
            for part in [&refs.train, &refs.val, &refs.test] {
                for s in part {
                    assert!(ids.insert(s.id.clone()), "duplicate {}", s.id);
                }
                let pos = part.iter().filter(|s| s.label == 1).count() as i64;
                let neg = part.len() as i64 - pos;
                assert!((pos - neg).abs() <= 1, "seed {seed}: {pos} vs {neg}");
            }
            assert_eq!(ids.len(), 50);
        }
    }

    #[test]
    fn assembly_shapes_and_leak_freedom() {
        let accidents: Vec<_> = (0..10).map(|i| accident(i, 40 + i as i64 * 17)).collect();
        let store = tiny_store(12, 24 * 10, accidents);
        let filled = crate::data::interpolate(&store.speeds).unwrap();
        let out = balanced_sample(&store, 6, 60, 7).unwrap();
        let refs = split(&out.samples, (0.7, 0.1, 0.2), 7).unwrap();
        let config = ModelConfig {
            lookback: 6,
            subgraph_radius: 2,
            scales: 2,
            heads: 2,
            hidden: 4,
            ..ModelConfig::default()
        };
        let prepared = assemble(&store, &filled, &refs, &config).unwrap();
        assert_eq!(prepared.train.len(), refs.train.len());
        for item in &prepared.train.items {
            assert_eq!(item.temporal_steps.len(), 6);
            assert_eq!(item.spatial.shape[0], item.subgraph.len());
        }

        // statistics depend only on the training partition: swapping the
        // test refs leaves them bit-identical
        let mut refs2 = refs.clone();
        refs2.test.rotate_left(1);
        refs2.test[0].hour += 1;
        let prepared2 = assemble(&store, &filled, &refs2, &config).unwrap();
        assert_eq!(prepared.stats, prepared2.stats);
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[0.7, 0.1, 0.2], 10), vec![7, 1, 2]);
        assert_eq!(largest_remainder(&[0.7, 0.1, 0.2], 100), vec![70, 10, 20]);
        assert_eq!(largest_remainder(&[3.0, 5.0, 2.0], 10), vec![3, 5, 2]);
        let alloc = largest_remainder(&[1.0, 1.0, 1.0], 10);
        assert_eq!(alloc.iter().sum::<usize>(), 10);
    }
}
