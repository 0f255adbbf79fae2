use msgat::data::{assemble, balanced_sample, ingest, interpolate, split, GenConfig};
use msgat::model::{init_params, train_step, ModelConfig, SampleBatch};

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = GenConfig { nodes: 200, span_days: 10, accident_rate: 0.006, ..GenConfig::default() };
    msgat::data::synth_generate(&gen, 1, tmp.path()).unwrap();
    let store = ingest(tmp.path()).unwrap();
    let filled = interpolate(&store.speeds).unwrap();
    let s = balanced_sample(&store, 24, 60, 2).unwrap();
    let refs = split(&s.samples, (0.7, 0.1, 0.2), 3).unwrap();
    let mc = ModelConfig::default();
    let prepared = assemble(&store, &filled, &refs, &mc).unwrap();
    let params = init_params(&mc, 0).unwrap();
    // largest subgraph sample only
    let biggest = prepared.train.items.iter().max_by_key(|i| i.subgraph.len()).unwrap().clone();
    println!("subgraph size {}", biggest.subgraph.len());
    let batch = SampleBatch { items: vec![biggest] };
    let out = train_step(&batch, &params, &mc, 1).unwrap();
    println!("loss {}", out.loss);
}
