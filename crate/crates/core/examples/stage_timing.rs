//! Rough stage timing against a synthetic prepared dataset.
use std::time::Instant;

use msgat::data::{assemble, balanced_sample, ingest, interpolate, split, GenConfig};
use msgat::model::{forward_eval, init_params, train_step, ModelConfig, SampleBatch};
use msgat::run::RunConfig;

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let gen = GenConfig { nodes: 200, span_days: 14, accident_rate: 0.0045, ..cfg.gen.clone() };
    msgat::data::synth_generate(&gen, 1, tmp.path()).unwrap();
    let store = ingest(tmp.path()).unwrap();
    let filled = interpolate(&store.speeds).unwrap();
    let s = balanced_sample(&store, 24, 60, 2).unwrap();
    let refs = split(&s.samples, (0.7, 0.1, 0.2), 3).unwrap();
    let mc = ModelConfig::default();
    let prepared = assemble(&store, &filled, &refs, &mc).unwrap();
    let params = init_params(&mc, 0).unwrap();

    let batch = SampleBatch { items: prepared.train.items[..32.min(prepared.train.len())].to_vec() };
    let sizes: Vec<usize> = batch.items.iter().map(|i| i.subgraph.len()).collect();
    println!("batch of {} samples, subgraph sizes {:?}", batch.len(), &sizes[..8.min(sizes.len())]);

    let t0 = Instant::now();
    let mut loss = 0.0;
    for _ in 0..3 {
        let out = train_step(&batch, &params, &mc, 1).unwrap();
        loss = out.loss;
    }
    println!("train_step (fwd+bwd, 32 samples): {:.1} ms, loss {loss:.4}", t0.elapsed().as_secs_f64() / 3.0 * 1000.0);

    let t1 = Instant::now();
    for _ in 0..3 {
        forward_eval(&batch, &params, &mc).unwrap();
    }
    println!("forward_eval (32 samples): {:.1} ms", t1.elapsed().as_secs_f64() / 3.0 * 1000.0);

    let t2 = Instant::now();
    for _ in 0..3 {
        let mut p = params.clone();
        msgat::model::forward(&batch, &mut p, &mc, msgat::model::ForwardMode::Train { dropout_seed: 1 }).unwrap();
    }
    println!("train-mode forward only (32 samples): {:.1} ms", t2.elapsed().as_secs_f64() / 3.0 * 1000.0);
}
