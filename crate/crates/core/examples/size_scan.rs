use msgat::data::{assemble, balanced_sample, ingest, interpolate, split, GenConfig};
use msgat::model::{forward_eval, init_params, train_step, ModelConfig, SampleBatch};
use std::time::Instant;

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

    let mut items = prepared.train.items.clone();
    items.sort_by_key(|i| i.subgraph.len());
    for idx in [0, items.len()/2, items.len()*9/10, items.len()-1] {
        let item = items[idx].clone();
        let n = item.subgraph.len();
        let pairs: usize = item.subgraph.local_rings(3).iter()
            .map(|r| r.iter().map(|ring| ring.len() + 1).sum::<usize>()).sum();
        let batch = SampleBatch { items: vec![item] };
        let t0 = Instant::now();
        for _ in 0..3 { forward_eval(&batch, &params, &mc).unwrap(); }
        let fwd = t0.elapsed().as_secs_f64() / 3.0;
        let t1 = Instant::now();
        for _ in 0..3 { train_step(&batch, &params, &mc, 1).unwrap(); }
        let step = t1.elapsed().as_secs_f64() / 3.0;
        println!("n={n:3} pairs/step={pairs:5}  fwd {:7.1} ms   fwd+bwd {:7.1} ms  ratio {:.1}",
                 fwd*1e3, step*1e3, step/fwd);
    }
}
