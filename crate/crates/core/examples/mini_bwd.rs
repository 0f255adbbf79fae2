// isolate: forward vs backward on a GRU-like chain using the real tape
use msgat::tensor::{Tape, Tensor};
use std::time::Instant;

fn main() {
    let n = 45;
    let w_in = 96;
    let d = 32;
    let steps = 24;
    let mk = |r: usize, c: usize, s: f64| {
        Tensor::new(vec![r, c], (0..r * c).map(|i| ((i as f64) * s).sin() * 0.1).collect()).unwrap()
    };
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = tape.input(mk(n, w_in, 0.3));
        let w = tape.var(mk(w_in, d, 0.17));
        let u = tape.var(mk(d, d, 0.11));
        let b = tape.var(mk(1, d, 0.13));
        let mut h = tape.input(Tensor::zeros(vec![n, d]));
        for _ in 0..steps {
            for _gate in 0..6 {
                let xw = tape.matmul(x, w).unwrap();
                let hu = tape.matmul(h, u).unwrap();
                let s = tape.add(xw, hu).unwrap();
                let sb = tape.add_row(s, b).unwrap();
                h = tape.sigmoid(sb);
            }
        }
        let loss = tape.sum(h);
        std::hint::black_box(tape.data(loss)[0]);
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;

    let t1 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = tape.input(mk(n, w_in, 0.3));
        let w = tape.var(mk(w_in, d, 0.17));
        let u = tape.var(mk(d, d, 0.11));
        let b = tape.var(mk(1, d, 0.13));
        let mut h = tape.input(Tensor::zeros(vec![n, d]));
        for _ in 0..steps {
            for _gate in 0..6 {
                let xw = tape.matmul(x, w).unwrap();
                let hu = tape.matmul(h, u).unwrap();
                let s = tape.add(xw, hu).unwrap();
                let sb = tape.add_row(s, b).unwrap();
                h = tape.sigmoid(sb);
            }
        }
        let loss = tape.sum(h);
        tape.backward(loss).unwrap();
        std::hint::black_box(tape.grad(w).unwrap()[0]);
    }
    let both = t1.elapsed().as_secs_f64() / reps as f64;
    println!("forward {:.1} ms, fwd+bwd {:.1} ms, bwd/fwd ratio {:.1}", fwd * 1e3, both * 1e3, (both - fwd) / fwd);
}
