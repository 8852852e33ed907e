use std::time::Instant;

use climprobe::emulator::build_model;
use climprobe::ops::BnMode;
use climprobe::{ArchConfig, BackwardMode, Graph, Tensor};

fn main() {
    let arch = ArchConfig::canonical();
    let m = build_model::<f32>(&arch, 0).unwrap();
    let x = Tensor::from_fn(vec![1, 36, 70, 125], |i| ((i % 97) as f32 - 48.0) * 0.02);
    let t = Instant::now();
    let mut g = Graph::new();
    let xi = g.input(x, true);
    let tr = m.forward_graph(&mut g, xi, BnMode::Eval, false).unwrap();
    println!("forward {:?}", t.elapsed());
    let t = Instant::now();
    let s = g.pixel_readout(tr.output, 35, 60, vec![1.0]).unwrap();
    let grads = g.backward(s, BackwardMode::Standard).unwrap();
    println!(
        "backward {:?} nonzero {}",
        t.elapsed(),
        grads
            .get(xi)
            .unwrap()
            .data()
            .iter()
            .filter(|v| **v != 0.0)
            .count()
    );
}
