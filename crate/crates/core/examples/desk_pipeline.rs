//! Train the desk benchmark emulators and save one checkpoint per lead.
//!
//! usage: desk_pipeline <out-dir> [epochs]
use std::time::Instant;

use climprobe::benchmark::{DeskBenchmark, BENCHMARK_LEADS};
use climprobe::data::write_series;
use climprobe::trainer::{save_checkpoint, Checkpoint};

fn main() {
    let out = std::env::args().nth(1).unwrap_or("/tmp/desk".into());
    let mut bench = DeskBenchmark::default();
    if let Some(e) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        bench.train.epochs = e;
    }
    std::fs::create_dir_all(&out).unwrap();
    let s = bench.series().unwrap();
    write_series(&s, format!("{out}/smooth.fsr")).unwrap();
    for lead in BENCHMARK_LEADS {
        let t0 = Instant::now();
        let res = bench.train_lead(&s, lead).unwrap();
        let last = res.history.last().unwrap();
        println!(
            "lead {lead}: {:.1}s last train {:.5} val {:.5} best {:?}",
            t0.elapsed().as_secs_f64(),
            last.train_loss,
            last.val_loss.unwrap_or(f64::NAN),
            res.best_epoch
        );
        let mut ck = Checkpoint::new(res.model, bench.model_seed, lead);
        ck.history = res.history;
        ck.best_epoch = res.best_epoch;
        save_checkpoint(&ck, format!("{out}/lead{lead}.ckpt")).unwrap();
    }
}
