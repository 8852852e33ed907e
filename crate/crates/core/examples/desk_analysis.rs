//! Attribution diagnostics over checkpoints written by `desk_pipeline`.
//!
//! usage: desk_analysis <dir> [ig-pairs] [leads]
use climprobe::aggregation::{
    aggregate_groups, compare_leadtimes, compare_locations, mass_within_radius, tail_mass,
    GroupRequest,
};
use climprobe::attribution::{integrated_gradients, BaselineSpec, Method, PixelTarget};
use climprobe::data::{make_samples, read_series};
use climprobe::trainer::{load_checkpoint, SampleSet};

fn main() {
    let out = std::env::args().nth(1).unwrap_or("/tmp/desk".into());
    let ig_pairs: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let leads: Vec<usize> = std::env::args()
        .nth(3)
        .unwrap_or("1,6,9".into())
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let s = read_series(format!("{out}/smooth.fsr")).unwrap();
    let mask = s.mask_or_ocean();
    let targets: Vec<PixelTarget> = [(12, 20), (5, 8), (18, 30), (10, 33), (20, 6)]
        .iter()
        .map(|&(r, c)| PixelTarget::new(r, c))
        .collect();
    let mut reports = Vec::new();
    for &lead in &leads {
        let ck = load_checkpoint(format!("{out}/lead{lead}.ckpt")).unwrap();
        let m = ck.model.cast::<f64>();
        let samples = make_samples(&s, lead, 12).unwrap();
        let tr = &samples[..64];
        if lead == 1 {
            let mut ok = 0;
            for k in 0..ig_pairs {
                let x = tr[(k * 37) % tr.len()].input::<f64>(&s).unwrap();
                let t = PixelTarget::new((k * 5 + 3) % 24, (k * 13 + 1) % 40);
                let ig = integrated_gradients(&m, &x, t, &BaselineSpec::zero(), 128).unwrap();
                let d = ig.delta().unwrap();
                let err = (ig.sum() - d).abs() / d.abs();
                ok += (err <= 0.01) as usize;
                println!("  ig m=128 rel err {err:.2e} |delta| {:.2e}", d.abs());
            }
            println!("  ig pass {ok}/{ig_pairs}");
        }
        let sub = SampleSet::new(&s, tr, &mask);
        let req = GroupRequest {
            targets: targets.clone(),
            method: Method::DeepLift,
            baseline: BaselineSpec::zero(),
            lead,
        };
        let reps = aggregate_groups(&m, &sub, &req).unwrap();
        for r in &reps {
            let total = r.mean_pos.add(&r.mean_neg).unwrap();
            let masses: Vec<String> = [2.0, 4.0, 6.0, 8.0, 10.0]
                .iter()
                .map(|&rad| {
                    format!(
                        "{:.3}",
                        mass_within_radius(&total, r.target.row, r.target.col, rad).unwrap()
                    )
                })
                .collect();
            let share: Vec<String> = r
                .series
                .total
                .iter()
                .rev()
                .take(4)
                .map(|v| format!("{:.2}", v / r.series.total.iter().sum::<f64>()))
                .collect();
            println!(
                "lead {lead} ({},{}) mass R2/4/6/8/10 {masses:?} tail {:.3} last4 {share:?}",
                r.target.row,
                r.target.col,
                tail_mass(&r.series.total).unwrap()
            );
        }
        println!(
            "  similarity median {:?}",
            compare_locations(&reps).unwrap().median()
        );
        reports.push(reps);
    }
    for t in (0..targets.len()).filter(|_| leads.len() > 1) {
        let lr: Vec<_> = reports.iter().map(|r| r[t].clone()).collect();
        let c = compare_leadtimes(&lr).unwrap();
        println!(
            "target {t}: {:?} nondecreasing {}",
            c.leads
                .iter()
                .map(|l| format!("{:.3}", l.tail_mass.unwrap()))
                .collect::<Vec<_>>(),
            c.tail_nondecreasing
        );
    }
}
