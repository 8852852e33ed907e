use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use climprobe::ablation::{ablation_diff, parse_months, parse_rect, AblationSpec};
use climprobe::aggregation::{
    aggregate_groups, compare_leadtimes, compare_locations, mass_within_radius, tail_mass,
    with_probe_pool, Contributions, GroupReport, GroupRequest,
};
use climprobe::attribution::{explain, BaselineChoice, Heatmap, Method, PixelTarget};
use climprobe::benchmark::DeskBenchmark;
use climprobe::data::{
    generate_synthetic, make_samples, moving_average_12, write_series, DatasetIndex, FieldSeries,
    MaskSpec, SampleWindow, SplitPolicy, SynthConfig, Teleconnection,
};
use climprobe::emulator::{apply_mask, build_model, ArchConfig};
use climprobe::trainer::{
    evaluate, save_checkpoint, train, AdamConfig, Checkpoint, EpochRecord, SampleSet, TrainConfig,
};
use climprobe::{LandMask, Model64, Tensor};
use probe_service::{
    parse_ckpt_flag, top_month, LoadError, ServeError, ServiceConfig, ServiceManifest,
};

use crate::args::*;
use crate::manifest::{beside, internal, Recorder};
use climprobe_cli::error::{CliError, CliResult, EXIT_INCOMPATIBLE};
use climprobe_cli::render;

/// What a finished command reports; the dispatcher writes the manifest.
pub struct Outcome {
    pub manifest: PathBuf,
    pub resolved: Value,
    pub summary: Value,
}

pub fn run(cmd: &Command, rec: &mut Recorder) -> CliResult<Outcome> {
    match cmd {
        Command::Synth(a) => synth(a, rec),
        Command::Prepare(a) => prepare(a, rec),
        Command::Train(a) => train_cmd(a, rec),
        Command::Eval(a) => eval(a, rec),
        Command::Explain(a) => explain_cmd(a, rec),
        Command::Aggregate(a) => aggregate(a, rec),
        Command::Ablate(a) => ablate(a, rec),
        Command::Serve(_) => Err(internal("serve is dispatched separately")),
    }
}

fn mkdir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn parent_dir(file: &Path) -> CliResult<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => mkdir(p),
        _ => Ok(()),
    }
}

fn write(rec: &mut Recorder, path: PathBuf, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    rec.output(path);
    Ok(())
}

fn to_value<T: serde::Serialize>(v: &T) -> CliResult<Value> {
    serde_json::to_value(v).map_err(internal)
}

fn pretty<T: serde::Serialize>(v: &T) -> CliResult<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v).map_err(internal)?;
    b.push(b'\n');
    Ok(b)
}

fn f32s<S: climprobe::Scalar>(v: &[S]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

fn parse_pair(s: &str, what: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::invalid(format!("bad {what} `{s}`"));
    let (a, b) = s.split_once([',', 'x', 'X']).ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

/// `12`, `0,4,9`, `0-15` and combinations, in the given order without repeats.
pub fn parse_samples(s: &str) -> CliResult<Vec<usize>> {
    let bad = |p: &str| CliError::invalid(format!("bad sample id `{p}` in `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let ids: Vec<usize> = match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad(part))?;
                let b: usize = b.trim().parse().map_err(|_| bad(part))?;
                if b < a {
                    return Err(bad(part));
                }
                (a..=b).collect()
            }
            None => vec![part.parse().map_err(|_| bad(part))?],
        };
        for id in ids {
            if !out.contains(&id) {
                out.push(id);
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::invalid("no sample ids given"));
    }
    Ok(out)
}

// ---------------------------------------------------------------- loading

struct Data {
    path: PathBuf,
    index: DatasetIndex,
    series: FieldSeries,
    mask: LandMask,
}

impl Data {
    fn load(rec: &mut Recorder, path: &Path) -> CliResult<Self> {
        let bytes = rec.read(path)?;
        let index: DatasetIndex = serde_json::from_slice(&bytes).map_err(|e| {
            CliError::incompatible(format!("{}: not a dataset index: {e}", path.display()))
        })?;
        if index.format_version != DatasetIndex::VERSION {
            return Err(CliError::incompatible(format!(
                "{}: index format {} (supported {})",
                path.display(),
                index.format_version,
                DatasetIndex::VERSION
            )));
        }
        let sp = index.series_path(path);
        let series = FieldSeries::from_bytes(&rec.read(&sp)?).map_err(|e| CliError::at(&sp, e))?;
        let mask = series.mask_or_ocean();
        Ok(Data {
            path: path.to_path_buf(),
            index,
            series,
            mask,
        })
    }

    /// Every window of `lead` in chronological order; sample ids index this list.
    fn samples(&self, lead: usize) -> CliResult<Vec<SampleWindow>> {
        Ok(make_samples(&self.series, lead, self.index.input_months)?)
    }

    fn split(&self, lead: usize, split: &str) -> CliResult<Vec<SampleWindow>> {
        let s = self.index.lead(lead)?;
        Ok(match split {
            "train" => s.train.clone(),
            "val" => s.val.clone(),
            "all" => s.train.iter().chain(&s.val).copied().collect(),
            _ => {
                return Err(CliError::invalid(format!(
                    "unknown split `{split}` (train, val, all)"
                )))
            }
        })
    }

    fn baseline_pool(&self, lead: usize) -> &[SampleWindow] {
        self.index
            .lead(lead)
            .map(|l| l.train.as_slice())
            .unwrap_or(&[])
    }

    fn check_arch(&self, arch: &ArchConfig, what: &Path) -> CliResult<()> {
        if arch.grid != self.series.grid() || arch.input_months != self.index.input_months {
            return Err(CliError::incompatible(format!(
                "{} expects {} months on {:?}, {} has {} months on {:?}",
                what.display(),
                arch.input_months,
                arch.grid,
                self.path.display(),
                self.index.input_months,
                self.series.grid()
            )));
        }
        Ok(())
    }
}

fn load_ckpt(rec: &mut Recorder, path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::from_bytes(&rec.read(path)?).map_err(|e| CliError::at(path, e))
}

/// Checkpoint plus the dataset it is used with, checked for compatibility.
fn load_pair(
    rec: &mut Recorder,
    ckpt: &Path,
    data: Option<&PathBuf>,
) -> CliResult<(Checkpoint, Data)> {
    let ck = load_ckpt(rec, ckpt)?;
    let data_path = match (data, &ck.data_index) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => {
            return Err(CliError::usage(format!(
                "{} records no dataset; pass --data",
                ckpt.display()
            )))
        }
    };
    let d = Data::load(rec, &data_path)?;
    d.check_arch(ck.model.arch(), ckpt)?;
    Ok((ck, d))
}

fn window(d: &Data, lead: usize, sample: usize) -> CliResult<SampleWindow> {
    let all = d.samples(lead)?;
    all.get(sample).copied().ok_or_else(|| {
        CliError::invalid(format!(
            "sample {sample} not in 0..{} for lead {lead}",
            all.len()
        ))
    })
}

fn pixel(s: &str, grid: (usize, usize), lead: usize) -> CliResult<PixelTarget> {
    let (r, c) = parse_pair(s, "pixel")?;
    let t = PixelTarget::new(r, c).with_lead(lead);
    t.check(grid)?;
    Ok(t)
}

// ---------------------------------------------------------------- synth

fn parse_link(s: &str) -> CliResult<Teleconnection> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || {
        CliError::invalid(format!(
            "bad link `{s}`, expected r0,c0,r1,c1:r0,c0,r1,c1:coupling:lag"
        ))
    };
    let [src, dst, beta, lag] = parts[..] else {
        return Err(bad());
    };
    Ok(Teleconnection {
        source: parse_rect(src)?,
        dest: parse_rect(dst)?,
        coupling: beta.trim().parse().map_err(|_| bad())?,
        lag: lag.trim().parse().map_err(|_| bad())?,
    })
}

fn synth(a: &SynthArgs, rec: &mut Recorder) -> CliResult<Outcome> {
    let mut cfg = match a.preset.as_str() {
        "default" => SynthConfig::default(),
        "desk" => DeskBenchmark::default().synth,
        p => {
            return Err(CliError::invalid(format!(
                "unknown preset `{p}` (default, desk)"
            )))
        }
    };
    if let Some(g) = &a.grid {
        cfg.grid = parse_pair(g, "grid")?;
    }
    if let Some(v) = a.months {
        cfg.months = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.persistence {
        cfg.persistence = v;
    }
    if let Some(v) = a.radius {
        cfg.radius = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.noise_radius {
        cfg.noise_radius = v;
    }
    if let Some(v) = a.spinup {
        cfg.spinup = v;
    }
    if !a.land.is_empty() {
        let rects = a
            .land
            .iter()
            .map(|r| parse_rect(r))
            .collect::<Result<_, _>>()?;
        cfg.mask = MaskSpec::Land { rects };
    }
    if !a.link.is_empty() {
        cfg.links = a
            .link
            .iter()
            .map(|l| parse_link(l))
            .collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    let series = generate_synthetic(&cfg)?;
    parent_dir(&a.output)?;
    write_series(&series, &a.output).map_err(|e| CliError::at(&a.output, e))?;
    rec.output(a.output.clone());
    Ok(Outcome {
        manifest: beside(&a.output),
        resolved: to_value(&cfg)?,
        summary: json!({
            "months": series.months(),
            "grid": series.grid(),
            "ocean_cells": series.mask_or_ocean().ocean_count(),
        }),
    })
}

// ---------------------------------------------------------------- prepare

fn parse_policy(s: &str) -> CliResult<SplitPolicy> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase())).map_err(|_| {
        CliError::invalid(format!(
            "unknown split policy `{s}` (contiguous, interleaved)"
        ))
    })
}

fn prepare(a: &PrepareArgs, rec: &mut Recorder) -> CliResult<Outcome> {
    let raw =
        FieldSeries::from_bytes(&rec.read(&a.input)?).map_err(|e| CliError::at(&a.input, e))?;
    let policy = parse_policy(&a.policy)?;
    if a.leads.is_empty() {
        return Err(CliError::invalid("no lead times given"));
    }
    let smooth = moving_average_12(&raw)?;
    let index = DatasetIndex::build(
        &smooth,
        "smooth.fsr",
        a.months,
        &a.leads,
        a.train_n,
        a.val_n,
        policy,
    )?;
    mkdir(&a.output)?;
    let sp = a.output.join("smooth.fsr");
    write_series(&smooth, &sp).map_err(|e| CliError::at(&sp, e))?;
    rec.output(sp);
    write(rec, a.output.join("index.json"), pretty(&index)?)?;
    let leads: Vec<Value> = index
        .leads
        .iter()
        .map(|l| json!({"lead": l.lead, "train": l.train.len(), "val": l.val.len()}))
        .collect();
    Ok(Outcome {
        manifest: a.output.join("manifest.json"),
        resolved: json!({ "policy": policy, "smoothed_months": smooth.months() }),
        summary: json!({ "index": a.output.join("index.json"), "leads": leads }),
    })
}

// ---------------------------------------------------------------- train

fn arch(rec: &mut Recorder, s: &str) -> CliResult<ArchConfig> {
    Ok(match s {
        "desk" => ArchConfig::desk(),
        "canonical" => ArchConfig::canonical(),
        path => {
            let p = Path::new(path);
            serde_json::from_slice(&rec.read(p)?).map_err(|e| {
                CliError::incompatible(format!("{path}: not an architecture file: {e}"))
            })?
        }
    })
}

fn history_csv(h: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in h {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{val}", r.epoch, r.train_loss);
    }
    out
}

fn train_cmd(a: &TrainArgs, rec: &mut Recorder) -> CliResult<Outcome> {
    let d = Data::load(rec, &a.data)?;
    let arch = arch(rec, &a.arch)?;
    d.check_arch(&arch, Path::new(&a.arch))?;
    let split = d.index.lead(a.lead)?;
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            ..AdamConfig::default()
        },
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        lead: a.lead,
        mask_loss: !a.no_mask_loss,
        standardize: !a.no_standardize,
    };
    let model = build_model::<f32>(&arch, a.model_seed)?;
    let out = train(
        model,
        &SampleSet::new(&d.series, &split.train, &d.mask),
        Some(&SampleSet::new(&d.series, &split.val, &d.mask)),
        &cfg,
    )?;
    let ck = Checkpoint {
        model: out.model,
        train_config: Some(cfg.clone()),
        history: out.history,
        best_epoch: out.best_epoch,
        seed: a.model_seed,
        lead: a.lead,
        data_index: Some(a.data.to_string_lossy().into_owned()),
    };
    parent_dir(&a.output)?;
    save_checkpoint(&ck, &a.output).map_err(|e| CliError::at(&a.output, e))?;
    rec.output(a.output.clone());
    write(
        rec,
        a.output.with_extension("history.csv"),
        history_csv(&ck.history),
    )?;
    let best = ck.best_epoch.and_then(|b| ck.history.get(b));
    Ok(Outcome {
        manifest: beside(&a.output),
        resolved: json!({ "arch": arch, "train": cfg, "model_seed": a.model_seed }),
        summary: json!({
            "checkpoint": a.output,
            "best_epoch": ck.best_epoch,
            "best_val_loss": best.and_then(|r| r.val_loss),
            "epochs": ck.history.len(),
        }),
    })
}

// ---------------------------------------------------------------- eval

fn eval(a: &EvalArgs, rec: &mut Recorder) -> CliResult<Outcome> {
    let (ck, d) = load_pair(rec, &a.ckpt, a.data.as_ref())?;
    let windows = d.split(ck.lead, &a.split)?;
    let mse = evaluate(&ck.model, &SampleSet::new(&d.series, &windows, &d.mask))?;
    mkdir(&a.output)?;
    let report = json!({
        "lead": ck.lead,
        "split": a.split,
        "n": windows.len(),
        "masked_mse": mse,
    });
    write(rec, a.output.join("eval.json"), pretty(&report)?)?;
    if let Some(sample) = a.sample {
        let w = window(&d, ck.lead, sample)?;
        let x = w.input::<f32>(&d.series)?;
        let y = w.target::<f32>(&d.series)?;
        let pred = apply_mask(&ck.model.forward(&x)?, &d.mask)?;
        let err = apply_mask(&pred.sub(&y)?, &d.mask)?;
        let (h, wd) = d.series.grid();
        let plane = h * wd;
        let last = &x.data()[x.len() - plane..];
        let panels = [
            ("input", last),
            ("target", y.data()),
            ("output", pred.data()),
            ("error", err.data()),
        ];
        let mut stacked = Vec::with_capacity(4 * plane);
        for (_, v) in &panels {
            stacked.extend_from_slice(v);
        }
        let t = Tensor::new(vec![4, h, wd], stacked)?;
        let fsr = a.output.join(format!("sample{sample}_panels.fsr"));
        write_series(
            &FieldSeries::from_tensor(&t, Some(d.mask.clone()))?
                .with_name("input(-1) target output error"),
            &fsr,
        )
        .map_err(|e| CliError::at(&fsr, e))?;
        rec.output(fsr);
        for (name, v) in panels {
            let img = if name == "error" {
                render::diverging(v, h, wd, Some(d.mask.cells()))
            } else {
                render::field(v, h, wd, Some(d.mask.cells()))
            };
            let p = a.output.join(format!("sample{sample}_{name}.png"));
            img.save(&p)?;
            rec.output(p);
        }
    }
    Ok(Outcome {
        manifest: a.output.join("manifest.json"),
        resolved: json!({ "lead": ck.lead, "data": d.path }),
        summary: report,
    })
}

// ---------------------------------------------------------------- explain

fn contributions_csv(c: &Contributions) -> String {
    let mut out = String::from("month_index,positive,negative,total\n");
    for (i, m) in c.month_indices().into_iter().enumerate() {
        let _ = writeln!(
            out,
            "{m},{},{},{}",
            c.positive[i], c.negative[i], c.total[i]
        );
    }
    out
}

fn write_heatmap(
    rec: &mut Recorder,
    dir: &Path,
    h: &Heatmap<f64>,
    input: &Tensor<f64>,
    mask: &LandMask,
) -> CliResult<Value> {
    mkdir(dir)?;
    let (fsr, json) = h.export(dir, "heatmap").map_err(|e| CliError::at(dir, e))?;
    rec.output(fsr);
    rec.output(json);
    let c = Contributions::of(&h.values);
    write(rec, dir.join("contributions.csv"), contributions_csv(&c))?;
    let [months, rows, cols]: [usize; 3] = h.values.shape().try_into().map_err(internal)?;
    let plane = rows * cols;
    let values = f32s(h.values.data());
    let top = top_month(&c);
    let frame = |off: i64| {
        let i = (months as i64 + off) as usize;
        &values[i * plane..(i + 1) * plane]
    };
    let figures = [
        (
            "heatmap_m-1.png",
            render::diverging(frame(-1), rows, cols, None),
        ),
        (
            "heatmap_top.png",
            render::diverging(frame(top), rows, cols, None),
        ),
        (
            "input_m-1.png",
            render::field(
                &f32s(&input.data()[(months - 1) * plane..]),
                rows,
                cols,
                Some(mask.cells()),
            ),
        ),
        (
            "contributions.png",
            render::contributions(&f32s(&c.positive), &f32s(&c.negative)),
        ),
    ];
    for (name, img) in figures {
        let p = dir.join(name);
        img.save(&p)?;
        rec.output(p);
    }
    Ok(json!({
        "sample": h.sample,
        "output": h.output,
        "baseline_output": h.baseline_output,
        "sum": h.sum(),
        "delta": h.delta(),
        "top_month": top,
    }))
}

fn explain_cmd(a: &ExplainArgs, rec: &mut Recorder) -> CliResult<Outcome> {
    let (ck, d) = load_pair(rec, &a.ckpt, a.data.as_ref())?;
    let lead = ck.lead;
    let ids = parse_samples(&a.sample)?;
    let all = d.samples(lead)?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= all.len()) {
        return Err(CliError::invalid(format!(
            "sample {bad} not in 0..{} for lead {lead}",
            all.len()
        )));
    }
    let target = pixel(&a.pixel, d.series.grid(), lead)?;
    let method = Method::parse(&a.method)?;
    let choice = BaselineChoice::parse(&a.baseline)?;
    let baseline = choice.resolve::<f64>(&d.series, d.baseline_pool(lead))?;
    let model: Model64 = ck.model.cast::<f64>();
    let run = |&id: &usize| -> climprobe::Result<(Tensor<f64>, Heatmap<f64>)> {
        let x = all[id].input::<f64>(&d.series)?;
        let h = explain(&model, &x, target, method, &baseline)?.with_sample(id);
        Ok((x, h))
    };
    let maps = if ids.len() > 1 {
        with_probe_pool(|| ids.par_iter().map(run).collect::<Vec<_>>())
    } else {
        ids.iter().map(run).collect()
    };
    let mut results = Vec::with_capacity(ids.len());
    for (id, m) in ids.iter().zip(maps) {
        let (x, h) = m?;
        let dir = if ids.len() == 1 {
            a.output.clone()
        } else {
            a.output.join(format!("sample{id}"))
        };
        results.push(write_heatmap(rec, &dir, &h, &x, &d.mask)?);
    }
    Ok(Outcome {
        manifest: a.output.join("manifest.json"),
        resolved: json!({
            "lead": lead,
            "data": d.path,
            "samples": ids,
            "target": target,
            "method": method,
            "baseline": choice,
        }),
        summary: json!({ "heatmaps": results }),
    })
}

// ---------------------------------------------------------------- aggregate

fn targets(a: &AggregateArgs, d: &Data) -> CliResult<Vec<(usize, usize)>> {
    let grid = d.series.grid();
    let mut out = Vec::new();
    for p in &a.pixel {
        let t = pixel(p, grid, 1)?;
        if !out.contains(&(t.row, t.col)) {
            out.push((t.row, t.col));
        }
    }
    if a.random_pixels > 0 {
        let pool: Vec<(usize, usize)> = (0..grid.0 * grid.1)
            .map(|i| (i / grid.1, i % grid.1))
            .filter(|&(r, c)| d.mask.is_ocean(r, c) && !out.contains(&(r, c)))
            .collect();
        if pool.len() < a.random_pixels {
            return Err(CliError::invalid(format!(
                "asked for {} random ocean pixels, {} available",
                a.random_pixels,
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(a.pixel_seed);
        let mut pick: Vec<(usize, usize)> = pool
            .choose_multiple(&mut rng, a.random_pixels)
            .copied()
            .collect();
        pick.sort_unstable();
        out.extend(pick);
    }
    if out.is_empty() {
        return Err(CliError::usage("give --pixel or --random-pixels"));
    }
    Ok(out)
}

fn write_report(rec: &mut Recorder, root: &Path, r: &GroupReport, radius: f64) -> CliResult<Value> {
    let dir = root.join(r.dir_name());
    r.export(&dir).map_err(|e| CliError::at(&dir, e))?;
    for f in [
        "meta.json",
        "pos.fsr",
        "neg.fsr",
        "series.csv",
        "input.fsr",
        "target.fsr",
        "output.fsr",
        "error.fsr",
    ] {
        rec.output(dir.join(f));
    }
    let [months, rows, cols]: [usize; 3] = r.mean_pos.shape().try_into().map_err(internal)?;
    let plane = rows * cols;
    let top = top_month(&r.series);
    let i = (months as i64 + top) as usize;
    let signed = f32s(r.mean_pos.sub(&r.mean_neg)?.data());
    let figures = [
        (
            "mean_top.png",
            render::diverging(&signed[i * plane..(i + 1) * plane], rows, cols, None),
        ),
        (
            "series.png",
            render::contributions(&f32s(&r.series.positive), &f32s(&r.series.negative)),
        ),
    ];
    for (name, img) in figures {
        let p = dir.join(name);
        img.save(&p)?;
        rec.output(p);
    }
    let magnitude = r.mean_pos.add(&r.mean_neg)?;
    Ok(json!({
        "dir": r.dir_name(),
        "lead": r.lead,
        "row": r.target.row,
        "col": r.target.col,
        "n": r.n,
        "top_month": top,
        "tail_mass": tail_mass(&r.series.total),
        "mass_within_radius": mass_within_radius(&magnitude, r.target.row, r.target.col, radius),
    }))
}

fn aggregate(a: &AggregateArgs, rec: &mut Recorder) -> CliResult<Outcome> {
    let method = Method::parse(&a.method)?;
    let choice = BaselineChoice::parse(&a.baseline)?;
    if !(a.radius >= 0.0) {
        return Err(CliError::invalid("radius must be >= 0"));
    }
    let mut reports: Vec<GroupReport> = Vec::new();
    let mut data: Option<Data> = None;
    let mut pixels = Vec::new();
    let mut leads = Vec::new();
    for path in &a.ckpt {
        let ck = load_ckpt(rec, path)?;
        if leads.contains(&ck.lead) {
            return Err(CliError::invalid(format!("lead {} given twice", ck.lead)));
        }
        if data.is_none() {
            let p = match (&a.data, &ck.data_index) {
                (Some(p), _) => p.clone(),
                (None, Some(p)) => PathBuf::from(p),
                (None, None) => {
                    return Err(CliError::usage(format!(
                        "{} records no dataset; pass --data",
                        path.display()
                    )))
                }
            };
            let d = Data::load(rec, &p)?;
            pixels = targets(a, &d)?;
            data = Some(d);
        }
        let d = data.as_ref().expect("loaded above");
        d.check_arch(ck.model.arch(), path)?;
        let mut windows = d.split(ck.lead, &a.split)?;
        if let Some(n) = a.limit {
            windows.truncate(n);
        }
        let req = GroupRequest {
            targets: pixels
                .iter()
                .map(|&(r, c)| PixelTarget::new(r, c).with_lead(ck.lead))
                .collect(),
            method,
            baseline: choice.resolve::<f64>(&d.series, d.baseline_pool(ck.lead))?,
            lead: ck.lead,
        };
        let model = ck.model.cast::<f64>();
        reports.extend(aggregate_groups(
            &model,
            &SampleSet::new(&d.series, &windows, &d.mask),
            &req,
        )?);
        leads.push(ck.lead);
    }
    mkdir(&a.output)?;
    let mut per_report = Vec::with_capacity(reports.len());
    for r in &reports {
        per_report.push(write_report(rec, &a.output, r, a.radius)?);
    }
    let mut similarity = Vec::new();
    for &lead in &leads {
        let group: Vec<GroupReport> = reports.iter().filter(|r| r.lead == lead).cloned().collect();
        if group.len() >= 2 {
            let m = compare_locations(&group)?;
            similarity.push(json!({ "lead": lead, "median": m.median(), "matrix": m }));
        }
    }
    let mut lead_cmp = Vec::new();
    if leads.len() >= 2 {
        for &(row, col) in &pixels {
            let group: Vec<GroupReport> = reports
                .iter()
                .filter(|r| (r.target.row, r.target.col) == (row, col))
                .cloned()
                .collect();
            lead_cmp
                .push(json!({ "row": row, "col": col, "comparison": compare_leadtimes(&group)? }));
        }
    }
    let summary = json!({
        "method": method,
        "split": a.split,
        "radius": a.radius,
        "reports": per_report,
        "location_similarity": similarity,
        "lead_comparison": lead_cmp,
    });
    write(rec, a.output.join("summary.json"), pretty(&summary)?)?;
    let d = data.expect("at least one checkpoint");
    Ok(Outcome {
        manifest: a.output.join("manifest.json"),
        resolved: json!({
            "data": d.path,
            "leads": leads,
            "pixels": pixels,
            "method": method,
            "baseline": choice,
        }),
        summary: json!({
            "reports": reports.len(),
            "location_similarity": summary["location_similarity"]
                .as_array()
                .map(|v| v.iter().map(|s| json!({"lead": s["lead"], "median": s["median"]})).collect::<Vec<_>>()),
        }),
    })
}

// ---------------------------------------------------------------- ablate

fn ablate(a: &AblateArgs, rec: &mut Recorder) -> CliResult<Outcome> {
    let (ck, d) = load_pair(rec, &a.ckpt, a.data.as_ref())?;
    let w = window(&d, ck.lead, a.sample)?;
    let rect = parse_rect(&a.rect)?;
    let mut spec = AblationSpec::new(rect).with_fill(a.fill, !a.raw_fill);
    if let Some(m) = parse_months(&a.months, d.index.input_months)? {
        spec = spec.with_months(m);
    }
    let model = ck.model.cast::<f64>();
    let x = w.input::<f64>(&d.series)?;
    let res = ablation_diff(&model, &x, &spec, Some(&d.mask))?;
    res.export(&a.output)
        .map_err(|e| CliError::at(&a.output, e))?;
    for f in ["diff.fsr", "diff_masked.fsr", "stats.json"] {
        rec.output(a.output.join(f));
    }
    let (h, wd) = d.series.grid();
    let diff = f32s(res.diff.data());
    let figures = [
        ("diff.png", render::diverging(&diff, h, wd, None)),
        (
            "diff_masked.png",
            render::diverging(&diff, h, wd, Some(d.mask.cells())),
        ),
    ];
    for (name, img) in figures {
        let p = a.output.join(name);
        img.save(&p)?;
        rec.output(p);
    }
    Ok(Outcome {
        manifest: a.output.join("manifest.json"),
        resolved: json!({ "lead": ck.lead, "data": d.path, "spec": spec }),
        summary: to_value(&res.stats)?,
    })
}

// ---------------------------------------------------------------- serve

fn load_error(e: LoadError) -> CliError {
    match e {
        LoadError::Io(p, io) => CliError::io(&p, io),
        LoadError::Core(p, c) => CliError::at(&p, c),
        LoadError::Incompatible(m) => CliError::new("incompatible_input", EXIT_INCOMPATIBLE, m),
    }
}

pub fn serve(a: &ServeArgs) -> CliResult<()> {
    let mut cfg = ServiceConfig::new(&a.data);
    cfg.host = a.host.clone();
    cfg.port = a.port;
    cfg.reports = a.reports.clone();
    cfg.ui = a.ui.clone();
    cfg.cache_capacity = a.cache;
    cfg.budget = Duration::from_millis(a.budget_ms);
    for c in &a.ckpt {
        cfg.ckpts.push(parse_ckpt_flag(c).map_err(CliError::usage)?);
    }
    let hash = ServiceManifest::of(&cfg).map_err(load_error)?.hash();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(internal)?;
    println!(
        "{}",
        json!({
            "status": "serving",
            "url": format!("http://{}:{}/", cfg.host, cfg.port),
            "manifest_hash": hash,
        })
    );
    rt.block_on(probe_service::serve(cfg)).map_err(|e| match e {
        ServeError::Load(l) => load_error(l),
        ServeError::Io(io) => CliError::new("io", climprobe_cli::error::EXIT_IO, io.to_string()),
    })
}
