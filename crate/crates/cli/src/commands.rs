use std::path::{Path, PathBuf};

use anyhow::Context;
use nowcast_core::eval::{
    batch_size_sweep, benchmark_scaling, evaluate_dataset, histogram_match_local, infer_grid, persistence_forecast,
    stack_frames, write_batch_csv, write_lead_csv, write_speedup_csv, InferOptions, LeadMseAccumulator,
};
use nowcast_core::net::{load_weights, save_weights};
use nowcast_core::pipeline::{build_dataset, compute_norm_stats, normalize_with, read_dataset, write_dataset};
use nowcast_core::sim::{read_mosaics, write_mosaics, StormSimulator};
use nowcast_core::trainer::{load_checkpoint, params_hash, run_epochs, save_checkpoint, write_metrics_csv};
use nowcast_core::{
    build_model, Error, Mosaic, MosaicSequence, NormStats, PatchDataset, PipelineConfig, TrainConfig, TrainerState,
    TrainingReport,
};
use serde_json::json;

use crate::config::RunConfig;
use crate::run::RunDir;

pub const MOSAICS_FILE: &str = "mosaics.vil1";
pub const TRAIN_FILE: &str = "train.nwc";
pub const TEST_FILE: &str = "test.nwc";
pub const NORM_FILE: &str = "norm_stats.json";
pub const WEIGHTS_FILE: &str = "weights.nww";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

type Outcome = anyhow::Result<Vec<PathBuf>>;

fn datasets(data: &Path) -> anyhow::Result<(PatchDataset, PatchDataset)> {
    let train = read_dataset(&data.join(TRAIN_FILE)).with_context(|| format!("reading {}", data.join(TRAIN_FILE).display()))?;
    let test = read_dataset(&data.join(TEST_FILE)).with_context(|| format!("reading {}", data.join(TEST_FILE).display()))?;
    if (train.patch(), train.in_channels(), train.out_channels()) != (test.patch(), test.in_channels(), test.out_channels()) {
        return Err(Error::Data("train and test datasets differ in layout".into()).into());
    }
    Ok((train, test))
}

fn read_norm(data: &Path) -> anyhow::Result<NormStats> {
    let path = data.join(NORM_FILE);
    let bytes = std::fs::read(&path).map_err(Error::from).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())).into())
}

/// Simulate a sequence, split it in time, and write normalized datasets.
pub fn gen_data(cfg: &RunConfig, run: &RunDir) -> Outcome {
    let p = &cfg.pipeline;
    let sim = StormSimulator::new(cfg.sim_config())?;
    let seq = sim.sequence()?;
    let mask = sim.coverage();
    let split = seq.len() - p.test_frames;
    let build = |seq: &MosaicSequence, samples: usize, seed: u64| {
        let pc = PipelineConfig { patch: p.patch, samples, patches_per_window: p.patches_per_window, w_floor: p.w_floor, seed };
        build_dataset(seq, &mask, &pc)
    };
    let train_raw = build(&seq.slice(0, split), p.train_samples, cfg.seed.wrapping_add(1))?;
    let stats = compute_norm_stats(&train_raw)?;
    let train = normalize_with(&train_raw, stats);
    drop(train_raw);
    let test = normalize_with(&build(&seq.slice(split, seq.len()), p.test_samples, cfg.seed.wrapping_add(2))?, stats);

    write_mosaics(&run.file(MOSAICS_FILE), &seq)?;
    write_dataset(&run.file(TRAIN_FILE), &train)?;
    write_dataset(&run.file(TEST_FILE), &test)?;
    run.write_json(NORM_FILE, &stats)?;
    run.write_json(
        "summary.json",
        &json!({
            "grid": [seq.h, seq.w],
            "frames": seq.len(),
            "train_frames": split,
            "test_frames": p.test_frames,
            "patch": p.patch,
            "train_samples": train.len(),
            "test_samples": test.len(),
            "norm": stats,
            "coverage_pixels": mask.count(),
        }),
    )?;
    println!("train samples: {}", train.len());
    println!("test samples:  {}", test.len());
    println!("norm stats:    mean {:.6} std {:.6}", stats.mean, stats.std);
    Ok(vec![])
}

fn merge(into: &mut Option<TrainingReport>, next: TrainingReport) {
    match into {
        None => *into = Some(next),
        Some(acc) => {
            acc.records.extend(next.records);
            acc.total_wall_seconds += next.total_wall_seconds;
            acc.min_val_loss = match (acc.min_val_loss, next.min_val_loss) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
            acc.replica_hashes.extend(next.replica_hashes);
        }
    }
}

pub fn train(cfg: &RunConfig, run: &RunDir, data: &Path, resume: Option<&Path>) -> Outcome {
    let (train_set, test_set) = datasets(data)?;
    let mcfg = cfg.model_config(train_set.patch());
    let (model, params) = build_model(&mcfg, cfg.init_seed())?;
    let tcfg = cfg.train_config();
    let mut state = match resume {
        Some(path) => load_checkpoint(path, &tcfg, mcfg.hash()).with_context(|| format!("resuming from {}", path.display()))?,
        None => TrainerState::new(&tcfg, params),
    };
    let start_epoch = state.epoch;
    let every = if cfg.checkpoint_every == 0 { tcfg.epochs.max(1) } else { cfg.checkpoint_every };
    let mut report = None;
    loop {
        let until = (state.epoch + every).min(tcfg.epochs);
        merge(&mut report, run_epochs(&tcfg, &model, &mut state, &train_set, &test_set, until)?);
        if state.epoch >= tcfg.epochs {
            break;
        }
        save_checkpoint(&run.file(&format!("checkpoint-e{:04}.ckpt", state.epoch)), &state, &tcfg, mcfg.hash())?;
    }
    let report = report.expect("at least one pass");

    save_weights(&run.file(WEIGHTS_FILE), &state.params, &mcfg)?;
    save_checkpoint(&run.file(CHECKPOINT_FILE), &state, &tcfg, mcfg.hash())?;
    run.write("metrics.csv", |w| write_metrics_csv(w, &report.records))?;
    let curve: Vec<_> = report.val_curve().into_iter().map(|(e, l)| json!({"epoch": e, "val_loss": l})).collect();
    run.write_json(
        "report.json",
        &json!({
            "workers": tcfg.workers,
            "batch": tcfg.batch,
            "start_epoch": start_epoch,
            "end_epoch": state.epoch,
            "iterations": state.iteration,
            "steps_per_epoch": report.steps_per_epoch,
            "min_val_loss": report.min_val_loss,
            "val_curve": curve,
            "replicas_consistent": report.replicas_consistent(),
            "params_hash": format!("{:016x}", params_hash(&state.params)),
            "total_wall_seconds": report.total_wall_seconds,
        }),
    )?;
    println!("epochs {}..{} done, min val loss {:?}", start_epoch, state.epoch, report.min_val_loss);
    let mut inputs = vec![data.join(TRAIN_FILE), data.join(TEST_FILE)];
    inputs.extend(resume.map(Path::to_path_buf));
    Ok(inputs)
}

pub fn eval(cfg: &RunConfig, run: &RunDir, data: &Path, weights: Option<&Path>) -> Outcome {
    let test = read_dataset(&data.join(TEST_FILE))?;
    let crop = cfg.eval.crop;
    let mut tables = Vec::new();
    match weights {
        Some(path) => {
            let mcfg = cfg.model_config(test.patch());
            let (model, _) = build_model(&mcfg, cfg.init_seed())?;
            let params = load_weights(path, &mcfg).with_context(|| format!("loading {}", path.display()))?;
            let (m, p) = evaluate_dataset(&model, &params, &test, crop, cfg.eval.batch)?;
            tables.extend([m, p]);
        }
        None => {
            let mut acc = LeadMseAccumulator::new(crop);
            let idx: Vec<usize> = (0..test.len()).collect();
            for chunk in idx.chunks(cfg.eval.batch.max(1)) {
                let (x, y) = test.batch(chunk);
                acc.add(&persistence_forecast(&x)?, &y)?;
            }
            tables.push(acc.finish("persistence"));
        }
    }
    run.write("lead_mse.csv", |w| write_lead_csv(w, &tables))?;
    let mut summary = json!({ "samples": test.len(), "crop": crop, "tables": tables });
    if let [m, p] = &tables[..] {
        let gap = |lead| p.mse(lead).zip(m.mse(lead)).map(|(p, m)| p - m);
        summary["gap_10"] = json!(gap(10));
        summary["gap_60"] = json!(gap(60));
        summary["beats_persistence"] = json!(m.rows.iter().zip(&p.rows).all(|(a, b)| a.1 < b.1));
    }
    run.write_json("summary.json", &summary)?;
    for t in &tables {
        let row: Vec<String> = t.rows.iter().map(|(l, v)| format!("{l}:{v:.4}")).collect();
        println!("{:<12} {}", t.method, row.join(" "));
    }
    let mut inputs = vec![data.join(TEST_FILE)];
    inputs.extend(weights.map(Path::to_path_buf));
    Ok(inputs)
}

fn bench_train_config(cfg: &RunConfig) -> TrainConfig {
    let t = cfg.train_config();
    let epochs = cfg.eval.bench_epochs;
    TrainConfig { epochs, warmup_epochs: t.warmup_epochs.min(epochs), ..t }
}

pub fn bench_scaling(cfg: &RunConfig, run: &RunDir, data: &Path) -> Outcome {
    let (train_set, test_set) = datasets(data)?;
    let mcfg = cfg.model_config(train_set.patch());
    let (model, params) = build_model(&mcfg, cfg.init_seed())?;
    let base = bench_train_config(cfg);
    let report = benchmark_scaling(&base, &model, &params, &train_set, &test_set, &cfg.eval.bench_workers)?;
    run.write("speedup.csv", |w| write_speedup_csv(w, &report.table))?;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    run.write_json(
        "scaling.json",
        &json!({
            "epochs": base.epochs,
            "batch": base.batch,
            "available_parallelism": cores,
            "table": report.table,
            "min_val_losses": report.min_val_losses,
        }),
    )?;
    for r in &report.table.rows {
        println!("N={} T={:.3}s S={:.3} R={}", r.workers, r.seconds, r.speedup, r.relative.map_or("-".into(), |v| format!("{v:.3}")));
    }
    Ok(vec![data.join(TRAIN_FILE), data.join(TEST_FILE)])
}

pub fn bench_batch(cfg: &RunConfig, run: &RunDir, data: &Path) -> Outcome {
    let (train_set, test_set) = datasets(data)?;
    let mcfg = cfg.model_config(train_set.patch());
    let (model, params) = build_model(&mcfg, cfg.init_seed())?;
    let base = bench_train_config(cfg);
    let rows = batch_size_sweep(&base, &model, &params, &train_set, &test_set, &cfg.eval.bench_batches)?;
    run.write("batch.csv", |w| write_batch_csv(w, &rows))?;
    run.write_json("batch.json", &json!({ "epochs": base.epochs, "workers": base.workers, "rows": rows }))?;
    for r in &rows {
        println!("batch={} T={:.3}s min_val_loss={:.6}", r.batch, r.seconds, r.min_val_loss);
    }
    Ok(vec![data.join(TRAIN_FILE), data.join(TEST_FILE)])
}

fn to_vil(values: &[f64], what: &str) -> anyhow::Result<Vec<u8>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()).into());
    }
    Ok(values.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect())
}

fn crop_frame(f: &Mosaic, y0: usize, x0: usize, h: usize, w: usize) -> Mosaic {
    let grid = (y0..y0 + h).flat_map(|y| f.grid[y * f.w + x0..y * f.w + x0 + w].iter().copied()).collect();
    Mosaic { timestamp_minutes: f.timestamp_minutes, h, w, grid }
}

pub fn infer(cfg: &RunConfig, run: &RunDir, mosaics: &Path, weights: &Path, data: &Path) -> Outcome {
    let seq = read_mosaics(mosaics).with_context(|| format!("reading {}", mosaics.display()))?;
    let norm = read_norm(data)?;
    let n = seq.len() as i64;
    let t0 = if cfg.eval.infer_frame < 0 { n + cfg.eval.infer_frame } else { cfg.eval.infer_frame };
    if t0 < 6 || t0 >= n {
        return Err(Error::Config(format!("eval.infer_frame resolves to {t0}; needs 6..{n} for a 7-frame history")).into());
    }
    let t0 = t0 as usize;
    let mcfg = cfg.model_config(cfg.pipeline.patch);
    let (model, _) = build_model(&mcfg, cfg.init_seed())?;
    let params = load_weights(weights, &mcfg).with_context(|| format!("loading {}", weights.display()))?;

    // Largest accepted extent along each axis, centred.
    let fit = |n: usize| -> anyhow::Result<usize> {
        if model.plan(n, n).is_ok() {
            return Ok(n);
        }
        nowcast_core::net::nearest_valid_sizes(&mcfg, n).0.ok_or_else(|| {
            Error::Config(format!("grid extent {n} is smaller than the smallest accepted input")).into()
        })
    };
    let (hv, wv) = (fit(seq.h)?, fit(seq.w)?);
    let (y0, x0) = ((seq.h - hv) / 2, (seq.w - wv) / 2);
    let history: Vec<Mosaic> = seq.frames[t0 - 6..=t0].iter().map(|f| crop_frame(f, y0, x0, hv, wv)).collect();
    let raw = stack_frames(&history.iter().collect::<Vec<_>>())?;
    let opts = InferOptions { workers: cfg.train.workers, tile_px: (cfg.eval.infer_tile > 0).then_some(cfg.eval.infer_tile) };
    let fc = infer_grid(&model, &params, &raw, norm, opts)?;

    let (oh, ow, c) = (fc.frames.shape()[0], fc.frames.shape()[1], fc.frames.shape()[2]);
    let issue = &seq.frames[t0];
    let data_hw = fc.frames.data();
    let mut frames = Vec::with_capacity(c);
    for k in 0..c {
        let plane: Vec<f64> = (0..oh * ow).map(|p| data_hw[p * c + k]).collect();
        frames.push(Mosaic {
            timestamp_minutes: issue.timestamp_minutes + (seq.frame_dt_minutes as i64) * (k as i64 + 1),
            h: oh,
            w: ow,
            grid: to_vil(&plane, "forecast")?,
        });
    }
    let out = MosaicSequence { h: oh, w: ow, frame_dt_minutes: seq.frame_dt_minutes, frames };
    let reference = crop_frame(issue, y0 + fc.offset, x0 + fc.offset, oh, ow);
    let reference = MosaicSequence { h: oh, w: ow, frame_dt_minutes: seq.frame_dt_minutes, frames: vec![reference] };
    write_mosaics(&run.file("forecast.vil1"), &out)?;
    write_mosaics(&run.file("reference.vil1"), &reference)?;
    run.write_json(
        "infer.json",
        &json!({
            "issue_frame": t0,
            "issue_minutes": issue.timestamp_minutes,
            "grid_in": [seq.h, seq.w],
            "grid_used": [hv, wv],
            "grid_origin": [y0, x0],
            "output": [oh, ow],
            "output_origin": [y0 + fc.offset, x0 + fc.offset],
            "workers": opts.workers,
            "tile_px": opts.tile_px,
            "wall_seconds": fc.wall_seconds,
        }),
    )?;
    println!("forecast {oh}x{ow}x{c} from {hv}x{wv} input in {:.3}s", fc.wall_seconds);
    Ok(vec![mosaics.to_path_buf(), weights.to_path_buf(), data.join(NORM_FILE)])
}

pub fn match_hist(cfg: &RunConfig, run: &RunDir, forecast: &Path, reference: &Path) -> Outcome {
    let fc = read_mosaics(forecast).with_context(|| format!("reading {}", forecast.display()))?;
    let rf = read_mosaics(reference).with_context(|| format!("reading {}", reference.display()))?;
    let r = rf.frames.last().ok_or_else(|| Error::Data("reference file has no frames".into()))?;
    if (r.h, r.w) != (fc.h, fc.w) {
        return Err(Error::Data(format!("reference is {}x{}, forecast {}x{}", r.h, r.w, fc.h, fc.w)).into());
    }
    let hc = cfg.hist_config();
    let rv: Vec<f64> = r.grid.iter().map(|&v| v as f64).collect();
    let mean = |g: &[u8]| g.iter().map(|&v| v as f64).sum::<f64>() / g.len().max(1) as f64;
    let mut frames = Vec::with_capacity(fc.len());
    let mut stats = Vec::new();
    for f in &fc.frames {
        let fv: Vec<f64> = f.grid.iter().map(|&v| v as f64).collect();
        let matched = to_vil(&histogram_match_local(&fv, &rv, f.h, f.w, &hc)?, "matched forecast")?;
        stats.push(json!({ "timestamp_minutes": f.timestamp_minutes, "mean_before": mean(&f.grid), "mean_after": mean(&matched) }));
        frames.push(Mosaic { grid: matched, ..f.clone() });
    }
    let out = MosaicSequence { frames, ..fc.clone() };
    write_mosaics(&run.file("matched.vil1"), &out)?;
    run.write_json(
        "match.json",
        &json!({ "tile_px": hc.tile_px, "bins": hc.bins, "reference_mean": mean(&r.grid), "frames": stats }),
    )?;
    println!("matched {} frames of {}x{}", out.len(), out.h, out.w);
    Ok(vec![forecast.to_path_buf(), reference.to_path_buf()])
}
