//! Forecast scoring, histogram matching, whole-grid inference and the
//! scaling / batch-size benchmark harness.

use std::io::{self, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ParameterSet;
use crate::net::{nearest_valid_sizes, NowcastModel};
use crate::pipeline::{NormStats, PatchDataset, IN_CHANNELS, OUT_CHANNELS};
use crate::sim::Mosaic;
use crate::tensor::{center_crop, Tensor};
use crate::trainer::{self, TrainConfig};

pub const LEAD_STEP_MINUTES: u32 = 10;

/// Repeat the most recent input frame for every lead time.
pub fn persistence_forecast(x: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    if c != IN_CHANNELS {
        return Err(Error::shape("persistence", format!("expected {IN_CHANNELS} channels, got {c}")));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = OUT_CHANNELS;
    let data = x.data().chunks_exact(IN_CHANNELS).flat_map(|px| [px[IN_CHANNELS - 1]; OUT_CHANNELS]).collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadTimeMse {
    pub method: String,
    /// `(lead_minutes, mse)`, leads increasing.
    pub rows: Vec<(u32, f64)>,
}

impl LeadTimeMse {
    pub fn mse(&self, lead_minutes: u32) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == lead_minutes).map(|r| r.1)
    }
}

/// Per-lead squared error sums over the central `crop x crop` window.
#[derive(Debug, Clone)]
pub struct LeadMseAccumulator {
    crop: usize,
    sums: Vec<f64>,
    count: usize,
}

impl LeadMseAccumulator {
    pub fn new(crop: usize) -> Self {
        LeadMseAccumulator { crop, sums: vec![0.0; OUT_CHANNELS], count: 0 }
    }

    /// Add a batch; `pred` and `truth` are `[b, h, w, 6]` with possibly
    /// different spatial extents, both centre-cropped to the window.
    pub fn add(&mut self, pred: &Tensor, truth: &Tensor) -> Result<()> {
        let (pb, _, _, pc) = pred.dims4()?;
        let (tb, _, _, tc) = truth.dims4()?;
        if pb != tb || pc != OUT_CHANNELS || tc != OUT_CHANNELS {
            return Err(Error::shape("mse_by_lead", format!("{:?} vs {:?}", pred.shape(), truth.shape())));
        }
        let p = center_crop(pred, self.crop, self.crop)?;
        let t = center_crop(truth, self.crop, self.crop)?;
        for (a, b) in p.data().chunks_exact(OUT_CHANNELS).zip(t.data().chunks_exact(OUT_CHANNELS)) {
            for c in 0..OUT_CHANNELS {
                let d = a[c] - b[c];
                self.sums[c] += d * d;
            }
        }
        self.count += pb;
        Ok(())
    }

    pub fn finish(&self, method: impl Into<String>) -> LeadTimeMse {
        let denom = (self.count * self.crop * self.crop).max(1) as f64;
        LeadTimeMse {
            method: method.into(),
            rows: (0..OUT_CHANNELS).map(|c| ((c as u32 + 1) * LEAD_STEP_MINUTES, self.sums[c] / denom)).collect(),
        }
    }
}

pub fn mse_by_lead(pred: &Tensor, truth: &Tensor, crop: usize, method: &str) -> Result<LeadTimeMse> {
    let mut acc = LeadMseAccumulator::new(crop);
    acc.add(pred, truth)?;
    Ok(acc.finish(method))
}

/// Lead-time MSE of the model and of persistence over a whole dataset.
pub fn evaluate_dataset(
    model: &NowcastModel,
    params: &ParameterSet,
    ds: &PatchDataset,
    crop: usize,
    batch: usize,
) -> Result<(LeadTimeMse, LeadTimeMse)> {
    let mut m = LeadMseAccumulator::new(crop);
    let mut p = LeadMseAccumulator::new(crop);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = ds.batch(chunk);
        m.add(&model.forward_final(params, &x)?, &y)?;
        p.add(&persistence_forecast(&x)?, &y)?;
    }
    Ok((m.finish("model"), p.finish("persistence")))
}

pub fn write_lead_csv(w: &mut impl Write, tables: &[LeadTimeMse]) -> io::Result<()> {
    writeln!(w, "lead_minutes,method,mse")?;
    for t in tables {
        for &(lead, mse) in &t.rows {
            writeln!(w, "{lead},{},{mse:e}", t.method)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistMatchConfig {
    pub tile_px: usize,
    pub bins: usize,
}

impl Default for HistMatchConfig {
    fn default() -> Self {
        HistMatchConfig { tile_px: 64, bins: 256 }
    }
}

impl HistMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_px < 8 || self.bins < 16 {
            return Err(Error::Config(format!("hist match needs tile_px >= 8 and bins >= 16, got {self:?}")));
        }
        Ok(())
    }
}

/// Tile geometry along one axis: `(start, end)` per tile.
fn axis_tiles(n: usize, tile: usize) -> Vec<(usize, usize)> {
    if tile >= n {
        return vec![(0, n)];
    }
    (0..n.div_ceil(tile)).map(|t| (t * tile, ((t + 1) * tile).min(n))).collect()
}

/// Two nearest tile centres along an axis and the weight of the second.
fn axis_blend(tiles: &[(usize, usize)], p: usize) -> (usize, usize, f64) {
    let centre = |t: usize| (tiles[t].0 + tiles[t].1) as f64 / 2.0;
    let pos = p as f64 + 0.5;
    let t0 = (0..tiles.len()).rev().find(|&t| centre(t) <= pos).unwrap_or(0);
    let t1 = (t0 + 1).min(tiles.len() - 1);
    if t1 == t0 || pos <= centre(t0) {
        return (t0, t0, 0.0);
    }
    let f = ((pos - centre(t0)) / (centre(t1) - centre(t0))).clamp(0.0, 1.0);
    (t0, t1, f)
}

/// Source CDF (sorted values) and reference binned CDF for a tile.
#[derive(Debug, Clone)]
pub struct TileMapping {
    sorted_src: Vec<f64>,
    /// `cdf[k]` = fraction of reference values below bin edge `k`.
    ref_cdf: Vec<f64>,
    lo: f64,
    width: f64,
}

impl TileMapping {
    fn new(src: Vec<f64>, reference: &[f64], lo: f64, width: f64, bins: usize) -> Self {
        let mut sorted_src = src;
        sorted_src.sort_by(f64::total_cmp);
        let mut counts = vec![0usize; bins];
        for &v in reference {
            counts[bin_of(v, lo, width, bins)] += 1;
        }
        let mut ref_cdf = Vec::with_capacity(bins + 1);
        let mut run = 0usize;
        ref_cdf.push(0.0);
        for c in counts {
            run += c;
            ref_cdf.push(run as f64 / reference.len() as f64);
        }
        *ref_cdf.last_mut().unwrap() = 1.0;
        TileMapping { sorted_src, ref_cdf, lo, width }
    }

    /// Fraction of source values `<= v`.
    pub fn src_cdf(&self, v: f64) -> f64 {
        self.sorted_src.partition_point(|&s| s <= v) as f64 / self.sorted_src.len() as f64
    }

    /// Reference CDF, linear within each bin.
    pub fn ref_cdf_at(&self, x: f64) -> f64 {
        let bins = self.ref_cdf.len() - 1;
        let t = ((x - self.lo) / self.width).clamp(0.0, bins as f64);
        let k = (t.floor() as usize).min(bins - 1);
        let frac = t - k as f64;
        self.ref_cdf[k] + frac * (self.ref_cdf[k + 1] - self.ref_cdf[k])
    }

    /// `Q_ref(F_src(v))` for this tile alone.
    pub fn map(&self, v: f64) -> f64 {
        blended_quantile(&[(self, 1.0)], self.src_cdf(v), self.lo, self.width)
    }
}

fn bin_of(v: f64, lo: f64, width: f64, bins: usize) -> usize {
    (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1)
}

/// Inverse of the weighted mixture of reference CDFs at probability `p`,
/// the smallest `x` whose blended CDF reaches `p`.
fn blended_quantile(parts: &[(&TileMapping, f64)], p: f64, lo: f64, width: f64) -> f64 {
    let bins = parts[0].0.ref_cdf.len() - 1;
    let edge = |k: usize| parts.iter().map(|(m, w)| w * m.ref_cdf[k]).sum::<f64>();
    let total = edge(bins);
    let p = p.min(total);
    // first edge k with blended cdf >= p
    let (mut a, mut b) = (0usize, bins);
    while a < b {
        let mid = (a + b) / 2;
        if edge(mid) >= p {
            b = mid;
        } else {
            a = mid + 1;
        }
    }
    let k = a;
    if k == 0 {
        return lo;
    }
    let (c0, c1) = (edge(k - 1), edge(k));
    let frac = if c1 > c0 { ((p - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 1.0 };
    lo + ((k - 1) as f64 + frac) * width
}

/// Locally match the forecast's histogram to the reference's.
///
/// Each tile gets an empirical source CDF and a binned reference CDF; a pixel
/// uses the bilinear mixture of its four nearest tiles for both, so tile
/// borders do not show seams. Bins span the joint range of both frames.
pub fn histogram_match_local(forecast: &[f64], reference: &[f64], h: usize, w: usize, cfg: &HistMatchConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if forecast.len() != h * w || reference.len() != h * w {
        return Err(Error::shape("histogram_match", format!("frames must both be {h}x{w}")));
    }
    if let Some(v) = forecast.iter().chain(reference).find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("histogram matching needs finite values, found {v}")));
    }
    let (lo, hi) = forecast
        .iter()
        .chain(reference)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi == lo {
        return Ok(vec![lo; h * w]);
    }
    let width = (hi - lo) / cfg.bins as f64;
    let (ty, tx) = (axis_tiles(h, cfg.tile_px), axis_tiles(w, cfg.tile_px));
    let mut maps = Vec::with_capacity(ty.len() * tx.len());
    for &(y0, y1) in &ty {
        for &(x0, x1) in &tx {
            let gather = |f: &[f64]| -> Vec<f64> { (y0..y1).flat_map(|y| f[y * w + x0..y * w + x1].to_vec()).collect() };
            maps.push(TileMapping::new(gather(forecast), &gather(reference), lo, width, cfg.bins));
        }
    }
    let xb: Vec<(usize, usize, f64)> = (0..w).map(|x| axis_blend(&tx, x)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (a0, a1, fy) = axis_blend(&ty, y);
        for x in 0..w {
            let (b0, b1, fx) = xb[x];
            let parts = [
                (&maps[a0 * tx.len() + b0], (1.0 - fy) * (1.0 - fx)),
                (&maps[a0 * tx.len() + b1], (1.0 - fy) * fx),
                (&maps[a1 * tx.len() + b0], fy * (1.0 - fx)),
                (&maps[a1 * tx.len() + b1], fy * fx),
            ];
            let v = forecast[y * w + x];
            let p: f64 = parts.iter().map(|(m, wt)| wt * m.src_cdf(v)).sum();
            out[y * w + x] = blended_quantile(&parts, p, lo, width);
        }
    }
    Ok(out)
}

/// Tile mappings of a frame pair, row-major over tiles; for inspection.
pub fn tile_mappings(forecast: &[f64], reference: &[f64], h: usize, w: usize, cfg: &HistMatchConfig) -> Result<Vec<TileMapping>> {
    cfg.validate()?;
    let (lo, hi) = forecast
        .iter()
        .chain(reference)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let width = ((hi - lo) / cfg.bins as f64).max(f64::MIN_POSITIVE);
    let mut maps = Vec::new();
    for &(y0, y1) in &axis_tiles(h, cfg.tile_px) {
        for &(x0, x1) in &axis_tiles(w, cfg.tile_px) {
            let gather = |f: &[f64]| -> Vec<f64> { (y0..y1).flat_map(|y| f[y * w + x0..y * w + x1].to_vec()).collect() };
            maps.push(TileMapping::new(gather(forecast), &gather(reference), lo, width, cfg.bins));
        }
    }
    Ok(maps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferOptions {
    pub workers: usize,
    /// Input tile edge; `None` runs the whole grid in one pass.
    pub tile_px: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GridForecast {
    /// `[oh, ow, 6]`, digital-VIL units.
    pub frames: Tensor,
    /// Input row/column of output pixel `(0, 0)`.
    pub offset: usize,
    pub wall_seconds: f64,
}

/// Stack seven mosaics (oldest first) into a raw `[1, H, W, 7]` input.
pub fn stack_frames(frames: &[&Mosaic]) -> Result<Tensor> {
    if frames.len() != IN_CHANNELS {
        return Err(Error::Data(format!("inference needs {IN_CHANNELS} frames, got {}", frames.len())));
    }
    let (h, w) = (frames[0].h, frames[0].w);
    if frames.iter().any(|f| (f.h, f.w) != (h, w)) {
        return Err(Error::Data("input frames differ in size".into()));
    }
    let mut data = Vec::with_capacity(h * w * IN_CHANNELS);
    for p in 0..h * w {
        data.extend(frames.iter().map(|f| f.grid[p] as f64));
    }
    Tensor::new(vec![1, h, w, IN_CHANNELS], data)
}

fn check_grid(model: &NowcastModel, h: usize, w: usize) -> Result<usize> {
    match model.plan(h, w) {
        Ok(plan) => Ok(plan.output().h),
        Err(e) => {
            let mut hint = String::new();
            for (axis, n) in [("height", h), ("width", w)] {
                if model.plan(n, n).is_err() {
                    let (below, above) = nearest_valid_sizes(model.config(), n);
                    let show = |s: Option<usize>| s.map_or("none".to_string(), |v| v.to_string());
                    hint.push_str(&format!(" {axis} {n}: nearest valid {} / {};", show(below), show(above)));
                }
            }
            Err(Error::Config(format!("grid {h}x{w} not accepted ({e});{hint}")))
        }
    }
}

/// Forecast six frames for a raw `[1, H, W, 7]` grid.
pub fn infer_grid(
    model: &NowcastModel,
    params: &ParameterSet,
    raw: &Tensor,
    norm: NormStats,
    opts: InferOptions,
) -> Result<GridForecast> {
    let start = Instant::now();
    let (b, h, w, c) = raw.dims4()?;
    if b != 1 || c != IN_CHANNELS {
        return Err(Error::shape("infer_grid", format!("expected [1, H, W, {IN_CHANNELS}], got {:?}", raw.shape())));
    }
    let oh = check_grid(model, h, w)?;
    let ow = model.plan(h, w)?.output().w;
    let offset = (h - oh) / 2;
    let x = Tensor::new(raw.shape().to_vec(), raw.data().iter().map(|&v| norm.apply(v)).collect())?;
    let out = match opts.tile_px {
        None => model.forward_final(params, &x)?,
        Some(tile) => tiled_forward(model, params, &x, tile, opts.workers.max(1), (oh, ow))?,
    };
    let (_, fh, fw, fc) = out.dims4()?;
    let frames = Tensor::new(vec![fh, fw, fc], out.into_data().into_iter().map(|v| norm.invert(v)).collect())?;
    Ok(GridForecast { frames, offset, wall_seconds: start.elapsed().as_secs_f64() })
}

fn tile_starts(n: usize, tile: usize, step: usize, align: usize) -> Result<Vec<usize>> {
    if !(n - tile).is_multiple_of(align) {
        return Err(Error::Config(format!("tile {tile} does not align with grid extent {n}")));
    }
    let mut starts: Vec<usize> = (0..=n - tile).step_by(step).collect();
    if *starts.last().unwrap() != n - tile {
        starts.push(n - tile);
    }
    Ok(starts)
}

/// Run aligned, overlapping tiles and stitch their outputs. Valid
/// convolutions make the network translation-equivariant under shifts by the
/// alignment, so each tile reproduces its block of the single-pass output.
fn tiled_forward(
    model: &NowcastModel,
    params: &ParameterSet,
    x: &Tensor,
    tile: usize,
    workers: usize,
    (oh, ow): (usize, usize),
) -> Result<Tensor> {
    let (_, h, w, c) = x.dims4()?;
    let align = model.config().alignment();
    let (th, tw) = (tile.min(h), tile.min(w));
    let tile_out = |n: usize| check_grid(model, n, n);
    let (toh, tow) = (tile_out(th)?, tile_out(tw)?);
    let shrink = th - toh;
    let step = |to: usize| ((to / align) * align).max(align);
    let ys = tile_starts(h, th, step(toh), align)?;
    let xs = tile_starts(w, tw, step(tow), align)?;
    let jobs: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();

    let next = AtomicUsize::new(0);
    let out = Mutex::new(vec![0.0; oh * ow * OUT_CHANNELS]);
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.min(jobs.len()) {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(y0, x0)) = jobs.get(j) else { break };
                let mut sub = vec![0.0; th * tw * c];
                for i in 0..th {
                    let src = ((y0 + i) * w + x0) * c;
                    sub[i * tw * c..(i + 1) * tw * c].copy_from_slice(&x.data()[src..src + tw * c]);
                }
                let res = Tensor::new(vec![1, th, tw, c], sub).and_then(|t| model.forward_final(params, &t));
                match res {
                    Ok(t) => {
                        let mut out = out.lock().unwrap();
                        for i in 0..toh {
                            let dst = ((y0 + i) * ow + x0) * OUT_CHANNELS;
                            out[dst..dst + tow * OUT_CHANNELS]
                                .copy_from_slice(&t.data()[i * tow * OUT_CHANNELS..(i + 1) * tow * OUT_CHANNELS]);
                        }
                    }
                    Err(e) => {
                        first_err.lock().unwrap().get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = first_err.into_inner().unwrap() {
        return Err(e);
    }
    debug_assert_eq!(h - oh, shrink);
    Tensor::new(vec![1, oh, ow, OUT_CHANNELS], out.into_inner().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub workers: usize,
    pub seconds: f64,
    /// `T(1) / T(N)`
    pub speedup: f64,
    /// `T(previous N) / T(N)`; absent on the first row.
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupTable {
    pub rows: Vec<SpeedupRow>,
}

impl SpeedupTable {
    pub fn row(&self, workers: usize) -> Option<&SpeedupRow> {
        self.rows.iter().find(|r| r.workers == workers)
    }
}

pub fn speedup_table(times: &[(usize, f64)]) -> Result<SpeedupTable> {
    let t1 = match times.iter().find(|t| t.0 == 1) {
        Some(&(_, t)) => t,
        None => return Err(Error::Config("speedup table needs a single-worker time".into())),
    };
    if times.windows(2).any(|p| p[1].0 <= p[0].0) {
        return Err(Error::Config("worker counts must be strictly increasing".into()));
    }
    if let Some(&(n, t)) = times.iter().find(|t| !(t.1 > 0.0)) {
        return Err(Error::Data(format!("time for {n} workers must be positive, got {t}")));
    }
    let rows = times
        .iter()
        .enumerate()
        .map(|(i, &(n, t))| SpeedupRow { workers: n, seconds: t, speedup: t1 / t, relative: (i > 0).then(|| times[i - 1].1 / t) })
        .collect();
    Ok(SpeedupTable { rows })
}

pub fn write_speedup_csv(w: &mut impl Write, table: &SpeedupTable) -> io::Result<()> {
    writeln!(w, "N,T_seconds,S,R")?;
    for r in &table.rows {
        let rel = r.relative.map_or(String::new(), |v| format!("{v:.6}"));
        writeln!(w, "{},{:.6},{:.6},{rel}", r.workers, r.seconds, r.speedup)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub table: SpeedupTable,
    /// `(workers, min validation loss)`
    pub min_val_losses: Vec<(usize, f64)>,
    pub reports: Vec<trainer::TrainingReport>,
}

/// Train once per worker count with everything else fixed and tabulate the
/// wall times. Runs are sequential.
pub fn benchmark_scaling(
    base: &TrainConfig,
    model: &NowcastModel,
    params: &ParameterSet,
    train_set: &PatchDataset,
    test_set: &PatchDataset,
    worker_counts: &[usize],
) -> Result<ScalingReport> {
    if !worker_counts.contains(&1) {
        return Err(Error::Config("worker counts must include 1".into()));
    }
    let mut times = Vec::new();
    let mut losses = Vec::new();
    let mut reports = Vec::new();
    for &n in worker_counts {
        let cfg = TrainConfig { workers: n, ..base.clone() };
        let (_, report) = trainer::train(&cfg, model, params.clone(), train_set, test_set)?;
        times.push((n, report.total_wall_seconds));
        losses.push((n, report.min_val_loss.unwrap_or(f64::NAN)));
        reports.push(report);
    }
    Ok(ScalingReport { table: speedup_table(&times)?, min_val_losses: losses, reports })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub batch: usize,
    pub seconds: f64,
    pub min_val_loss: f64,
}

/// One training run per per-worker batch size; sizes too large for a shard
/// are skipped with a warning.
pub fn batch_size_sweep(
    base: &TrainConfig,
    model: &NowcastModel,
    params: &ParameterSet,
    train_set: &PatchDataset,
    test_set: &PatchDataset,
    sizes: &[usize],
) -> Result<Vec<BatchRow>> {
    let mut rows = Vec::new();
    for &batch in sizes {
        let cfg = TrainConfig { batch, ..base.clone() };
        if trainer::steps_per_epoch(&cfg, train_set.len())? == 0 {
            log::warn!("batch {batch} exceeds the shard of {} workers; skipped", cfg.workers);
            continue;
        }
        let (_, report) = trainer::train(&cfg, model, params.clone(), train_set, test_set)?;
        rows.push(BatchRow { batch, seconds: report.total_wall_seconds, min_val_loss: report.min_val_loss.unwrap_or(f64::NAN) });
    }
    Ok(rows)
}

pub fn write_batch_csv(w: &mut impl Write, rows: &[BatchRow]) -> io::Result<()> {
    writeln!(w, "batch,T_seconds,min_val_loss")?;
    for r in rows {
        writeln!(w, "{},{:.6},{:e}", r.batch, r.seconds, r.min_val_loss)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn persistence_repeats_last_frame() {
        let x = rand_tensor(&[2, 3, 3, 7], 1);
        let y = persistence_forecast(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 6]);
        for (px, py) in x.data().chunks(7).zip(y.data().chunks(6)) {
            assert!(py.iter().all(|&v| v == px[6]));
        }
        let mut x2 = x.clone();
        for px in x2.data_mut().chunks_mut(7) {
            px[..6].fill(9.0);
        }
        assert_eq!(persistence_forecast(&x2).unwrap(), y);
        assert!(persistence_forecast(&rand_tensor(&[1, 2, 2, 6], 0)).is_err());
    }

    #[test]
    fn lead_mse_cases() {
        let t = rand_tensor(&[2, 6, 6, 6], 2);
        let m = mse_by_lead(&t, &t, 4, "same").unwrap();
        assert_eq!(m.rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![10, 20, 30, 40, 50, 60]);
        assert!(m.rows.iter().all(|r| r.1 == 0.0));
        let shifted = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + 0.5).collect()).unwrap();
        let m = mse_by_lead(&shifted, &t, 4, "d").unwrap();
        assert!(m.rows.iter().all(|r| (r.1 - 0.25).abs() < 1e-12));

        let pred = rand_tensor(&[3, 5, 5, 6], 3);
        let truth = rand_tensor(&[3, 7, 7, 6], 4);
        let got = mse_by_lead(&pred, &truth, 3, "m").unwrap();
        for c in 0..6 {
            let mut s = 0.0;
            for b in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        let p = pred.data()[((b * 5 + i + 1) * 5 + j + 1) * 6 + c];
                        let q = truth.data()[((b * 7 + i + 2) * 7 + j + 2) * 6 + c];
                        s += (p - q) * (p - q);
                    }
                }
            }
            assert!((got.rows[c].1 - s / 27.0).abs() < 1e-12);
        }
        assert!(mse_by_lead(&pred, &rand_tensor(&[2, 7, 7, 6], 0), 3, "m").is_err());
    }

    #[test]
    fn speedup_examples() {
        let t = speedup_table(&[(1, 100.0), (2, 50.0), (4, 25.0)]).unwrap();
        let s: Vec<f64> = t.rows.iter().map(|r| r.speedup).collect();
        assert_eq!(s, vec![1.0, 2.0, 4.0]);
        assert_eq!(t.rows[0].relative, None);
        assert_eq!(t.rows[2].relative, Some(2.0));
        assert!(speedup_table(&[(2, 1.0)]).is_err());
        assert!(speedup_table(&[(1, 1.0), (1, 2.0)]).is_err());

        let mut buf = Vec::new();
        write_speedup_csv(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("N,T_seconds,S,R\n1,100.000000,1.000000,\n"));
    }

    #[test]
    fn axis_tiles_cover() {
        assert_eq!(axis_tiles(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
        assert_eq!(axis_tiles(10, 64), vec![(0, 10)]);
        assert_eq!(axis_blend(&axis_tiles(10, 64), 3), (0, 0, 0.0));
        let tiles = axis_tiles(16, 8);
        assert_eq!(axis_blend(&tiles, 0), (0, 0, 0.0));
        let (a, b, f) = axis_blend(&tiles, 7);
        assert_eq!((a, b), (0, 1));
        assert!((f - 3.5 / 8.0).abs() < 1e-12);
        assert_eq!(axis_blend(&tiles, 15), (1, 1, 0.0));
    }
}
