//! Training samples from mosaic sequences: 13-frame windows, intensity-weighted
//! patch centers inside radar coverage, normalization, the `NWC1` container,
//! and per-worker sharding.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{check_version, expect_eof, read_magic, write_atomic};
use crate::error::{truncated, Error, Result};
use crate::sim::{CoverageMask, Mosaic, MosaicSequence, FRAME_DT_MINUTES};
use crate::tensor::Tensor;

pub const WINDOW_LEN: usize = 13;
pub const WINDOW_CENTER: usize = 6;
pub const IN_CHANNELS: usize = 7;
pub const OUT_CHANNELS: usize = 6;

/// 13 consecutive frames, oldest first; index 6 is the issue time.
#[derive(Debug, Clone, Copy)]
pub struct SequenceWindow<'a> {
    frames: &'a [Mosaic],
}

impl<'a> SequenceWindow<'a> {
    pub fn new(frames: &'a [Mosaic]) -> Result<Self> {
        if frames.len() != WINDOW_LEN {
            return Err(Error::Data(format!("window needs {WINDOW_LEN} frames, got {}", frames.len())));
        }
        for pair in frames.windows(2) {
            if pair[1].timestamp_minutes - pair[0].timestamp_minutes != FRAME_DT_MINUTES as i64 {
                return Err(Error::Data(format!(
                    "window frames at {} and {} are not {FRAME_DT_MINUTES} minutes apart",
                    pair[0].timestamp_minutes, pair[1].timestamp_minutes
                )));
            }
            if (pair[0].h, pair[0].w) != (pair[1].h, pair[1].w) {
                return Err(Error::Data("window frames differ in size".into()));
            }
        }
        Ok(SequenceWindow { frames })
    }

    /// The window centred on sequence index `t0`.
    pub fn around(seq: &'a MosaicSequence, t0: usize) -> Result<Self> {
        if t0 < WINDOW_CENTER || t0 + WINDOW_LEN - WINDOW_CENTER > seq.len() {
            return Err(Error::Data(format!("no full window around frame {t0} of {}", seq.len())));
        }
        Self::new(&seq.frames[t0 - WINDOW_CENTER..t0 + WINDOW_LEN - WINDOW_CENTER])
    }

    pub fn frames(&self) -> &'a [Mosaic] {
        self.frames
    }

    pub fn issue_frame(&self) -> &'a Mosaic {
        &self.frames[WINDOW_CENTER]
    }
}

/// Uniformly random window centres (with replacement) among indices that
/// have six frames on both sides.
pub fn select_window_times(seq: &MosaicSequence, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if seq.len() < WINDOW_LEN {
        return Err(Error::Data(format!("sequence of {} frames is shorter than a window", seq.len())));
    }
    let lo = WINDOW_CENTER;
    let hi = seq.len() - (WINDOW_LEN - WINDOW_CENTER - 1);
    Ok((0..count).map(|_| rng.gen_range(lo..hi)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchCenter {
    pub x: usize,
    pub y: usize,
}

impl PatchCenter {
    /// Top-left corner of a `patch`-sized window around this centre.
    pub fn origin(&self, patch: usize) -> Option<(usize, usize)> {
        Some((self.x.checked_sub(patch / 2)?, self.y.checked_sub(patch / 2)?))
    }

    pub fn fits(&self, patch: usize, h: usize, w: usize) -> bool {
        self.origin(patch).is_some_and(|(x0, y0)| x0 + patch <= w && y0 + patch <= h)
    }
}

/// Draw `count` distinct centres with probability proportional to
/// `vil + w_floor` over pixels inside `mask` whose patch fits in the grid.
///
/// Draws use exponential keys `ln(u) / w`; the `count` largest keys, in
/// descending order, follow the sequential without-replacement law.
pub fn sample_patch_centers(
    frame: &Mosaic,
    mask: &CoverageMask,
    patch: usize,
    count: usize,
    w_floor: f64,
    rng: &mut impl Rng,
) -> Result<Vec<PatchCenter>> {
    if (mask.h, mask.w) != (frame.h, frame.w) {
        return Err(Error::Data("coverage mask and frame differ in size".into()));
    }
    if !(w_floor >= 0.0) {
        return Err(Error::Config(format!("w_floor must be >= 0, got {w_floor}")));
    }
    let mut keyed: Vec<(f64, PatchCenter)> = Vec::new();
    if patch <= frame.h && patch <= frame.w {
        let half = patch / 2;
        for y in half..=frame.h - patch + half {
            for x in half..=frame.w - patch + half {
                if !mask.covered(x, y) {
                    continue;
                }
                let weight = frame.at(x, y) as f64 + w_floor;
                if weight <= 0.0 {
                    continue;
                }
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                keyed.push((u.ln() / weight, PatchCenter { x, y }));
            }
        }
    }
    if keyed.is_empty() {
        return Err(Error::Data("no eligible patch centre in frame".into()));
    }
    if count > keyed.len() {
        return Err(Error::Data(format!("asked for {count} centres but only {} are eligible", keyed.len())));
    }
    let by_key = |a: &(f64, PatchCenter), b: &(f64, PatchCenter)| b.0.total_cmp(&a.0);
    if count < keyed.len() && count > 0 {
        keyed.select_nth_unstable_by(count - 1, by_key);
    }
    keyed.truncate(count);
    keyed.sort_by(by_key);
    Ok(keyed.into_iter().map(|(_, c)| c).collect())
}

/// `X` holds frames 0..=6 as channels, `Y` frames 7..=12; shapes `[P, P, C]`.
pub fn extract_patch_pair(window: &SequenceWindow, center: PatchCenter, patch: usize) -> Result<(Tensor, Tensor)> {
    let f0 = window.issue_frame();
    let (x0, y0) = match center.origin(patch) {
        Some(o) if center.fits(patch, f0.h, f0.w) => o,
        _ => {
            return Err(Error::Data(format!(
                "patch {patch} around ({}, {}) leaves the {}x{} grid",
                center.x, center.y, f0.h, f0.w
            )))
        }
    };
    let mut x = Tensor::zeros(&[patch, patch, IN_CHANNELS]);
    let mut y = Tensor::zeros(&[patch, patch, OUT_CHANNELS]);
    fill_channels(&window.frames()[..IN_CHANNELS], x0, y0, patch, x.data_mut());
    fill_channels(&window.frames()[IN_CHANNELS..], x0, y0, patch, y.data_mut());
    Ok((x, y))
}

fn fill_channels<T: From<u8>>(frames: &[Mosaic], x0: usize, y0: usize, patch: usize, out: &mut [T]) {
    let c = frames.len();
    for (ch, f) in frames.iter().enumerate() {
        for i in 0..patch {
            let row = &f.grid[(y0 + i) * f.w + x0..(y0 + i) * f.w + x0 + patch];
            for (j, &v) in row.iter().enumerate() {
                out[(i * patch + j) * c + ch] = T::from(v);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: 0.0, std: 1.0 };

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    #[inline]
    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Aligned input/target patches, stored as 32-bit floats `[S][P][P][C]`.
///
/// `norm` maps raw digital VIL to the stored values; raw datasets carry
/// [`NormStats::IDENTITY`].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    patch: usize,
    in_channels: usize,
    out_channels: usize,
    x: Vec<f32>,
    y: Vec<f32>,
    pub norm: NormStats,
}

impl PatchDataset {
    pub fn new(patch: usize, in_channels: usize, out_channels: usize) -> Self {
        PatchDataset { patch, in_channels, out_channels, x: Vec::new(), y: Vec::new(), norm: NormStats::IDENTITY }
    }

    pub fn from_parts(
        patch: usize,
        in_channels: usize,
        out_channels: usize,
        x: Vec<f32>,
        y: Vec<f32>,
        norm: NormStats,
    ) -> Result<Self> {
        let (sx, sy) = (patch * patch * in_channels, patch * patch * out_channels);
        if sx == 0 || sy == 0 || !x.len().is_multiple_of(sx) || !y.len().is_multiple_of(sy) || x.len() / sx != y.len() / sy {
            return Err(Error::Data("dataset payload lengths do not match the header".into()));
        }
        Ok(PatchDataset { patch, in_channels, out_channels, x, y, norm })
    }

    pub fn len(&self) -> usize {
        self.x.len() / (self.patch * self.patch * self.in_channels)
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn x_data(&self) -> &[f32] {
        &self.x
    }

    pub fn y_data(&self) -> &[f32] {
        &self.y
    }

    fn x_stride(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    fn y_stride(&self) -> usize {
        self.patch * self.patch * self.out_channels
    }

    pub fn push(&mut self, x: &Tensor, y: &Tensor) -> Result<()> {
        let p = self.patch;
        if x.shape() != [p, p, self.in_channels] || y.shape() != [p, p, self.out_channels] {
            return Err(Error::Data(format!("patch shapes {:?}/{:?} do not fit dataset", x.shape(), y.shape())));
        }
        self.x.extend(x.data().iter().map(|&v| v as f32));
        self.y.extend(y.data().iter().map(|&v| v as f32));
        Ok(())
    }

    /// Stack the given samples into `[b, P, P, C]` tensors.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let p = self.patch;
        let gather = |src: &[f32], stride: usize| {
            let mut out = Vec::with_capacity(indices.len() * stride);
            for &i in indices {
                out.extend(src[i * stride..(i + 1) * stride].iter().map(|&v| v as f64));
            }
            out
        };
        let b = indices.len();
        let x = Tensor::new(vec![b, p, p, self.in_channels], gather(&self.x, self.x_stride()));
        let y = Tensor::new(vec![b, p, p, self.out_channels], gather(&self.y, self.y_stride()));
        (x.expect("batch shape"), y.expect("batch shape"))
    }

    pub fn subset(&self, indices: &[usize]) -> PatchDataset {
        let (sx, sy) = (self.x_stride(), self.y_stride());
        let mut out = self.clone_header();
        for &i in indices {
            out.x.extend_from_slice(&self.x[i * sx..(i + 1) * sx]);
            out.y.extend_from_slice(&self.y[i * sy..(i + 1) * sy]);
        }
        out
    }

    fn clone_header(&self) -> PatchDataset {
        PatchDataset {
            patch: self.patch,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            x: Vec::new(),
            y: Vec::new(),
            norm: self.norm,
        }
    }

    fn map_values(&self, f: impl Fn(f64) -> f64, norm: NormStats) -> PatchDataset {
        let m = |v: &Vec<f32>| v.iter().map(|&a| f(a as f64) as f32).collect();
        PatchDataset { x: m(&self.x), y: m(&self.y), norm, ..self.clone_header() }
    }
}

/// Global mean and population standard deviation of X.
pub fn compute_norm_stats(ds: &PatchDataset) -> Result<NormStats> {
    if ds.is_empty() {
        return Err(Error::Data("cannot normalize an empty dataset".into()));
    }
    let n = ds.x.len() as f64;
    let mean = ds.x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = ds.x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Data("input patches have zero variance".into()));
    }
    Ok(NormStats { mean, std: var.sqrt() })
}

/// Standardize X and Y with the global statistics of X.
pub fn normalize(ds: &PatchDataset) -> Result<PatchDataset> {
    let s = compute_norm_stats(ds)?;
    Ok(normalize_with(ds, s))
}

/// Apply `stats` (measured on the stored values) to X and Y, e.g. training
/// statistics to a test set.
pub fn normalize_with(ds: &PatchDataset, s: NormStats) -> PatchDataset {
    let composed = NormStats { mean: ds.norm.mean + ds.norm.std * s.mean, std: ds.norm.std * s.std };
    ds.map_values(|v| s.apply(v), composed)
}

/// Map back to raw digital VIL.
pub fn denormalize(ds: &PatchDataset) -> PatchDataset {
    let s = ds.norm;
    ds.map_values(|v| s.invert(v), NormStats::IDENTITY)
}

pub const NWC_MAGIC: &[u8; 4] = b"NWC1";
pub const NWC_VERSION: u16 = 1;

pub fn encode_dataset(w: &mut impl Write, ds: &PatchDataset) -> io::Result<()> {
    w.write_all(NWC_MAGIC)?;
    w.write_u16::<LE>(NWC_VERSION)?;
    w.write_u64::<LE>(ds.len() as u64)?;
    w.write_u32::<LE>(ds.patch as u32)?;
    w.write_u32::<LE>(ds.in_channels as u32)?;
    w.write_u32::<LE>(ds.out_channels as u32)?;
    w.write_f64::<LE>(ds.norm.mean)?;
    w.write_f64::<LE>(ds.norm.std)?;
    for &v in ds.x.iter().chain(&ds.y) {
        w.write_f32::<LE>(v)?;
    }
    Ok(())
}

pub fn decode_dataset(r: &mut impl Read) -> Result<PatchDataset> {
    let t = truncated("dataset");
    read_magic(r, NWC_MAGIC, "dataset")?;
    check_version(r.read_u16::<LE>().map_err(&t)?, NWC_VERSION)?;
    let s = r.read_u64::<LE>().map_err(&t)? as usize;
    let patch = r.read_u32::<LE>().map_err(&t)? as usize;
    let cin = r.read_u32::<LE>().map_err(&t)? as usize;
    let cout = r.read_u32::<LE>().map_err(&t)? as usize;
    let mean = r.read_f64::<LE>().map_err(&t)?;
    let std = r.read_f64::<LE>().map_err(&t)?;
    if patch == 0 || cin == 0 || cout == 0 {
        return Err(Error::Data("dataset header has a zero extent".into()));
    }
    let mut x = vec![0f32; s * patch * patch * cin];
    r.read_f32_into::<LE>(&mut x).map_err(&t)?;
    let mut y = vec![0f32; s * patch * patch * cout];
    r.read_f32_into::<LE>(&mut y).map_err(&t)?;
    PatchDataset::from_parts(patch, cin, cout, x, y, NormStats { mean, std })
}

pub fn write_dataset(path: &Path, ds: &PatchDataset) -> Result<()> {
    write_atomic(path, |w| encode_dataset(w, ds))
}

/// Read an `NWC1` file; a sample count that disagrees with the payload fails.
pub fn read_dataset(path: &Path) -> Result<PatchDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let ds = decode_dataset(&mut r)?;
    expect_eof(&mut r, "dataset")?;
    Ok(ds)
}

/// Contiguous index range owned by `rank`; earlier ranks take the remainder.
pub fn shard(s: usize, n: usize, rank: usize) -> Result<Range<usize>> {
    if n == 0 || rank >= n {
        return Err(Error::Config(format!("rank {rank} invalid for {n} workers")));
    }
    if n > s {
        return Err(Error::Config(format!("{n} workers exceed {s} samples")));
    }
    let (base, rem) = (s / n, s % n);
    let start = rank * base + rank.min(rem);
    Ok(start..start + base + usize::from(rank < rem))
}

/// `round(fraction * s)` distinct sorted indices, drawn from a stream keyed
/// by `(seed, rank)`.
pub fn validation_subsample(s: usize, fraction: f64, seed: u64, rank: usize) -> Result<Vec<usize>> {
    if s == 0 {
        return Err(Error::Data("empty test set".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} outside (0, 1]")));
    }
    let k = ((fraction * s as f64).round() as usize).clamp(1, s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(VALIDATION_STREAM + rank as u64);
    let mut idx = rand::seq::index::sample(&mut rng, s, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

const VALIDATION_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub patch: usize,
    pub samples: usize,
    pub patches_per_window: usize,
    pub w_floor: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { patch: 64, samples: 2048, patches_per_window: 8, w_floor: 1.0, seed: 0 }
    }
}

/// Raw (unnormalized) dataset of `cfg.samples` patch pairs drawn from `seq`.
///
/// The sampler always draws from the window's issue frame.
pub fn build_dataset(seq: &MosaicSequence, mask: &CoverageMask, cfg: &PipelineConfig) -> Result<PatchDataset> {
    if cfg.samples == 0 || cfg.patches_per_window == 0 {
        return Err(Error::Config("sample and per-window counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let windows = cfg.samples.div_ceil(cfg.patches_per_window);
    let times = select_window_times(seq, windows, &mut rng)?;
    let mut ds = PatchDataset::new(cfg.patch, IN_CHANNELS, OUT_CHANNELS);
    for t0 in times {
        let window = SequenceWindow::around(seq, t0)?;
        let want = cfg.patches_per_window.min(cfg.samples - ds.len());
        let centers = sample_patch_centers(window.issue_frame(), mask, cfg.patch, want, cfg.w_floor, &mut rng)?;
        for c in centers {
            let (x, y) = extract_patch_pair(&window, c, cfg.patch)?;
            ds.push(&x, &y)?;
        }
    }
    Ok(ds)
}
