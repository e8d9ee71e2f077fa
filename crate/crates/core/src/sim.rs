//! Synthetic digital-VIL mosaics: Gaussian precipitation cells that advect
//! across a periodic grid while growing or decaying, plus a radar coverage mask.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{check_version, expect_eof, read_magic, write_atomic};
use crate::error::{truncated, Error, Result};

/// Minutes between consecutive mosaics.
pub const FRAME_DT_MINUTES: u32 = 10;
pub const RADAR_RANGE_KM: f64 = 230.0;

/// Kernel evaluation stops this many radii from a cell center.
const CUTOFF_RADII: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Range { lo: v, hi: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }

    fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub frame_count: usize,
    pub frame_dt_minutes: u32,
    pub start_minutes: i64,
    pub cell_count: usize,
    pub amplitude: Range,
    pub radius_km: Range,
    /// Eastward velocity, km per frame.
    pub velocity_x: Range,
    /// Southward velocity, km per frame.
    pub velocity_y: Range,
    /// Log-amplitude change per frame.
    pub growth: Range,
    /// Field value that saturates digital VIL at 255.
    pub v_max: f64,
    /// Radar sites as `(x, y)` pixel coordinates.
    pub radar_sites: Vec<(usize, usize)>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let (h, w) = (384, 512);
        SimConfig {
            grid_h: h,
            grid_w: w,
            frame_count: 96,
            frame_dt_minutes: FRAME_DT_MINUTES,
            start_minutes: 0,
            cell_count: 40,
            amplitude: Range::new(4.0, 20.0),
            radius_km: Range::new(5.0, 14.0),
            velocity_x: Range::new(2.0, 4.0),
            velocity_y: Range::new(-1.0, 1.0),
            growth: Range::new(-0.05, 0.05),
            v_max: 20.0,
            radar_sites: lattice_sites(h, w, 300),
            seed: 0,
        }
    }
}

/// Sites on a square lattice with the given spacing, offset by half a spacing.
pub fn lattice_sites(h: usize, w: usize, spacing: usize) -> Vec<(usize, usize)> {
    let spacing = spacing.max(1);
    let mut sites = Vec::new();
    let mut y = (spacing / 2).min(h.saturating_sub(1));
    loop {
        let mut x = (spacing / 2).min(w.saturating_sub(1));
        loop {
            sites.push((x, y));
            x += spacing;
            if x >= w {
                break;
            }
        }
        y += spacing;
        if y >= h {
            break;
        }
    }
    sites
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("sim: {m}")));
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.frame_dt_minutes != FRAME_DT_MINUTES {
            return bad(format!("frame_dt_minutes must be {FRAME_DT_MINUTES}"));
        }
        for (name, r) in [
            ("amplitude", self.amplitude),
            ("radius_km", self.radius_km),
            ("velocity_x", self.velocity_x),
            ("velocity_y", self.velocity_y),
            ("growth", self.growth),
        ] {
            if !r.is_valid() {
                return bad(format!("{name} range [{}, {}] is invalid", r.lo, r.hi));
            }
        }
        if self.amplitude.lo < 0.0 || self.radius_km.lo <= 0.0 {
            return bad("amplitudes must be >= 0 and radii > 0".into());
        }
        if !(self.v_max > 0.0) {
            return bad("v_max must be > 0".into());
        }
        if let Some(&(x, y)) = self.radar_sites.iter().find(|&&(x, y)| x >= self.grid_w || y >= self.grid_h) {
            return bad(format!("radar site ({x}, {y}) outside grid"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub x0: f64,
    pub y0: f64,
    pub vx: f64,
    pub vy: f64,
    pub amplitude0: f64,
    pub radius: f64,
    pub growth: f64,
}

/// One digital-VIL frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mosaic {
    pub timestamp_minutes: i64,
    pub h: usize,
    pub w: usize,
    pub grid: Vec<u8>,
}

impl Mosaic {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.grid[y * self.w + x]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MosaicSequence {
    pub h: usize,
    pub w: usize,
    pub frame_dt_minutes: u32,
    pub frames: Vec<Mosaic>,
}

impl MosaicSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> MosaicSequence {
        MosaicSequence {
            h: self.h,
            w: self.w,
            frame_dt_minutes: self.frame_dt_minutes,
            frames: self.frames[start..end].to_vec(),
        }
    }
}

/// Deterministic storm field generator.
#[derive(Debug, Clone)]
pub struct StormSimulator {
    config: SimConfig,
    cells: Vec<Cell>,
}

impl StormSimulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cells = (0..config.cell_count)
            .map(|_| Cell {
                x0: rng.gen_range(0.0..config.grid_w as f64),
                y0: rng.gen_range(0.0..config.grid_h as f64),
                vx: config.velocity_x.sample(&mut rng),
                vy: config.velocity_y.sample(&mut rng),
                amplitude0: config.amplitude.sample(&mut rng),
                radius: config.radius_km.sample(&mut rng),
                growth: config.growth.sample(&mut rng),
            })
            .collect();
        Ok(StormSimulator { config, cells })
    }

    /// Simulator with explicitly placed cells.
    pub fn with_cells(config: SimConfig, cells: Vec<Cell>) -> Result<Self> {
        config.validate()?;
        Ok(StormSimulator { config, cells })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    fn amplitude(&self, c: &Cell, t: usize) -> f64 {
        let a = c.amplitude0 * (c.growth * t as f64).exp();
        a.clamp(self.config.amplitude.lo, self.config.amplitude.hi)
    }

    /// Continuous (pre-quantization) field at frame `t`, row-major `h x w`.
    pub fn field(&self, t: usize) -> Vec<f64> {
        let (h, w) = (self.config.grid_h, self.config.grid_w);
        let mut field = vec![0.0; h * w];
        let mut wy = Vec::new();
        let mut wx = Vec::new();
        for c in &self.cells {
            let a = self.amplitude(c, t);
            let cx = (c.x0 + c.vx * t as f64).rem_euclid(w as f64);
            let cy = (c.y0 + c.vy * t as f64).rem_euclid(h as f64);
            axis_weights(cy, c.radius, h, &mut wy);
            axis_weights(cx, c.radius, w, &mut wx);
            for &(row, gy) in &wy {
                let ay = a * gy;
                let line = &mut field[row * w..(row + 1) * w];
                for &(col, gx) in &wx {
                    line[col] += ay * gx;
                }
            }
        }
        field
    }

    pub fn mosaic(&self, t: usize) -> Result<Mosaic> {
        let grid = digital_vil_quantize(&self.field(t), self.config.v_max)?;
        Ok(Mosaic {
            timestamp_minutes: self.config.start_minutes + (t as i64) * self.config.frame_dt_minutes as i64,
            h: self.config.grid_h,
            w: self.config.grid_w,
            grid,
        })
    }

    pub fn sequence(&self) -> Result<MosaicSequence> {
        let frames = (0..self.config.frame_count).map(|t| self.mosaic(t)).collect::<Result<_>>()?;
        Ok(MosaicSequence {
            h: self.config.grid_h,
            w: self.config.grid_w,
            frame_dt_minutes: self.config.frame_dt_minutes,
            frames,
        })
    }

    pub fn coverage(&self) -> CoverageMask {
        radar_coverage_mask(self.config.grid_h, self.config.grid_w, &self.config.radar_sites, RADAR_RANGE_KM)
    }
}

/// 1-D Gaussian factors `(index, exp(-d^2 / 2r^2))` around `center` on a ring
/// of `n` pixels. Offsets past the ring wrap, so periodic images are summed.
fn axis_weights(center: f64, radius: f64, n: usize, out: &mut Vec<(usize, f64)>) {
    out.clear();
    let reach = (CUTOFF_RADII * radius).ceil() as i64;
    let base = center.round() as i64;
    let inv = 1.0 / (2.0 * radius * radius);
    for off in -reach..=reach {
        let p = base + off;
        let d = p as f64 - center;
        out.push((p.rem_euclid(n as i64) as usize, (-d * d * inv).exp()));
    }
}

/// Generate the full mosaic sequence for `config`.
pub fn gen_mosaic_sequence(config: &SimConfig) -> Result<MosaicSequence> {
    StormSimulator::new(config.clone())?.sequence()
}

/// `round(255 * min(v / v_max, 1))` with halves rounded up.
pub fn digital_vil_quantize(field: &[f64], v_max: f64) -> Result<Vec<u8>> {
    field
        .iter()
        .map(|&v| {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Data(format!("cannot quantize field value {v}")));
            }
            Ok((255.0 * (v / v_max).min(1.0) + 0.5).floor() as u8)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMask {
    pub h: usize,
    pub w: usize,
    pub mask: Vec<bool>,
}

impl CoverageMask {
    pub fn full(h: usize, w: usize) -> Self {
        CoverageMask { h, w, mask: vec![true; h * w] }
    }

    #[inline]
    pub fn covered(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Union of disks of radius `range_px` around each site.
pub fn radar_coverage_mask(h: usize, w: usize, sites: &[(usize, usize)], range_px: f64) -> CoverageMask {
    let mut mask = vec![false; h * w];
    let r2 = range_px * range_px;
    let reach = range_px.floor() as i64;
    for &(sx, sy) in sites {
        let (sx, sy) = (sx as i64, sy as i64);
        for y in (sy - reach).max(0)..=(sy + reach).min(h as i64 - 1) {
            let dy = (y - sy) as f64;
            for x in (sx - reach).max(0)..=(sx + reach).min(w as i64 - 1) {
                let dx = (x - sx) as f64;
                if dx * dx + dy * dy <= r2 {
                    mask[y as usize * w + x as usize] = true;
                }
            }
        }
    }
    CoverageMask { h, w, mask }
}

pub const VIL_MAGIC: &[u8; 4] = b"VIL1";
pub const VIL_VERSION: u16 = 1;

/// `VIL1`: magic, version u16, H u32, W u32, frame count u32, frame_dt u32,
/// then per frame an i64 timestamp and `H*W` bytes.
pub fn encode_mosaics(w: &mut impl Write, seq: &MosaicSequence) -> io::Result<()> {
    w.write_all(VIL_MAGIC)?;
    w.write_u16::<LE>(VIL_VERSION)?;
    w.write_u32::<LE>(seq.h as u32)?;
    w.write_u32::<LE>(seq.w as u32)?;
    w.write_u32::<LE>(seq.frames.len() as u32)?;
    w.write_u32::<LE>(seq.frame_dt_minutes)?;
    for f in &seq.frames {
        w.write_i64::<LE>(f.timestamp_minutes)?;
        w.write_all(&f.grid)?;
    }
    Ok(())
}

pub fn decode_mosaics(r: &mut impl Read) -> Result<MosaicSequence> {
    let t = truncated("mosaics");
    read_magic(r, VIL_MAGIC, "mosaics")?;
    check_version(r.read_u16::<LE>().map_err(&t)?, VIL_VERSION)?;
    let h = r.read_u32::<LE>().map_err(&t)? as usize;
    let w = r.read_u32::<LE>().map_err(&t)? as usize;
    let n = r.read_u32::<LE>().map_err(&t)? as usize;
    let frame_dt_minutes = r.read_u32::<LE>().map_err(&t)?;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let timestamp_minutes = r.read_i64::<LE>().map_err(&t)?;
        let mut grid = vec![0u8; h * w];
        r.read_exact(&mut grid).map_err(&t)?;
        frames.push(Mosaic { timestamp_minutes, h, w, grid });
    }
    Ok(MosaicSequence { h, w, frame_dt_minutes, frames })
}

pub fn write_mosaics(path: &Path, seq: &MosaicSequence) -> Result<()> {
    write_atomic(path, |w| encode_mosaics(w, seq))
}

pub fn read_mosaics(path: &Path) -> Result<MosaicSequence> {
    let mut r = BufReader::new(File::open(path)?);
    let seq = decode_mosaics(&mut r)?;
    expect_eof(&mut r, "mosaics")?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(cells: usize) -> SimConfig {
        SimConfig {
            grid_h: 64,
            grid_w: 80,
            frame_count: 6,
            cell_count: cells,
            radar_sites: vec![(40, 32)],
            seed: 5,
            ..SimConfig::default()
        }
    }

    #[test]
    fn no_cells_no_weather() {
        let seq = gen_mosaic_sequence(&small(0)).unwrap();
        assert!(seq.frames.iter().all(|f| f.grid.iter().all(|&v| v == 0)));
        assert_eq!(seq.frames[3].timestamp_minutes, 30);
    }

    #[test]
    fn static_cell_gives_identical_frames() {
        let mut cfg = small(1);
        cfg.velocity_x = Range::fixed(0.0);
        cfg.velocity_y = Range::fixed(0.0);
        cfg.growth = Range::fixed(0.0);
        let seq = gen_mosaic_sequence(&cfg).unwrap();
        assert!(seq.frames.iter().any(|f| f.grid.iter().any(|&v| v > 0)));
        for f in &seq.frames[1..] {
            assert_eq!(f.grid, seq.frames[0].grid);
        }
    }

    #[test]
    fn advection_conserves_mass_under_wrap() {
        let mut cfg = small(5);
        cfg.growth = Range::fixed(0.0);
        cfg.velocity_x = Range::new(3.3, 7.9);
        cfg.velocity_y = Range::new(-4.1, 4.1);
        cfg.frame_count = 20;
        let sim = StormSimulator::new(cfg).unwrap();
        let m0: f64 = sim.field(0).iter().sum();
        for t in 1..20 {
            let m: f64 = sim.field(t).iter().sum();
            assert!((m - m0).abs() / m0 <= 1e-6, "frame {t}: {m} vs {m0}");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_mosaic_sequence(&small(4)).unwrap();
        let b = gen_mosaic_sequence(&small(4)).unwrap();
        assert_eq!(a, b);
        let mut other = small(4);
        other.seed = 6;
        assert_ne!(a, gen_mosaic_sequence(&other).unwrap());
    }

    #[test]
    fn quantize_points() {
        let q = digital_vil_quantize(&[0.0, 20.0, 25.0, 10.0], 20.0).unwrap();
        assert_eq!(q, vec![0, 255, 255, 128]);
        assert!(digital_vil_quantize(&[-1.0], 20.0).is_err());
        assert!(digital_vil_quantize(&[f64::NAN], 20.0).is_err());
    }

    #[test]
    fn coverage_cases() {
        assert_eq!(radar_coverage_mask(10, 10, &[], 230.0).count(), 0);
        let m = radar_coverage_mask(9, 9, &[(4, 4)], 3.0);
        assert!(m.covered(4, 4) && m.covered(4, 1) && m.covered(7, 4));
        assert!(!m.covered(0, 0));

        let sites = [(20, 15), (32, 20)];
        let m = radar_coverage_mask(40, 50, &sites, 9.5);
        let brute = (0..40)
            .flat_map(|y| (0..50).map(move |x| (x, y)))
            .filter(|&(x, y)| {
                sites.iter().any(|&(sx, sy)| {
                    let (dx, dy) = (x as f64 - sx as f64, y as f64 - sy as f64);
                    (dx * dx + dy * dy).sqrt() <= 9.5
                })
            })
            .count();
        assert_eq!(m.count(), brute);
    }

    #[test]
    fn mosaic_file_round_trip() {
        let seq = gen_mosaic_sequence(&small(3)).unwrap();
        let mut buf = Vec::new();
        encode_mosaics(&mut buf, &seq).unwrap();
        assert_eq!(decode_mosaics(&mut buf.as_slice()).unwrap(), seq);
        assert!(matches!(decode_mosaics(&mut &buf[..buf.len() - 1]), Err(Error::TruncatedFile(_))));
        buf[1] = b'x';
        assert!(matches!(decode_mosaics(&mut buf.as_slice()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn config_validation() {
        let mut c = small(1);
        c.frame_dt_minutes = 5;
        assert!(c.validate().is_err());
        let mut c = small(1);
        c.radius_km = Range::new(3.0, 1.0);
        assert!(c.validate().is_err());
        let mut c = small(1);
        c.radar_sites = vec![(100, 0)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn lattice_covers_grid_extent() {
        let s = lattice_sites(384, 512, 300);
        assert_eq!(s, vec![(150, 150), (450, 150)]);
    }
}
