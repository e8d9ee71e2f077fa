//! Flat `section.key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nowcast_core::eval::HistMatchConfig;
use nowcast_core::net::{hash_str, infer_shapes};
use nowcast_core::sim::{lattice_sites, Range};
use nowcast_core::{Error, LrPolicy, ModelConfig, Result, SimConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    Tiny,
    Canonical,
}

impl FromStr for ModelPreset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tiny" => Ok(ModelPreset::Tiny),
            "canonical" => Ok(ModelPreset::Canonical),
            _ => Err(format!("expected tiny or canonical, got {s:?}")),
        }
    }
}

impl Display for ModelPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelPreset::Tiny => "tiny",
            ModelPreset::Canonical => "canonical",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSection {
    pub grid_h: usize,
    pub grid_w: usize,
    pub frames: usize,
    pub cells: usize,
    pub amplitude: Range,
    pub radius_km: Range,
    pub velocity_x: Range,
    pub velocity_y: Range,
    pub growth: Range,
    pub v_max: f64,
    pub radar_spacing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSection {
    pub patch: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub patches_per_window: usize,
    pub w_floor: f64,
    /// Trailing frames of the sequence reserved for the test set.
    pub test_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub crop: usize,
    pub batch: usize,
    pub hist_tile_px: usize,
    pub hist_bins: usize,
    /// 0 runs the whole grid in one pass.
    pub infer_tile: usize,
    /// Issue-time frame index; negative counts from the end.
    pub infer_frame: i64,
    pub bench_workers: Vec<usize>,
    pub bench_batches: Vec<usize>,
    pub bench_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub sim: SimSection,
    pub pipeline: PipelineSection,
    pub model: ModelPreset,
    pub train: TrainConfig,
    /// Epochs between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            sim: SimSection {
                grid_h: 384,
                grid_w: 512,
                frames: 240,
                cells: 40,
                amplitude: Range::new(4.0, 20.0),
                radius_km: Range::new(5.0, 14.0),
                velocity_x: Range::new(2.0, 4.0),
                velocity_y: Range::new(-1.0, 1.0),
                growth: Range::new(-0.05, 0.05),
                v_max: 20.0,
                radar_spacing: 300,
            },
            pipeline: PipelineSection {
                patch: 64,
                train_samples: 2048,
                test_samples: 512,
                patches_per_window: 8,
                w_floor: 1.0,
                test_frames: 60,
            },
            model: ModelPreset::Tiny,
            train: TrainConfig {
                workers: 1,
                batch: 8,
                eta: 0.01,
                warmup_epochs: 5,
                epochs: 10,
                lr_policy: LrPolicy::ScaleUp,
                seed: 0,
                shuffle: true,
                momentum: 0.9,
                val_fraction: 0.3,
                val_batch: 16,
            },
            checkpoint_every: 0,
            eval: EvalSection {
                crop: 48,
                batch: 32,
                hist_tile_px: 64,
                hist_bins: 256,
                infer_tile: 0,
                infer_frame: -1,
                bench_workers: vec![1, 2, 4],
                bench_batches: vec![8, 16, 32, 64, 128],
                bench_epochs: 2,
            },
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "global seed; every stage derives its own stream from it"),
    ("out", "parent directory for run directories"),
    ("sim.grid_h", "mosaic height in pixels (1 km each)"),
    ("sim.grid_w", "mosaic width in pixels"),
    ("sim.frames", "number of 10-minute frames"),
    ("sim.cells", "number of storm cells"),
    ("sim.amplitude_lo", "cell amplitude range, lower end"),
    ("sim.amplitude_hi", "cell amplitude range, upper end"),
    ("sim.radius_lo", "cell radius range in km, lower end"),
    ("sim.radius_hi", "cell radius range in km, upper end"),
    ("sim.vx_lo", "eastward velocity range in km/frame, lower end"),
    ("sim.vx_hi", "eastward velocity range in km/frame, upper end"),
    ("sim.vy_lo", "southward velocity range in km/frame, lower end"),
    ("sim.vy_hi", "southward velocity range in km/frame, upper end"),
    ("sim.growth_lo", "log-amplitude change per frame, lower end"),
    ("sim.growth_hi", "log-amplitude change per frame, upper end"),
    ("sim.v_max", "field value mapped to digital VIL 255"),
    ("sim.radar_spacing", "radar site lattice spacing in pixels"),
    ("pipeline.patch", "patch edge in pixels"),
    ("pipeline.train_samples", "training patch pairs"),
    ("pipeline.test_samples", "test patch pairs"),
    ("pipeline.patches_per_window", "patches drawn per 13-frame window"),
    ("pipeline.w_floor", "sampling weight added to every pixel's VIL"),
    ("pipeline.test_frames", "trailing frames held out for the test set"),
    ("model.preset", "tiny or canonical"),
    ("train.workers", "data-parallel worker count N"),
    ("train.batch", "per-worker batch size n"),
    ("train.eta", "base learning rate"),
    ("train.warmup_epochs", "linear warmup length in epochs"),
    ("train.epochs", "total epochs"),
    ("train.lr_policy", "scale_up (eta*N), scale_down (eta/N) or none"),
    ("train.shuffle", "shuffle each shard every epoch (true/false)"),
    ("train.momentum", "heavy-ball coefficient, 0 for plain SGD"),
    ("train.val_fraction", "fraction of the test set each worker validates on"),
    ("train.val_batch", "validation batch size"),
    ("train.checkpoint_every", "epochs between checkpoints, 0 for final only"),
    ("eval.crop", "central window for lead-time MSE"),
    ("eval.batch", "evaluation batch size"),
    ("eval.hist_tile_px", "histogram matching tile edge"),
    ("eval.hist_bins", "histogram matching bins"),
    ("eval.infer_tile", "inference tile edge, 0 for a single pass"),
    ("eval.infer_frame", "issue-time frame for infer, negative counts from the end"),
    ("eval.bench_workers", "comma-separated worker counts for bench-scaling"),
    ("eval.bench_batches", "comma-separated batch sizes for bench-batch"),
    ("eval.bench_epochs", "epochs per benchmark run"),
];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| parse::<usize>(s.trim())).collect()
}

fn show_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (s, p, e) = (&mut self.sim, &mut self.pipeline, &mut self.eval);
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(v)?,
            "out" => self.out = PathBuf::from(v),
            "sim.grid_h" => s.grid_h = parse(v)?,
            "sim.grid_w" => s.grid_w = parse(v)?,
            "sim.frames" => s.frames = parse(v)?,
            "sim.cells" => s.cells = parse(v)?,
            "sim.amplitude_lo" => s.amplitude.lo = parse(v)?,
            "sim.amplitude_hi" => s.amplitude.hi = parse(v)?,
            "sim.radius_lo" => s.radius_km.lo = parse(v)?,
            "sim.radius_hi" => s.radius_km.hi = parse(v)?,
            "sim.vx_lo" => s.velocity_x.lo = parse(v)?,
            "sim.vx_hi" => s.velocity_x.hi = parse(v)?,
            "sim.vy_lo" => s.velocity_y.lo = parse(v)?,
            "sim.vy_hi" => s.velocity_y.hi = parse(v)?,
            "sim.growth_lo" => s.growth.lo = parse(v)?,
            "sim.growth_hi" => s.growth.hi = parse(v)?,
            "sim.v_max" => s.v_max = parse(v)?,
            "sim.radar_spacing" => s.radar_spacing = parse(v)?,
            "pipeline.patch" => p.patch = parse(v)?,
            "pipeline.train_samples" => p.train_samples = parse(v)?,
            "pipeline.test_samples" => p.test_samples = parse(v)?,
            "pipeline.patches_per_window" => p.patches_per_window = parse(v)?,
            "pipeline.w_floor" => p.w_floor = parse(v)?,
            "pipeline.test_frames" => p.test_frames = parse(v)?,
            "model.preset" => self.model = parse(v)?,
            "train.workers" => t.workers = parse(v)?,
            "train.batch" => t.batch = parse(v)?,
            "train.eta" => t.eta = parse(v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(v)?,
            "train.epochs" => t.epochs = parse(v)?,
            "train.lr_policy" => t.lr_policy = v.parse().map_err(|e: Error| e.to_string())?,
            "train.shuffle" => t.shuffle = parse(v)?,
            "train.momentum" => t.momentum = parse(v)?,
            "train.val_fraction" => t.val_fraction = parse(v)?,
            "train.val_batch" => t.val_batch = parse(v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(v)?,
            "eval.crop" => e.crop = parse(v)?,
            "eval.batch" => e.batch = parse(v)?,
            "eval.hist_tile_px" => e.hist_tile_px = parse(v)?,
            "eval.hist_bins" => e.hist_bins = parse(v)?,
            "eval.infer_tile" => e.infer_tile = parse(v)?,
            "eval.infer_frame" => e.infer_frame = parse(v)?,
            "eval.bench_workers" => e.bench_workers = parse_list(v)?,
            "eval.bench_batches" => e.bench_batches = parse_list(v)?,
            "eval.bench_epochs" => e.bench_epochs = parse(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// All keys with their current values, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (s, p, e, t) = (&self.sim, &self.pipeline, &self.eval, &self.train);
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.out.display().to_string(),
            s.grid_h.to_string(),
            s.grid_w.to_string(),
            s.frames.to_string(),
            s.cells.to_string(),
            s.amplitude.lo.to_string(),
            s.amplitude.hi.to_string(),
            s.radius_km.lo.to_string(),
            s.radius_km.hi.to_string(),
            s.velocity_x.lo.to_string(),
            s.velocity_x.hi.to_string(),
            s.velocity_y.lo.to_string(),
            s.velocity_y.hi.to_string(),
            s.growth.lo.to_string(),
            s.growth.hi.to_string(),
            s.v_max.to_string(),
            s.radar_spacing.to_string(),
            p.patch.to_string(),
            p.train_samples.to_string(),
            p.test_samples.to_string(),
            p.patches_per_window.to_string(),
            p.w_floor.to_string(),
            p.test_frames.to_string(),
            self.model.to_string(),
            t.workers.to_string(),
            t.batch.to_string(),
            t.eta.to_string(),
            t.warmup_epochs.to_string(),
            t.epochs.to_string(),
            t.lr_policy.to_string(),
            t.shuffle.to_string(),
            t.momentum.to_string(),
            t.val_fraction.to_string(),
            t.val_batch.to_string(),
            self.checkpoint_every.to_string(),
            e.crop.to_string(),
            e.batch.to_string(),
            e.hist_tile_px.to_string(),
            e.hist_bins.to_string(),
            e.infer_tile.to_string(),
            e.infer_frame.to_string(),
            show_list(&e.bench_workers),
            show_list(&e.bench_batches),
            e.bench_epochs.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// Parse a config file on top of the defaults.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{origin}:{}: {msg}", i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(at(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(|m| at(format!("{key}: {m}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text, &path.display().to_string())
    }

    /// Canonical text, excluding the output location.
    pub fn canonical_text(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| *k != "out")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn hash(&self) -> u64 {
        hash_str(&self.canonical_text())
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.sim;
        SimConfig {
            grid_h: s.grid_h,
            grid_w: s.grid_w,
            frame_count: s.frames,
            cell_count: s.cells,
            amplitude: s.amplitude,
            radius_km: s.radius_km,
            velocity_x: s.velocity_x,
            velocity_y: s.velocity_y,
            growth: s.growth,
            v_max: s.v_max,
            radar_sites: lattice_sites(s.grid_h, s.grid_w, s.radar_spacing),
            seed: self.seed,
            ..SimConfig::default()
        }
    }

    pub fn model_config(&self, patch: usize) -> ModelConfig {
        match self.model {
            ModelPreset::Tiny => ModelConfig::tiny(),
            ModelPreset::Canonical => ModelConfig::canonical(),
        }
        .with_patch(patch)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed.wrapping_add(4), ..self.train.clone() }
    }

    pub fn hist_config(&self) -> HistMatchConfig {
        HistMatchConfig { tile_px: self.eval.hist_tile_px, bins: self.eval.hist_bins }
    }

    /// Seed for model initialization.
    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim_config().validate()?;
        self.train_config().validate()?;
        self.hist_config().validate()?;
        let p = &self.pipeline;
        if p.train_samples == 0 || p.test_samples == 0 || p.patches_per_window == 0 {
            return Err(Error::Config("pipeline sample counts must be positive".into()));
        }
        if p.test_frames < 13 || p.test_frames + 13 > self.sim.frames {
            return Err(Error::Config(format!(
                "pipeline.test_frames {} must leave 13 or more frames for each of the train and test splits of {}",
                p.test_frames, self.sim.frames
            )));
        }
        let mcfg = self.model_config(p.patch);
        let plan = infer_shapes(&mcfg, p.patch, p.patch)?;
        plan.check_loss_crops(&mcfg)?;
        if self.eval.crop == 0 || self.eval.crop > plan.output().h {
            return Err(Error::Config(format!(
                "eval.crop {} must be within the {}-pixel output of a {} patch",
                self.eval.crop,
                plan.output().h,
                p.patch
            )));
        }
        if self.eval.bench_workers.is_empty() || self.eval.bench_batches.is_empty() {
            return Err(Error::Config("benchmark lists must be non-empty".into()));
        }
        Ok(())
    }
}

pub fn keys_help() -> String {
    let mut s = String::from("Config keys (`section.key = value`, `#` starts a comment):\n");
    let defaults = RunConfig::default().entries();
    for ((k, doc), (_, v)) in KEYS.iter().zip(defaults) {
        s.push_str(&format!("  {k:<28} {doc} [default: {v}]\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_cover_entries() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.entries().len(), KEYS.len());
        let mut round = RunConfig::default();
        for (k, v) in cfg.entries() {
            round.set(k, &v).unwrap();
        }
        assert_eq!(round, cfg);
    }

    #[test]
    fn parse_file() {
        let text = "# comment\nseed = 9\n\ntrain.epochs = 3 # trailing\ntrain.lr_policy = scale_down\neval.bench_workers = 1, 2\n";
        let cfg = RunConfig::from_text(text, "f").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr_policy, LrPolicy::ScaleDown);
        assert_eq!(cfg.eval.bench_workers, vec![1, 2]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::from_text("seed = 1\nsim.colour = red\n", "c.cfg").unwrap_err().to_string();
        assert!(err.contains("c.cfg:2") && err.contains("unknown key"), "{err}");
        let err = RunConfig::from_text("train.batch = many\n", "c.cfg").unwrap_err().to_string();
        assert!(err.contains("c.cfg:1") && err.contains("train.batch"), "{err}");
        let err = RunConfig::from_text("seed\n", "c.cfg").unwrap_err().to_string();
        assert!(err.contains("c.cfg:1"), "{err}");
        let err = RunConfig::from_text("seed = 1\nseed = 2\n", "c.cfg").unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn defaults_validate_and_hash_tracks_values() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let mut other = cfg.clone();
        other.out = PathBuf::from("elsewhere");
        assert_eq!(other.hash(), cfg.hash());
        other.seed = 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn help_lists_every_key() {
        let help = keys_help();
        assert!(KEYS.iter().all(|(k, _)| help.contains(k)));
    }
}
