//! Small simulated datasets for training tests.

use nowcast_core::pipeline::{build_dataset, compute_norm_stats, normalize_with};
use nowcast_core::sim::{Range, StormSimulator};
use nowcast_core::{PatchDataset, PipelineConfig, SimConfig};

pub const PATCH: usize = 58;

pub fn small_sim(frames: usize, seed: u64) -> SimConfig {
    SimConfig {
        grid_h: 96,
        grid_w: 128,
        frame_count: frames,
        cell_count: 6,
        velocity_x: Range::new(2.0, 4.0),
        radar_sites: vec![(64, 48)],
        seed,
        ..SimConfig::default()
    }
}

/// `(train, test)` normalized with the train statistics.
pub fn datasets(train: usize, test: usize, seed: u64) -> (PatchDataset, PatchDataset) {
    let sim = StormSimulator::new(small_sim(40, seed)).unwrap();
    let seq = sim.sequence().unwrap();
    let mask = sim.coverage();
    let cfg = |samples, seed| PipelineConfig { patch: PATCH, samples, patches_per_window: 4, w_floor: 1.0, seed };
    let tr = build_dataset(&seq.slice(0, 26), &mask, &cfg(train, seed + 1)).unwrap();
    let te = build_dataset(&seq.slice(26, 40), &mask, &cfg(test, seed + 2)).unwrap();
    let stats = compute_norm_stats(&tr).unwrap();
    (normalize_with(&tr, stats), normalize_with(&te, stats))
}
