//! Synchronous data-parallel SGD over worker threads.
//!
//! Each worker owns a full replica of the parameters and one shard of the
//! training set. Per step it computes the unnormalized gradient sum over its
//! batch, publishes it, and waits at a barrier. Afterwards every worker reads
//! all contributions in rank order, forms the same average, and applies the
//! same update, so replicas stay bit-identical without a broadcast.
//!
//! Contribution slots are double-buffered by step parity: a worker that runs
//! ahead into step `t + 1` writes the other half while slower workers may
//! still be reading step `t`. Getting to `t + 2` requires passing the barrier
//! of `t + 1`, which every reader of `t` must have reached first.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;
use std::sync::{Barrier, Mutex};
use std::time::Instant;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{check_version, expect_eof, read_magic, write_atomic};
use crate::error::{truncated, Error, Result};
use crate::graph::{GradientSet, ParameterSet};
use crate::net::weights::{decode_weights, encode_weights};
use crate::net::{hash_bytes, NowcastModel};
use crate::pipeline::{shard, validation_subsample, PatchDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrPolicy {
    /// `eta * N`
    ScaleUp,
    /// `eta / N`
    ScaleDown,
    /// `eta`
    None,
}

impl std::str::FromStr for LrPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale_up" => Ok(LrPolicy::ScaleUp),
            "scale_down" => Ok(LrPolicy::ScaleDown),
            "none" => Ok(LrPolicy::None),
            _ => Err(Error::Config(format!("unknown lr policy {s:?} (scale_up, scale_down, none)"))),
        }
    }
}

impl std::fmt::Display for LrPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrPolicy::ScaleUp => "scale_up",
            LrPolicy::ScaleDown => "scale_down",
            LrPolicy::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub workers: usize,
    /// Per-worker batch size.
    pub batch: usize,
    pub eta: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub lr_policy: LrPolicy,
    pub seed: u64,
    pub shuffle: bool,
    /// Heavy-ball coefficient; 0 is plain SGD.
    pub momentum: f64,
    pub val_fraction: f64,
    pub val_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            workers: 1,
            batch: 8,
            eta: 0.0002,
            warmup_epochs: 5,
            epochs: 100,
            lr_policy: LrPolicy::ScaleUp,
            seed: 0,
            shuffle: true,
            momentum: 0.0,
            val_fraction: 0.3,
            val_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.workers == 0 || self.batch == 0 || self.val_batch == 0 {
            return bad("workers, batch and val_batch must be >= 1");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs exceeds epochs");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 1.0) {
            return bad("val_fraction must be in (0, 1]");
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: linear warmup from `eta` to the policy target.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let n = cfg.workers as f64;
    let target = match cfg.lr_policy {
        LrPolicy::ScaleUp => cfg.eta * n,
        LrPolicy::ScaleDown => cfg.eta / n,
        LrPolicy::None => cfg.eta,
    };
    if epoch >= cfg.warmup_epochs {
        target
    } else {
        cfg.eta + (epoch as f64 / cfg.warmup_epochs as f64) * (target - cfg.eta)
    }
}

/// `(sum of worker sums) / (n * N)`, accumulated in rank order.
pub fn allreduce_average(sums: &[GradientSet], batch_sizes: &[usize], n: usize, workers: usize) -> Result<GradientSet> {
    if sums.len() != workers || batch_sizes.len() != workers || workers == 0 {
        return Err(Error::Config(format!("expected {workers} contributions, got {}", sums.len())));
    }
    if let Some((rank, &b)) = batch_sizes.iter().enumerate().find(|(_, &b)| b != n) {
        return Err(Error::Data(format!("worker {rank} reduced {b} samples, expected {n}")));
    }
    if let Some(rank) = sums.iter().position(|g| !g.same_structure(&sums[0])) {
        return Err(Error::Data(format!("worker {rank} gradient structure differs from worker 0")));
    }
    let mut acc = sums[0].clone();
    for g in &sums[1..] {
        acc.add_assign(g);
    }
    let denom = (n * workers) as f64;
    for (_, t) in &mut acc.entries {
        for v in t.data_mut() {
            *v /= denom;
        }
    }
    Ok(acc)
}

fn check_finite(params: &ParameterSet, grad: &GradientSet) -> Result<()> {
    for (pid, t) in &grad.entries {
        if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} has value {} at index {i}",
                params.name(*pid),
                t.data()[i]
            )));
        }
    }
    Ok(())
}

/// `omega -= lr * grad`. Nothing is modified when any gradient is non-finite.
pub fn sgd_step(params: &mut ParameterSet, grad: &GradientSet, lr: f64) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::Data("gradient and parameter sets differ".into()));
    }
    check_finite(params, grad)?;
    for (pid, g) in &grad.entries {
        let p = params.get_mut(*pid);
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("param {pid}"), "gradient shape differs"));
        }
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Heavy-ball update: `v = mu * v + grad; omega -= lr * v`.
pub fn momentum_step(params: &mut ParameterSet, velocity: &mut GradientSet, grad: &GradientSet, lr: f64, mu: f64) -> Result<()> {
    check_finite(params, grad)?;
    for ((_, v), (_, g)) in velocity.entries.iter_mut().zip(&grad.entries) {
        for (a, &b) in v.data_mut().iter_mut().zip(g.data()) {
            *a = mu * *a + b;
        }
    }
    sgd_step(params, velocity, lr)
}

/// SHA-256 prefix of the parameter bytes; equal only for identical replicas.
pub fn params_hash(params: &ParameterSet) -> u64 {
    let mut bytes = Vec::with_capacity(params.scalar_count() * 8);
    for (_, t) in params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    hash_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub rank: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: TrainConfig,
    /// Sorted by epoch, rank, then phase.
    pub records: Vec<MetricsRecord>,
    pub total_wall_seconds: f64,
    /// Lowest per-epoch validation loss (mean over ranks).
    pub min_val_loss: Option<f64>,
    pub steps_per_epoch: usize,
    /// One row per optimizer step, one hash per rank.
    pub replica_hashes: Vec<Vec<u64>>,
}

impl TrainingReport {
    /// Mean validation loss over ranks, per epoch.
    pub fn val_curve(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in self.records.iter().filter(|r| r.phase == Phase::Val) {
            match out.last_mut() {
                Some(last) if last.0 == r.epoch => {
                    last.1 += r.loss;
                    last.2 += 1;
                }
                _ => out.push((r.epoch, r.loss, 1)),
            }
        }
        out.into_iter().map(|(e, s, c)| (e, s / c as f64)).collect()
    }

    pub fn replicas_consistent(&self) -> bool {
        self.replica_hashes.iter().all(|row| row.iter().all(|&h| h == row[0]))
    }
}

pub fn write_metrics_csv(w: &mut impl Write, records: &[MetricsRecord]) -> io::Result<()> {
    writeln!(w, "epoch,rank,phase,loss,lr,wall_seconds")?;
    for r in records {
        let phase = match r.phase {
            Phase::Train => "train",
            Phase::Val => "val",
        };
        writeln!(w, "{},{},{},{:e},{:e},{:.6}", r.epoch, r.rank, phase, r.loss, r.lr, r.wall_seconds)?;
    }
    Ok(())
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// Next epoch to run.
    pub epoch: usize,
    pub iteration: u64,
    pub params: ParameterSet,
    pub velocity: Option<GradientSet>,
    /// One stream per rank, seeded `seed + rank`.
    pub rngs: Vec<ChaCha8Rng>,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig, params: ParameterSet) -> Self {
        let velocity = (cfg.momentum > 0.0).then(|| GradientSet::zeros_like(&params));
        TrainerState {
            epoch: 0,
            iteration: 0,
            params,
            velocity,
            rngs: (0..cfg.workers).map(|r| ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64))).collect(),
        }
    }
}

/// Full optimizer steps every worker takes per epoch.
pub fn steps_per_epoch(cfg: &TrainConfig, samples: usize) -> Result<usize> {
    let smallest = shard(samples, cfg.workers, cfg.workers - 1)?.len();
    Ok(smallest / cfg.batch)
}

/// Batches for one epoch of `rank`, drawing the shuffle from `rng`.
pub fn worker_batches(cfg: &TrainConfig, rank: usize, rng: &mut ChaCha8Rng, samples: usize) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = shard(samples, cfg.workers, rank)?.collect();
    if cfg.shuffle {
        order.shuffle(rng);
    }
    let steps = steps_per_epoch(cfg, samples)?;
    Ok(order.chunks_exact(cfg.batch).take(steps).map(<[usize]>::to_vec).collect())
}

type Contribution = std::result::Result<(f64, GradientSet), String>;

struct Shared {
    barrier: Barrier,
    slots: [Vec<Mutex<Option<Contribution>>>; 2],
}

struct WorkerOutput {
    params: ParameterSet,
    velocity: Option<GradientSet>,
    rng: ChaCha8Rng,
    records: Vec<MetricsRecord>,
    hashes: Vec<u64>,
    iteration: u64,
}

/// Train from scratch for `cfg.epochs` epochs.
pub fn train(
    cfg: &TrainConfig,
    model: &NowcastModel,
    params: ParameterSet,
    train_set: &PatchDataset,
    test_set: &PatchDataset,
) -> Result<(TrainerState, TrainingReport)> {
    let mut state = TrainerState::new(cfg, params);
    let report = run_epochs(cfg, model, &mut state, train_set, test_set, cfg.epochs)?;
    Ok((state, report))
}

/// Advance `state` up to (not including) epoch `until`.
pub fn run_epochs(
    cfg: &TrainConfig,
    model: &NowcastModel,
    state: &mut TrainerState,
    train_set: &PatchDataset,
    test_set: &PatchDataset,
    until: usize,
) -> Result<TrainingReport> {
    cfg.validate()?;
    if state.rngs.len() != cfg.workers {
        return Err(Error::Config(format!("state has {} workers, config {}", state.rngs.len(), cfg.workers)));
    }
    if (cfg.momentum > 0.0) != state.velocity.is_some() {
        return Err(Error::Config("momentum setting does not match trainer state".into()));
    }
    let steps = steps_per_epoch(cfg, train_set.len())?;
    if steps == 0 && until > state.epoch {
        return Err(Error::Config(format!(
            "shards of {} samples over {} workers cannot fill a batch of {}",
            train_set.len(),
            cfg.workers,
            cfg.batch
        )));
    }
    let val_sets: Vec<Vec<usize>> = (0..cfg.workers)
        .map(|r| validation_subsample(test_set.len(), cfg.val_fraction, cfg.seed, r))
        .collect::<Result<_>>()?;

    let shared = Shared {
        barrier: Barrier::new(cfg.workers),
        slots: [(); 2].map(|_| (0..cfg.workers).map(|_| Mutex::new(None)).collect()),
    };
    let start = Instant::now();
    let first_epoch = state.epoch;
    let outputs: Vec<Result<WorkerOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|rank| {
                let ctx = WorkerCtx {
                    cfg,
                    model,
                    train_set,
                    test_set,
                    val: &val_sets[rank],
                    shared: &shared,
                    start,
                    rank,
                };
                let out = WorkerOutput {
                    params: state.params.clone(),
                    velocity: state.velocity.clone(),
                    rng: state.rngs[rank].clone(),
                    records: Vec::new(),
                    hashes: Vec::new(),
                    iteration: state.iteration,
                };
                s.spawn(move || ctx.run(out, first_epoch, until))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let total_wall_seconds = start.elapsed().as_secs_f64();

    let mut outputs: Vec<WorkerOutput> = outputs.into_iter().collect::<Result<_>>()?;
    let mut records: Vec<MetricsRecord> = outputs.iter_mut().flat_map(|o| std::mem::take(&mut o.records)).collect();
    records.sort_by_key(|r| (r.epoch, r.rank, r.phase == Phase::Val));
    let n_steps = outputs[0].hashes.len();
    let replica_hashes: Vec<Vec<u64>> = (0..n_steps).map(|t| outputs.iter().map(|o| o.hashes[t]).collect()).collect();

    state.epoch = until.max(state.epoch);
    state.iteration = outputs[0].iteration;
    state.rngs = outputs.iter().map(|o| o.rng.clone()).collect();
    let lead = outputs.swap_remove(0);
    state.params = lead.params;
    state.velocity = lead.velocity;

    let mut report = TrainingReport {
        config: cfg.clone(),
        records,
        total_wall_seconds,
        min_val_loss: None,
        steps_per_epoch: steps,
        replica_hashes,
    };
    report.min_val_loss = report.val_curve().into_iter().map(|(_, l)| l).reduce(f64::min);
    Ok(report)
}

struct WorkerCtx<'a> {
    cfg: &'a TrainConfig,
    model: &'a NowcastModel,
    train_set: &'a PatchDataset,
    test_set: &'a PatchDataset,
    val: &'a [usize],
    shared: &'a Shared,
    start: Instant,
    rank: usize,
}

impl WorkerCtx<'_> {
    fn run(&self, mut out: WorkerOutput, first_epoch: usize, until: usize) -> Result<WorkerOutput> {
        let cfg = self.cfg;
        for epoch in first_epoch..until {
            let lr = lr_at(epoch, cfg);
            let batches = worker_batches(cfg, self.rank, &mut out.rng, self.train_set.len())?;
            let mut loss_sum = 0.0;
            for batch in &batches {
                let parity = (out.iteration % 2) as usize;
                let contribution = self.contribute(&out.params, batch);
                *self.shared.slots[parity][self.rank].lock().unwrap() = Some(contribution);
                self.shared.barrier.wait();

                let mut sums = Vec::with_capacity(cfg.workers);
                let mut losses = Vec::with_capacity(cfg.workers);
                for (rank, slot) in self.shared.slots[parity].iter().enumerate() {
                    match slot.lock().unwrap().as_ref().expect("slot filled before barrier") {
                        Ok((loss, g)) => {
                            losses.push(*loss);
                            sums.push(g.clone());
                        }
                        Err(msg) => return Err(Error::Graph(format!("worker {rank}: {msg}"))),
                    }
                }
                if let Some(&loss) = losses.iter().find(|l| !l.is_finite()) {
                    return Err(Error::Diverged { epoch, iteration: out.iteration, loss });
                }
                let avg = allreduce_average(&sums, &vec![cfg.batch; cfg.workers], cfg.batch, cfg.workers)?;
                match out.velocity.as_mut() {
                    Some(v) => momentum_step(&mut out.params, v, &avg, lr, cfg.momentum)?,
                    None => sgd_step(&mut out.params, &avg, lr)?,
                }
                out.iteration += 1;
                out.hashes.push(params_hash(&out.params));
                loss_sum += losses[self.rank];
            }
            let now = self.start.elapsed().as_secs_f64();
            let train_loss = loss_sum / batches.len().max(1) as f64;
            out.records.push(MetricsRecord { epoch, rank: self.rank, phase: Phase::Train, loss: train_loss, lr, wall_seconds: now });
            let val_loss = self.validate(&out.params)?;
            let now = self.start.elapsed().as_secs_f64();
            out.records.push(MetricsRecord { epoch, rank: self.rank, phase: Phase::Val, loss: val_loss, lr, wall_seconds: now });
            if self.rank == 0 {
                log::info!("epoch {epoch}: lr {lr:.3e} train {train_loss:.5} val {val_loss:.5} ({now:.1}s)");
            }
        }
        Ok(out)
    }

    /// Gradient sum (batch mean times batch size) and batch-mean loss.
    fn contribute(&self, params: &ParameterSet, batch: &[usize]) -> Contribution {
        let (x, y) = self.train_set.batch(batch);
        let (loss, mut g) = self.model.loss_and_grad(params, &x, &y).map_err(|e| e.to_string())?;
        g.scale(batch.len() as f64);
        Ok((loss, g))
    }

    fn validate(&self, params: &ParameterSet) -> Result<f64> {
        let mut total = 0.0;
        for chunk in self.val.chunks(self.cfg.val_batch) {
            let (x, y) = self.test_set.batch(chunk);
            total += self.model.loss(params, &x, &y)? * chunk.len() as f64;
        }
        Ok(total / self.val.len() as f64)
    }
}

pub const CKPT_MAGIC: &[u8; 9] = b"NWC-CKPT1";
pub const CKPT_VERSION: u16 = 1;

/// `NWC-CKPT1`: magic, version u16, model config hash u64, workers u32,
/// batch u32, seed u64, epoch u64, iteration u64, per-rank RNG state
/// (32-byte seed, stream u64, word position u128), then length-prefixed
/// (u64) `NWW1` blobs for the weights and, if present, the velocity.
pub fn encode_checkpoint(w: &mut impl Write, state: &TrainerState, cfg: &TrainConfig, model_hash: u64) -> io::Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_u16::<LE>(CKPT_VERSION)?;
    w.write_u64::<LE>(model_hash)?;
    w.write_u32::<LE>(cfg.workers as u32)?;
    w.write_u32::<LE>(cfg.batch as u32)?;
    w.write_u64::<LE>(cfg.seed)?;
    w.write_u64::<LE>(state.epoch as u64)?;
    w.write_u64::<LE>(state.iteration)?;
    w.write_u32::<LE>(state.rngs.len() as u32)?;
    for rng in &state.rngs {
        w.write_all(&rng.get_seed())?;
        w.write_u64::<LE>(rng.get_stream())?;
        w.write_u128::<LE>(rng.get_word_pos())?;
    }
    let mut blob = Vec::new();
    encode_weights(&mut blob, &state.params, model_hash)?;
    w.write_u64::<LE>(blob.len() as u64)?;
    w.write_all(&blob)?;
    match &state.velocity {
        Some(v) => {
            w.write_u8(1)?;
            let mut vp = ParameterSet::new();
            for (pid, t) in &v.entries {
                vp.push(state.params.name(*pid).to_string(), t.clone());
            }
            let mut blob = Vec::new();
            encode_weights(&mut blob, &vp, model_hash)?;
            w.write_u64::<LE>(blob.len() as u64)?;
            w.write_all(&blob)?;
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

pub fn decode_checkpoint(r: &mut impl Read, cfg: &TrainConfig, model_hash: u64) -> Result<TrainerState> {
    let t = truncated("checkpoint");
    read_magic(r, CKPT_MAGIC, "checkpoint")?;
    check_version(r.read_u16::<LE>().map_err(&t)?, CKPT_VERSION)?;
    let found = r.read_u64::<LE>().map_err(&t)?;
    if found != model_hash {
        return Err(Error::ConfigHashMismatch { expected: model_hash, found });
    }
    let workers = r.read_u32::<LE>().map_err(&t)? as usize;
    let batch = r.read_u32::<LE>().map_err(&t)? as usize;
    let seed = r.read_u64::<LE>().map_err(&t)?;
    if workers != cfg.workers || batch != cfg.batch || seed != cfg.seed {
        return Err(Error::Config(format!(
            "checkpoint was written for workers={workers} batch={batch} seed={seed}, \
             config has workers={} batch={} seed={}",
            cfg.workers, cfg.batch, cfg.seed
        )));
    }
    let epoch = r.read_u64::<LE>().map_err(&t)? as usize;
    let iteration = r.read_u64::<LE>().map_err(&t)?;
    let n_rngs = r.read_u32::<LE>().map_err(&t)? as usize;
    if n_rngs != workers {
        return Err(Error::Data(format!("checkpoint holds {n_rngs} RNG states for {workers} workers")));
    }
    let mut rngs = Vec::with_capacity(n_rngs);
    for _ in 0..n_rngs {
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(&t)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.read_u64::<LE>().map_err(&t)?);
        rng.set_word_pos(r.read_u128::<LE>().map_err(&t)?);
        rngs.push(rng);
    }
    let read_blob = |r: &mut dyn Read| -> Result<ParameterSet> {
        let len = r.read_u64::<LE>().map_err(&t)? as usize;
        let mut blob = vec![0u8; len];
        r.read_exact(&mut blob).map_err(&t)?;
        let mut slice = blob.as_slice();
        let (_, p) = decode_weights(&mut slice)?;
        if !slice.is_empty() {
            return Err(Error::Data("checkpoint weight blob has trailing bytes".into()));
        }
        Ok(p)
    };
    let params = read_blob(r)?;
    let velocity = match r.read_u8().map_err(&t)? {
        0 => None,
        1 => {
            let v = read_blob(r)?;
            if !v.same_structure(&params) {
                return Err(Error::Data("checkpoint velocity does not match weights".into()));
            }
            Some(GradientSet { entries: v.iter().enumerate().map(|(i, (_, t))| (i, t.clone())).collect() })
        }
        f => return Err(Error::Data(format!("checkpoint velocity flag {f}"))),
    };
    Ok(TrainerState { epoch, iteration, params, velocity, rngs })
}

pub fn save_checkpoint(path: &Path, state: &TrainerState, cfg: &TrainConfig, model_hash: u64) -> Result<()> {
    write_atomic(path, |w| encode_checkpoint(w, state, cfg, model_hash))
}

pub fn load_checkpoint(path: &Path, cfg: &TrainConfig, model_hash: u64) -> Result<TrainerState> {
    let mut r = BufReader::new(File::open(path)?);
    let state = decode_checkpoint(&mut r, cfg, model_hash)?;
    expect_eof(&mut r, "checkpoint")?;
    Ok(state)
}
