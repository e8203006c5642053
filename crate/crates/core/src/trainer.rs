//! Optimizer, learning-rate schedule, the training step and the fit loop.
//!
//! All randomness is derived from `(seed, step, slot)`, so a run is fully
//! determined by its data, config and seed, and resuming from a checkpoint
//! continues the same trajectory. Scenes of a batch may be processed on
//! `OF3D_THREADS` workers; gradients are reduced in batch order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::decoder::SelectMode;
use crate::error::{Error, Result};
use crate::losses::{scene_loss, LossParts};
use crate::model::{forward, init_model, PreparedScene};
use crate::params::ParamStore;
use crate::partition::{project_ground_truth, SegmentGroundTruth};
use crate::scene::{augment, load_scene, Scene};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const LOG_HEADER: &str = "OF3D-LOG v1";

/// `base · (1 − step/total)^power`.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, power: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let frac = 1.0 - step.min(total) as f64 / total as f64;
    base_lr * frac.powf(power)
}

/// First and second moments per parameter plus the update count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// One AdamW update with decoupled weight decay. Returns `false` and leaves
/// everything untouched when a gradient is not finite.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<bool> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
        }
    }
    if grads.values().any(|g| !g.is_finite()) {
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| g.map(|_| 0.0));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| g.map(|_| 0.0));
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            md[k] = ADAM_BETA1 * md[k] + (1.0 - ADAM_BETA1) * gk;
            vd[k] = ADAM_BETA2 * vd[k] + (1.0 - ADAM_BETA2) * gk * gk;
            let mh = md[k] / c1;
            let vh = vd[k] / c2;
            pd[k] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + weight_decay * pd[k]);
        }
    }
    Ok(true)
}

/// SplitMix64 finalizer over a combination of inputs.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// A prepared scene with its ground truth over segments.
#[derive(Clone, Debug)]
pub struct Sample {
    pub prep: PreparedScene,
    pub gt: SegmentGroundTruth,
}

impl Sample {
    pub fn new(scene: Scene, cfg: &RunConfig) -> Result<Self> {
        let prep = PreparedScene::new(scene, &cfg.model)?;
        let gt = project_ground_truth(&prep.scene, &prep.partition)?;
        Ok(Self { prep, gt })
    }
}

#[derive(Clone, Debug)]
struct SceneResult {
    grads: BTreeMap<String, Tensor>,
    parts: LossParts,
    unmatched_gt: usize,
    matcher_ns: u64,
}

fn scene_gradients(params: &ParamStore, cfg: &RunConfig, sample: &Sample, seed: u64) -> Result<Option<SceneResult>> {
    if sample.prep.partition.num_segments() == 0 {
        return Ok(None);
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward(
        &bound,
        &tape,
        &sample.prep.input,
        &sample.prep.partition,
        &cfg.model,
        SelectMode::Train,
        seed,
    )?;
    let loss = scene_loss(&out, &sample.gt, &sample.prep.scene.catalog, cfg.matcher, &cfg.weights)?;
    loss.total.backward()?;
    Ok(Some(SceneResult {
        grads: bound.grads(),
        parts: loss.parts,
        unmatched_gt: loss.unmatched_gt,
        matcher_ns: loss.matcher_ns,
    }))
}

/// Diagnostics of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Number of the step, starting at 1.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub parts: LossParts,
    pub unmatched_gt: usize,
    pub matcher_ns: u64,
    pub skipped_scenes: usize,
    /// False when a non-finite gradient caused the update to be skipped.
    pub applied: bool,
}

impl StepRecord {
    pub fn log_line(&self, timings: bool) -> String {
        format!(
            "{} {} {} {} {} {} {} {} {}",
            self.step,
            self.lr,
            self.loss,
            self.parts.cls,
            self.parts.bce,
            self.parts.dice,
            self.parts.sem,
            self.unmatched_gt,
            if timings { self.matcher_ns } else { 0 }
        )
    }
}

pub fn worker_threads() -> usize {
    std::env::var("OF3D_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    scenes: Vec<Scene>,
    cached: Vec<Option<Sample>>,
    step: usize,
    threads: usize,
}

impl Trainer {
    /// Fresh parameters from `cfg.seed`; class heads sized from the scenes' catalog.
    pub fn new(scenes: Vec<Scene>, mut cfg: RunConfig) -> Result<Self> {
        let first = scenes
            .first()
            .ok_or_else(|| Error::Contract("training needs at least one scene".into()))?;
        if scenes.iter().any(|s| s.catalog != first.catalog) {
            return Err(Error::Contract("scenes use different class catalogs".into()));
        }
        cfg.resolve_classes(&first.catalog);
        cfg.validate()?;
        let params = init_model(&cfg.model, cfg.seed)?;
        let augmenting = cfg.augment.flip || cfg.augment.z_rotate || cfg.augment.scale;
        let cached = if augmenting {
            vec![None; scenes.len()]
        } else {
            scenes
                .iter()
                .map(|s| Sample::new(s.clone(), &cfg).map(Some))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            cfg,
            params,
            adam: AdamState::default(),
            scenes,
            cached,
            step: 0,
            threads: worker_threads(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(scenes: Vec<Scene>, cfg: RunConfig, ckpt: &ParamStore) -> Result<Self> {
        let mut t = Self::new(scenes, cfg)?;
        let (params, adam) = split_checkpoint(ckpt)?;
        for (name, p) in t.params.iter() {
            match params.get(name) {
                Some(q) if q.shape() == p.shape() => {}
                _ => return Err(Error::Contract(format!("checkpoint does not fit parameter `{name}`"))),
            }
        }
        if params.len() != t.params.len() {
            return Err(Error::Contract("checkpoint has extra parameters".into()));
        }
        t.step = adam.step as usize;
        t.params = params;
        t.adam = adam;
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn set_threads(&mut self, n: usize) {
        self.threads = n.max(1);
    }

    /// Scene indices of batch `step`: consecutive slices of per-epoch shuffles.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.scenes.len();
        let b = self.cfg.batch_size;
        (0..b)
            .map(|j| {
                let global = step * b + j;
                let epoch = global / n;
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, 1, epoch as u64])));
                perm[global % n]
            })
            .collect()
    }

    fn run_slot(&self, scene_idx: usize, slot: usize) -> Result<Option<SceneResult>> {
        let step = self.step as u64;
        let q_seed = derive_seed(&[self.cfg.seed, 2, step, slot as u64]);
        match &self.cached[scene_idx] {
            Some(sample) => scene_gradients(&self.params, &self.cfg, sample, q_seed),
            None => {
                let a_seed = derive_seed(&[self.cfg.seed, 3, step, slot as u64]);
                let scene = augment(&self.scenes[scene_idx], a_seed, self.cfg.augment);
                let sample = Sample::new(scene, &self.cfg)?;
                scene_gradients(&self.params, &self.cfg, &sample, q_seed)
            }
        }
    }

    /// Forward, backward and one AdamW update on the next batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batch = self.batch_indices(self.step);
        let results: Vec<Result<Option<SceneResult>>> = if self.threads <= 1 || batch.len() == 1 {
            batch.iter().enumerate().map(|(slot, &i)| self.run_slot(i, slot)).collect()
        } else {
            let this = &*self;
            let chunk = batch.len().div_ceil(self.threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .chunks(chunk)
                    .enumerate()
                    .map(|(c, idx)| {
                        s.spawn(move || {
                            idx.iter()
                                .enumerate()
                                .map(|(k, &i)| this.run_slot(i, c * chunk + k))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("worker panicked"))
                    .collect()
            })
        };
        let mut used = Vec::new();
        let mut skipped = 0;
        for r in results {
            match r? {
                Some(x) => used.push(x),
                None => skipped += 1,
            }
        }
        let lr = lr_schedule(self.step, self.cfg.steps, self.cfg.lr, self.cfg.power);
        self.step += 1;
        let mut rec = StepRecord {
            step: self.step,
            lr,
            loss: 0.0,
            parts: LossParts::default(),
            unmatched_gt: used.iter().map(|r| r.unmatched_gt).sum(),
            matcher_ns: used.iter().map(|r| r.matcher_ns).sum(),
            skipped_scenes: skipped,
            applied: false,
        };
        if used.is_empty() {
            return Ok(rec);
        }
        let inv = 1.0 / used.len() as f64;
        let mut grads = used[0].grads.clone();
        for r in &used[1..] {
            for (k, g) in &r.grads {
                let acc = grads.get_mut(k).expect("same parameter set");
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        if self.cfg.clip_grad > 0.0 {
            let norm = grads
                .values()
                .flat_map(|g| g.data().iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.clip_grad {
                let s = self.cfg.clip_grad / norm;
                grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
            }
        }
        let mean = |f: fn(&LossParts) -> f64| used.iter().map(|r| f(&r.parts)).sum::<f64>() * inv;
        rec.parts = LossParts {
            cls: mean(|p| p.cls),
            bce: mean(|p| p.bce),
            dice: mean(|p| p.dice),
            sem: mean(|p| p.sem),
        };
        rec.loss = rec.parts.total(&self.cfg.weights);
        rec.applied = optimizer_step(&mut self.params, &grads, &mut self.adam, lr, self.cfg.weight_decay)?;
        // keep the step counter in the optimizer state even when an update is skipped
        self.adam.step = self.step as u64;
        Ok(rec)
    }

    /// Parameters plus optimizer state, ready for [`ParamStore::save`].
    pub fn checkpoint(&self) -> ParamStore {
        let mut out = self.params.clone();
        for (k, t) in &self.adam.m {
            out.insert(format!("adam.m/{k}"), t.clone());
        }
        for (k, t) in &self.adam.v {
            out.insert(format!("adam.v/{k}"), t.clone());
        }
        out.insert("adam.step", Tensor::scalar(self.step as f64));
        out
    }
}

/// Separates model parameters from optimizer state in a checkpoint.
pub fn split_checkpoint(ckpt: &ParamStore) -> Result<(ParamStore, AdamState)> {
    let mut params = ParamStore::new();
    let mut adam = AdamState::default();
    for (k, t) in ckpt.iter() {
        if let Some(name) = k.strip_prefix("adam.m/") {
            adam.m.insert(name.to_string(), t.clone());
        } else if let Some(name) = k.strip_prefix("adam.v/") {
            adam.v.insert(name.to_string(), t.clone());
        } else if k == "adam.step" {
            let s = t.item()?;
            if !(s >= 0.0 && s.fract() == 0.0) {
                return Err(Error::Contract(format!("bad optimizer step {s}")));
            }
            adam.step = s as u64;
        } else {
            params.insert(k.clone(), t.clone());
        }
    }
    Ok((params, adam))
}

/// Scene files (`*.of3d`) of a directory in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "of3d"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Contract(format!("no scene files in {}", dir.display())));
    }
    paths.iter().map(|p| load_scene(p)).collect()
}

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub records: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

/// Trains to `cfg.steps`, writing the resolved config, the log, periodic
/// checkpoints and the final checkpoint into `out`. With `resume` the run
/// continues from that checkpoint and appends to an existing log.
pub fn fit(scenes: Vec<Scene>, cfg: RunConfig, out: &Path, resume: Option<&Path>) -> Result<FitSummary> {
    fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(scenes, cfg, &ParamStore::load(p)?)?,
        None => Trainer::new(scenes, cfg)?,
    };
    fs::write(out.join(CONFIG_FILE), trainer.cfg.to_text())?;
    let log_path = out.join(LOG_FILE);
    let mut log = if resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "{LOG_HEADER}")?;
        f
    };
    let mut records = Vec::new();
    while trainer.step() < trainer.cfg.steps {
        let rec = trainer.train_step()?;
        let mut line = rec.log_line(trainer.cfg.log_timings);
        line.push('\n');
        log.write_all(line.as_bytes())?;
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && rec.step % every == 0 {
            trainer.checkpoint().save(&out.join(format!("checkpoint_{:06}.ckpt", rec.step)))?;
        }
        records.push(rec);
    }
    log.flush()?;
    let path = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&path)?;
    Ok(FitSummary {
        records,
        checkpoint: path,
    })
}

/// Parses an `OF3D-LOG v1` file into step records (timings as logged).
pub fn parse_log(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == LOG_HEADER => {}
        _ => return Err(Error::parse(1, format!("expected `{LOG_HEADER}`"))),
    }
    lines
        .map(|(i, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 9 {
                return Err(Error::parse(i + 1, "expected 9 fields"));
            }
            let num = |j: usize| -> Result<f64> { f[j].parse().map_err(|_| Error::parse(i + 1, format!("bad number `{}`", f[j]))) };
            Ok(StepRecord {
                step: f[0].parse().map_err(|_| Error::parse(i + 1, "bad step"))?,
                lr: num(1)?,
                loss: num(2)?,
                parts: LossParts {
                    cls: num(3)?,
                    bce: num(4)?,
                    dice: num(5)?,
                    sem: num(6)?,
                },
                unmatched_gt: f[7].parse().map_err(|_| Error::parse(i + 1, "bad count"))?,
                matcher_ns: f[8].parse().map_err(|_| Error::parse(i + 1, "bad time"))?,
                skipped_scenes: 0,
                applied: true,
            })
        })
        .collect()
}

/// Text summary of a run, one `key value` per line.
pub fn summarize(records: &[StepRecord]) -> String {
    let mut s = String::new();
    if let (Some(a), Some(b)) = (records.first(), records.last()) {
        writeln!(s, "steps {}", records.len()).unwrap();
        writeln!(s, "first_loss {}", a.loss).unwrap();
        writeln!(s, "last_loss {}", b.loss).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, SyntheticParams};

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn adamw_fixtures() {
        let mut p = store(0.7);
        let mut st = AdamState::default();
        optimizer_step(&mut p, &grads(0.0), &mut st, 0.01, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().item().unwrap(), 0.7);

        let mut p = store(1.0);
        let mut st = AdamState::default();
        optimizer_step(&mut p, &grads(1.0), &mut st, 0.001, 0.0).unwrap();
        let moved = 1.0 - p.get("w").unwrap().item().unwrap();
        assert!((moved - 0.001).abs() < 1e-10, "{moved}");

        let mut p = store(2.0);
        let mut st = AdamState::default();
        optimizer_step(&mut p, &grads(0.0), &mut st, 0.01, 0.1).unwrap();
        assert!((p.get("w").unwrap().item().unwrap() - 2.0 * (1.0 - 0.001)).abs() < 1e-15);

        let mut p = store(2.0);
        assert!(!optimizer_step(&mut p, &grads(f64::NAN), &mut st, 0.01, 0.1).unwrap());
        assert_eq!(p.get("w").unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn schedule_fixtures() {
        assert_eq!(lr_schedule(0, 100, 1e-4, 0.9), 1e-4);
        assert_eq!(lr_schedule(100, 100, 1e-4, 0.9), 0.0);
        assert!((lr_schedule(50, 100, 1.0, 0.9) - 0.535_887).abs() < 1e-6);
    }

    fn tiny_setup() -> (Vec<Scene>, RunConfig) {
        let params = SyntheticParams {
            n_things: 2,
            points_per_surface: 12,
            ..SyntheticParams::default()
        };
        let scenes = (0..2).map(|s| generate_synthetic_scene(s, &params).unwrap()).collect();
        let mut cfg = RunConfig::parse(
            "channels = 8\nencoder_depth = 1\ndecoder_layers = 1\nheads = 2\nbatch_size = 2\nsteps = 4\nlr = 0.001",
        )
        .unwrap();
        cfg.augment = crate::scene::AugmentFlags::default();
        (scenes, cfg)
    }

    #[test]
    fn steps_are_deterministic_and_thread_independent() {
        let (scenes, cfg) = tiny_setup();
        let mut a = Trainer::new(scenes.clone(), cfg.clone()).unwrap();
        let mut b = Trainer::new(scenes, cfg).unwrap();
        b.set_threads(2);
        for _ in 0..3 {
            let ra = a.train_step().unwrap();
            let rb = b.train_step().unwrap();
            assert_eq!(ra.log_line(false), rb.log_line(false));
            let identity = ra.parts.total(&a.cfg.weights);
            assert!((ra.loss - identity).abs() <= 1e-12);
        }
        assert_eq!(a.checkpoint(), b.checkpoint());
    }

    #[test]
    fn resume_continues_the_same_trajectory() {
        let (scenes, cfg) = tiny_setup();
        let mut full = Trainer::new(scenes.clone(), cfg.clone()).unwrap();
        for _ in 0..4 {
            full.train_step().unwrap();
        }
        let mut first = Trainer::new(scenes.clone(), cfg.clone()).unwrap();
        for _ in 0..2 {
            first.train_step().unwrap();
        }
        let mut bytes = Vec::new();
        first.checkpoint().write_to(&mut bytes).unwrap();
        let ckpt = ParamStore::read_from(&bytes[..]).unwrap();
        let mut second = Trainer::resume(scenes, cfg, &ckpt).unwrap();
        assert_eq!(second.step(), 2);
        for _ in 0..2 {
            second.train_step().unwrap();
        }
        assert_eq!(full.checkpoint(), second.checkpoint());
    }

    #[test]
    fn instance_only_has_exactly_zero_semantic_loss() {
        let (scenes, mut cfg) = tiny_setup();
        cfg.set("queries", "instance").unwrap();
        let mut t = Trainer::new(scenes.clone(), cfg.clone()).unwrap();
        let r = t.train_step().unwrap();
        assert_eq!(r.parts.sem, 0.0);
        assert!(t.params.get("dec.sem_queries").is_none());
        cfg.set("queries", "semantic").unwrap();
        let r = Trainer::new(scenes, cfg).unwrap().train_step().unwrap();
        assert_eq!((r.parts.cls, r.parts.bce, r.parts.dice), (0.0, 0.0, 0.0));
        assert!(r.parts.sem > 0.0);
    }

    #[test]
    fn log_round_trip() {
        let rec = StepRecord {
            step: 3,
            lr: 1e-4,
            loss: 1.25,
            parts: LossParts { cls: 0.5, bce: 0.25, dice: 0.5, sem: 0.25 },
            unmatched_gt: 1,
            matcher_ns: 1234,
            skipped_scenes: 0,
            applied: true,
        };
        let text = format!("{LOG_HEADER}\n{}\n", rec.log_line(true));
        assert_eq!(parse_log(&text).unwrap(), vec![rec.clone()]);
        assert!(rec.log_line(false).ends_with(" 0"));
        assert!(parse_log("nope\n").is_err());
    }
}
