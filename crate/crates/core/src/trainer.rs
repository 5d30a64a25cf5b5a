//! Adam training loop with plateau halving, early stopping and evaluation.
//!
//! One epoch shuffles the training scenes, draws a fresh missing mask per
//! scene, and takes one optimiser step per batch on the batch-mean gradient.
//! Batch members run on the rayon pool with independent graphs; their
//! gradients are summed in batch order so the result does not depend on the
//! thread count. After each epoch the dev loss is measured with masks drawn at
//! the dev missing rate (fixed per scene across epochs) and drives the
//! learning-rate schedule and early stopping.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cues::CueKind;
use crate::error::{Error, Result};
use crate::objective::{self, MetricResult};
use crate::scalar::Scalar;
use crate::scenes::{self, derive_seed, MissingMask, Scene};
use crate::separator::{ModelConfig, ModelInput, Separator};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Graph, ParamId, ParamStore};

const SALT_TRAIN_MASK: u64 = 0x7261_696e;
const SALT_DEV_MASK: u64 = 0x6465_76;
const SALT_SHUFFLE: u64 = 0x7368_7566;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr_init: f64,
    pub plateau_patience: usize,
    pub stop_patience: usize,
    pub train_missing_rate: f64,
    /// Missing rate for the dev loss; `None` uses `train_missing_rate`.
    pub dev_missing_rate: Option<f64>,
    pub max_epochs: usize,
    pub seed: u64,
    /// Minimum absolute drop in dev loss that counts as an improvement.
    pub improvement: f64,
    /// Global L2 norm the batch gradient is clipped to; 0 disables clipping.
    pub grad_clip: f64,
    pub block_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(&[CueKind::Lip])
    }
}

impl TrainConfig {
    pub fn desk(cues: &[CueKind]) -> Self {
        Self {
            model: ModelConfig::desk(cues),
            batch_size: 8,
            lr_init: 1e-3,
            plateau_patience: 3,
            stop_patience: 10,
            train_missing_rate: 0.0,
            dev_missing_rate: None,
            max_epochs: 40,
            seed: 0,
            improvement: 1e-4,
            grad_clip: 5.0,
            block_len: scenes::DEFAULT_BLOCK_LEN,
        }
    }

    pub fn full(cues: &[CueKind]) -> Self {
        Self {
            model: ModelConfig::full(cues),
            batch_size: 32,
            max_epochs: 200,
            ..Self::desk(cues)
        }
    }

    pub fn dev_rate(&self) -> f64 {
        self.dev_missing_rate.unwrap_or(self.train_missing_rate)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, r) in [("train_missing_rate", self.train_missing_rate), ("dev_missing_rate", self.dev_rate())] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
            }
        }
        if self.plateau_patience == 0 || self.plateau_patience >= self.stop_patience {
            return Err(Error::Config(format!(
                "need 0 < plateau_patience ({}) < stop_patience ({})",
                self.plateau_patience, self.stop_patience
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.block_len == 0 {
            return Err(Error::Config("batch_size, max_epochs and block_len must be positive".into()));
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr_init)));
        }
        if !(self.improvement >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("improvement and grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// optimiser

/// Adam with bias correction. Moments are created lazily on the first step.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<S: Scalar> Adam<S> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[S]> {
        self.m.get(id.0).map(|v| v.as_slice())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[S]> {
        self.v.get(id.0).map(|v| v.as_slice())
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) -> Result<()> {
        for id in store.ids() {
            if store.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in parameter {}", store.name(id))));
            }
        }
        if self.m.len() != store.len() {
            self.m = store.ids().map(|id| vec![S::zero(); store.value(id).numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::from_f64_lossy(self.beta1), S::from_f64_lossy(self.beta2));
        let (nb1, nb2) = (S::one() - b1, S::one() - b2);
        for id in store.ids() {
            let g = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.value_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + nb1 * g[i];
                v[i] = b2 * v[i] + nb2 * g[i] * g[i];
                let mh = m[i].to_f64_lossy() / c1;
                let vh = v[i].to_f64_lossy() / c2;
                let upd = lr * mh / (vh.sqrt() + self.eps);
                w[i] = w[i] - S::from_f64_lossy(upd);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// schedule

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochOutcome {
    Improved,
    NoImprovement,
    Halved,
    Stop,
}

/// Plateau halving and early stopping on a sequence of dev losses.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub lr: f64,
    pub best: f64,
    pub best_epoch: usize,
    since_best: usize,
    since_change: usize,
    plateau: usize,
    stop: usize,
    threshold: f64,
}

impl Schedule {
    pub fn new(lr: f64, plateau: usize, stop: usize, threshold: f64) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            since_change: 0,
            plateau,
            stop,
            threshold,
        }
    }

    /// Records the dev loss of epoch `epoch` (1-based). The learning rate for
    /// the next epoch is `self.lr` afterwards.
    pub fn observe(&mut self, epoch: usize, dev_loss: f64) -> EpochOutcome {
        if dev_loss < self.best - self.threshold || (self.best.is_infinite() && dev_loss.is_finite()) {
            self.best = dev_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.since_change = 0;
            return EpochOutcome::Improved;
        }
        self.since_best += 1;
        self.since_change += 1;
        if self.since_best >= self.stop {
            return EpochOutcome::Stop;
        }
        if self.since_change >= self.plateau {
            self.since_change = 0;
            self.lr *= 0.5;
            return EpochOutcome::Halved;
        }
        EpochOutcome::NoImprovement
    }
}

// ---------------------------------------------------------------------------
// log

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,lr,seconds";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:e},{:.3}",
            self.epoch, self.train_loss, self.val_loss, self.lr, self.seconds
        )
    }
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.records {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    /// Parses [`TrainLog::to_csv`] output.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Format("train log header mismatch".into()));
        }
        let records = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let num = |i: usize| -> Result<f64> {
                    f.get(i)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Format(format!("bad train log line {l:?}")))
                };
                Ok(EpochRecord {
                    epoch: num(0)? as usize,
                    train_loss: num(1)?,
                    val_loss: num(2)?,
                    lr: num(3)?,
                    seconds: num(4)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    /// The log without wall-clock times, for determinism comparisons.
    pub fn without_times(&self) -> Self {
        Self {
            records: self.records.iter().map(|r| EpochRecord { seconds: 0.0, ..*r }).collect(),
        }
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
    }

    /// Checks the learning-rate trajectory post hoc: it never rises, and it
    /// halves exactly when `plateau` consecutive epochs (since the last
    /// improvement or halving) failed to improve by more than `threshold`.
    pub fn follows_plateau_rule(&self, lr_init: f64, plateau: usize, threshold: f64) -> bool {
        let mut sched = Schedule::new(lr_init, plateau, usize::MAX, threshold);
        self.records.iter().all(|r| {
            let ok = r.lr == sched.lr;
            sched.observe(r.epoch, r.val_loss);
            ok
        })
    }
}

// ---------------------------------------------------------------------------
// per-scene work

fn mask_for(scene: &Scene, rate: f64, block_len: usize, seed: u64) -> Result<MissingMask> {
    let tv = scene.video_frames();
    if rate == 0.0 {
        Ok(MissingMask::all_present(tv))
    } else {
        scenes::missing_mask(tv, rate, block_len, seed)
    }
}

struct Prepared<S> {
    input: ModelInput<S>,
    reference: Vec<S>,
}

fn prepare<S: Scalar>(model: &Separator, scene: &Scene, mask: &MissingMask) -> Result<Prepared<S>> {
    let masked = scenes::apply_missing(scene, mask)?;
    let input = ModelInput::<S>::from_scene(&masked, mask, model.config.stft())?;
    let k = if input.mixture_rms > 0.0 { 1.0 / input.mixture_rms } else { 1.0 };
    let reference = scene.target.iter().map(|&v| S::from_f64_lossy(v as f64 * k)).collect();
    Ok(Prepared { input, reference })
}

/// Loss of one scene; with `grads` also the parameter gradients.
fn scene_loss<S: Scalar>(
    model: &Separator,
    store: &ParamStore<S>,
    p: &Prepared<S>,
    grads: bool,
) -> Result<(f64, Vec<(ParamId, Vec<S>)>)> {
    let mut g = Graph::new();
    let est = model.forward_graph(&mut g, store, &p.input)?;
    let loss = g.sisdr_se_mc_loss(est, &p.reference, &p.input.mixture)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    if !grads {
        return Ok((value, Vec::new()));
    }
    let gr = g.backward(loss)?;
    Ok((value, g.param_grads(&gr)))
}

/// Mean loss over `scenes` with masks drawn at `rate`; mask seeds depend only
/// on `seed` and the scene id.
pub fn mean_loss<S: Scalar>(
    model: &Separator,
    store: &ParamStore<S>,
    scenes: &[Scene],
    rate: f64,
    block_len: usize,
    seed: u64,
) -> Result<f64> {
    let losses = scenes
        .par_iter()
        .map(|s| {
            let mask = mask_for(s, rate, block_len, derive_seed(seed, s.id as u64))?;
            let p = prepare::<S>(model, s, &mask)?;
            Ok(scene_loss(model, store, &p, false)?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// training

pub struct TrainOutcome<S> {
    pub model: Separator,
    /// Parameters of the best dev epoch.
    pub store: ParamStore<S>,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub best_epoch: usize,
    /// True when early stopping ended the run before `max_epochs`.
    pub stopped_early: bool,
}

/// Epochs a loss may spend above the divergence threshold before aborting.
pub const DIVERGENCE_EPOCHS: usize = 3;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Trains a fresh model. When `log_path` is given every epoch is appended to
/// it as a CSV line as soon as it finishes.
pub fn train<S: Scalar>(
    config: &TrainConfig,
    train_scenes: &[Scene],
    dev_scenes: &[Scene],
    log_path: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if train_scenes.is_empty() || dev_scenes.is_empty() {
        return Err(Error::Input("train and dev splits must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::<S>::new();
    let model = Separator::new(&config.model, &mut store, &mut rng)?;
    let mut adam = Adam::<S>::default();
    let mut sched = Schedule::new(config.lr_init, config.plateau_patience, config.stop_patience, config.improvement);
    let mut best_store = store.clone();
    let mut log = TrainLog::default();
    let mut log_file = match log_path {
        Some(p) => {
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((p, f))
        }
        None => None,
    };
    let dev_seed = derive_seed(config.seed, SALT_DEV_MASK);
    let mut initial_loss: Option<f64> = None;
    let mut diverged_epochs = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_scenes.len()).collect();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr = sched.lr;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SALT_SHUFFLE ^ epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mask_seed = derive_seed(derive_seed(config.seed, SALT_TRAIN_MASK), epoch as u64);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_scenes[i];
                    let mask = mask_for(s, config.train_missing_rate, config.block_len, derive_seed(mask_seed, s.id as u64))?;
                    let p = prepare::<S>(&model, s, &mask)?;
                    scene_loss(&model, &store, &p, true)
                })
                .collect::<Result<Vec<_>>>()?;
            store.zero_grad();
            let inv = S::from_f64_lossy(1.0 / batch.len() as f64);
            for (loss, grads) in &results {
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("non-finite training loss in epoch {epoch}")));
                }
                epoch_loss += loss;
                for (id, g) in grads {
                    let scaled: Vec<S> = g.iter().map(|v| *v * inv).collect();
                    store.accumulate_grad(*id, &scaled);
                }
            }
            clip_gradients(&mut store, config.grad_clip);
            adam.step(&mut store, lr)?;
        }
        let train_loss = epoch_loss / train_scenes.len() as f64;
        let val_loss = mean_loss(&model, &store, dev_scenes, config.dev_rate(), config.block_len, dev_seed)?;
        let record = EpochRecord { epoch, train_loss, val_loss, lr, seconds: started.elapsed().as_secs_f64() };
        log::info!("epoch {epoch}: train {train_loss:.4} dev {val_loss:.4} lr {lr:e}");
        if let Some((p, f)) = log_file.as_mut() {
            writeln!(f, "{}", record.csv_line()).map_err(|e| Error::io(*p, e))?;
        }
        log.records.push(record);

        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite dev loss in epoch {epoch}")));
        }
        let reference = *initial_loss.get_or_insert(train_loss);
        if train_loss > DIVERGENCE_FACTOR * reference.abs().max(1.0) {
            diverged_epochs += 1;
            if diverged_epochs >= DIVERGENCE_EPOCHS {
                return Err(Error::Diverged(format!(
                    "training loss above {DIVERGENCE_FACTOR}x its initial value for {DIVERGENCE_EPOCHS} epochs (epoch {epoch}: {train_loss:.4})"
                )));
            }
        } else {
            diverged_epochs = 0;
        }

        match sched.observe(epoch, val_loss) {
            EpochOutcome::Improved => best_store = store.clone(),
            EpochOutcome::Stop => {
                stopped_early = true;
                break;
            }
            EpochOutcome::Halved | EpochOutcome::NoImprovement => {}
        }
    }
    let checkpoint = Checkpoint::from_store(&best_store, config.seed);
    Ok(TrainOutcome {
        model,
        store: best_store,
        checkpoint,
        log,
        best_epoch: sched.best_epoch,
        stopped_early,
    })
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = store.grad_l2_norm();
    if max_norm > 0.0 && norm > max_norm {
        let k = S::from_f64_lossy(max_norm / norm);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            store.grad_mut(id).iter_mut().for_each(|g| *g = *g * k);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub si_snr: f64,
    pub stoi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub train_missing: Option<f64>,
    pub test_missing: f64,
    pub n_scenes: usize,
    pub seed: u64,
    /// First row is always the unprocessed mixture.
    pub rows: Vec<ReportRow>,
}

pub const MIX_LABEL: &str = "Mix";

fn mean_metrics(ms: &[MetricResult]) -> (f64, f64) {
    let n = ms.len().max(1) as f64;
    (ms.iter().map(|m| m.si_snr).sum::<f64>() / n, ms.iter().map(|m| m.stoi).sum::<f64>() / n)
}

/// Metrics of the raw mixtures, no model involved.
pub fn mixture_row(scenes: &[Scene]) -> Result<ReportRow> {
    let ms = scenes
        .par_iter()
        .map(|s| objective::evaluate_scene(&s.mixture, s))
        .collect::<Result<Vec<_>>>()?;
    let (si_snr, stoi) = mean_metrics(&ms);
    Ok(ReportRow { name: MIX_LABEL.into(), si_snr, stoi })
}

/// Per-scene metrics of a model at `test_missing_rate`. The mask of a scene
/// depends only on `seed` and its id.
pub fn evaluate_model<S: Scalar>(
    model: &Separator,
    store: &ParamStore<S>,
    scenes: &[Scene],
    test_missing_rate: f64,
    block_len: usize,
    seed: u64,
) -> Result<Vec<MetricResult>> {
    if !(0.0..=1.0).contains(&test_missing_rate) {
        return Err(Error::Config(format!("test missing rate {test_missing_rate} outside [0, 1]")));
    }
    scenes
        .par_iter()
        .map(|s| {
            let mask = mask_for(s, test_missing_rate, block_len, derive_seed(seed, s.id as u64))?;
            let est = crate::separator::forward(model, store, s, &mask)?;
            objective::evaluate_scene(&est, s)
        })
        .collect()
}

/// Report with the mixture row followed by one row for the model.
pub fn evaluate<S: Scalar>(
    model: &Separator,
    store: &ParamStore<S>,
    scenes: &[Scene],
    test_missing_rate: f64,
    seed: u64,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Input("no test scenes".into()));
    }
    let ms = evaluate_model(model, store, scenes, test_missing_rate, scenes::DEFAULT_BLOCK_LEN, seed)?;
    let (si_snr, stoi) = mean_metrics(&ms);
    Ok(EvalReport {
        train_missing: None,
        test_missing: test_missing_rate,
        n_scenes: scenes.len(),
        seed,
        rows: vec![
            mixture_row(scenes)?,
            ReportRow { name: cue_label(&model.config.ordered_cues()), si_snr, stoi },
        ],
    })
}

/// Row label for a cue set, e.g. `Lip-Expr-Face-Aux`.
pub fn cue_label(cues: &[CueKind]) -> String {
    let mut ordered: Vec<CueKind> = CueKind::ALL.into_iter().filter(|k| cues.contains(k)).collect();
    ordered.dedup();
    ordered
        .iter()
        .map(|k| {
            let l = k.label();
            let mut c = l.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect::<String>(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join("-")
}

/// Rebuilds a model from its config and loads checkpoint values into it.
pub fn load_model<S: Scalar>(config: &ModelConfig, checkpoint: &Checkpoint) -> Result<(Separator, ParamStore<S>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(checkpoint.seed);
    let model = Separator::new(config, &mut store, &mut rng)?;
    checkpoint.apply_to(&mut store)?;
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{make_scene, SceneConfig};
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(x)).unwrap();
        (s, id)
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let (mut s, id) = scalar_store(3.0);
        let mut adam = Adam::default();
        for _ in 0..5 {
            adam.step(&mut s, 0.1).unwrap();
        }
        assert_eq!(s.value(id).data()[0], 3.0);
        assert_eq!(adam.first_moment(id).unwrap(), &[0.0]);
        assert_eq!(adam.second_moment(id).unwrap(), &[0.0]);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let (mut s, id) = scalar_store(2.0);
        s.grad_mut(id)[0] = 1.0;
        Adam::default().step(&mut s, 0.1).unwrap();
        assert!((s.value(id).data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_square() {
        let (mut s, id) = scalar_store(5.0);
        let mut adam = Adam::default();
        for _ in 0..100 {
            s.zero_grad();
            let x = s.value(id).data()[0];
            s.grad_mut(id)[0] = 2.0 * x;
            adam.step(&mut s, 0.1).unwrap();
        }
        assert!(s.value(id).data()[0].abs() < 0.5, "{}", s.value(id).data()[0]);
    }

    #[test]
    fn adam_rejects_nan_with_name() {
        let (mut s, id) = scalar_store(1.0);
        s.grad_mut(id)[0] = f64::NAN;
        let err = Adam::default().step(&mut s, 0.1).unwrap_err().to_string();
        assert!(err.contains('x'), "{err}");
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn schedule_halves_after_plateau_and_stops() {
        let mut sch = Schedule::new(1.0, 3, 10, 1e-4);
        assert_eq!(sch.observe(1, 5.0), EpochOutcome::Improved);
        assert_eq!(sch.observe(2, 4.0), EpochOutcome::Improved);
        // within the threshold: not an improvement
        assert_eq!(sch.observe(3, 4.0 - 5e-5), EpochOutcome::NoImprovement);
        assert_eq!(sch.observe(4, 4.5), EpochOutcome::NoImprovement);
        assert_eq!(sch.observe(5, 4.5), EpochOutcome::Halved);
        assert_eq!(sch.lr, 0.5);
        for e in 6..=10 {
            sch.observe(e, 4.5);
        }
        assert_eq!(sch.lr, 0.25);
        assert_eq!(sch.observe(11, 4.5), EpochOutcome::Halved);
        assert_eq!(sch.observe(12, 4.5), EpochOutcome::Stop);
        assert_eq!(sch.best_epoch, 2);
    }

    #[test]
    fn plateau_check_detects_violations() {
        let rec = |epoch, val_loss, lr| EpochRecord { epoch, train_loss: 0.0, val_loss, lr, seconds: 0.0 };
        let good = TrainLog {
            records: vec![rec(1, 3.0, 1.0), rec(2, 3.0, 1.0), rec(3, 3.0, 1.0), rec(4, 3.0, 1.0), rec(5, 2.0, 0.5)],
        };
        assert!(good.follows_plateau_rule(1.0, 3, 1e-4));
        let early = TrainLog { records: vec![rec(1, 3.0, 1.0), rec(2, 3.0, 0.5)] };
        assert!(!early.follows_plateau_rule(1.0, 3, 1e-4));
        let csv = good.to_csv();
        assert_eq!(TrainLog::from_csv(&csv).unwrap(), good);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::desk(&[CueKind::Lip]);
        assert!(c.validate().is_ok());
        c.train_missing_rate = 1.5;
        assert!(c.validate().is_err());
        let c = TrainConfig { plateau_patience: 10, ..TrainConfig::desk(&[CueKind::Lip]) };
        assert!(c.validate().is_err());
        assert!(TrainConfig::desk(&[CueKind::Face]).validate().is_err());
        let text = toml::to_string(&TrainConfig::full(&CueKind::ALL)).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, TrainConfig::full(&CueKind::ALL));
    }

    #[test]
    fn zero_rate_never_masks() {
        let sc = SceneConfig { n_train: 1, n_dev: 1, n_test: 1, ..SceneConfig::default() };
        let s = make_scene(&sc, 0).unwrap();
        for seed in 0..20 {
            assert!(mask_for(&s, 0.0, 10, seed).unwrap().frames.iter().all(|&v| v == 1));
        }
    }

    #[test]
    fn labels() {
        assert_eq!(cue_label(&[CueKind::Lip]), "Lip");
        assert_eq!(cue_label(&[CueKind::Voice, CueKind::Lip, CueKind::Expression]), "Lip-Expr-Aux");
        assert_eq!(cue_label(&CueKind::ALL), "Lip-Expr-Face-Aux");
    }

    fn tiny_train_config() -> TrainConfig {
        let mut c = TrainConfig::desk(&[CueKind::Lip]);
        c.model.fusion_channels = 4;
        c.model.lstm_hidden = 3;
        c.model.lstm_feature = 4;
        c.model.attn_dim = 2;
        c.model.cues.lip = 4;
        c.model.cues.frontend_channels = 2;
        c.batch_size = 2;
        c.max_epochs = 2;
        c.seed = 5;
        c
    }

    fn tiny_scenes() -> (Vec<Scene>, Vec<Scene>) {
        let sc = SceneConfig { n_train: 3, n_dev: 2, n_test: 1, ..SceneConfig::default() };
        let all: Vec<Scene> = (0..5).map(|i| make_scene(&sc, i).unwrap()).collect();
        (all[..3].to_vec(), all[3..].to_vec())
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let (tr, dev) = tiny_scenes();
        let c = TrainConfig { train_missing_rate: 0.5, ..tiny_train_config() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let a = train::<f32>(&c, &tr, &dev, Some(&path)).unwrap();
        let b = train::<f32>(&c, &tr, &dev, None).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.log.without_times(), b.log.without_times());
        assert_eq!(a.log.records.len(), 2);
        let on_disk = TrainLog::from_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(on_disk.records.len(), 2);
        assert!(a.log.follows_plateau_rule(c.lr_init, c.plateau_patience, c.improvement));
    }

    #[test]
    fn early_stop_keeps_best_checkpoint() {
        let (tr, dev) = tiny_scenes();
        // a learning rate this large wrecks the model after the first epoch
        let c = TrainConfig {
            lr_init: 0.5,
            plateau_patience: 1,
            stop_patience: 2,
            max_epochs: 30,
            ..tiny_train_config()
        };
        let out = train::<f64>(&c, &tr, &dev, None).unwrap();
        let last = out.log.records.last().unwrap().epoch;
        assert!(out.stopped_early && out.best_epoch < last, "best {} last {last}", out.best_epoch);
        assert_eq!(last - out.best_epoch, c.stop_patience);
        let best = out.log.best().unwrap();
        let dev_again = mean_loss(&out.model, &out.store, &dev, 0.0, 10, derive_seed(c.seed, SALT_DEV_MASK)).unwrap();
        assert!((dev_again - best.val_loss).abs() < 1e-9, "{dev_again} vs {}", best.val_loss);
    }

    #[test]
    fn evaluation_is_deterministic_and_has_mix_row() {
        let (tr, dev) = tiny_scenes();
        let c = tiny_train_config();
        let out = train::<f32>(&c, &tr, &dev, None).unwrap();
        let r1 = evaluate(&out.model, &out.store, &dev, 0.4, 3).unwrap();
        let r2 = evaluate(&out.model, &out.store, &dev, 0.4, 3).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.rows[0].name, MIX_LABEL);
        assert_eq!(r1.test_missing, 0.4);
        let bytes = out.checkpoint.to_bytes();
        let (m, s) = load_model::<f32>(&c.model, &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(evaluate(&m, &s, &dev, 0.4, 3).unwrap(), r1);
    }
}
