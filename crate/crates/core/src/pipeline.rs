//! Dataset splitting, the training loop with scheduled class weights and
//! validation checkpointing, sliding-window inference, and evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neural::{sgd_step, Tensor};
use crate::objective::{aggregate_mean, dice, confusion_counts, schedule_weights, weighted_ce_loss, MetricResult, Reduction, WeightSchedule};
use crate::phantom::Manifest;
use crate::preprocess::{augment, compute_norm_stats, extract_patch, normalize, resample_nearest, AugmentParams, NormStats, PatchSpec};
use crate::rng::stream;
use crate::unet::{CheckpointMeta, Model, ModelConfig};
use crate::volgrid::{read_svol_file, voxel_count, Class, LabelMask, ProbMask, Shape3, Spacing, Volume, NUM_CLASSES};

/// Stream tags keeping the random streams of different stages apart.
mod tag {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const VALIDATION: u64 = 4;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<usize> = self.train.iter().chain(&self.validation).chain(&self.test).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n
    }
}

/// Test fraction and fold count. The defaults give 32:8:10 on 50 cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub folds: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.2,
            folds: 5,
        }
    }
}

/// Seeded shuffle, then the last `round(n * test_fraction)` cases become the
/// test set for every fold. The rest is cut into `folds` contiguous blocks;
/// fold `k` validates on block `k` and trains on the others.
pub fn split_cases(case_ids: &[usize], seed: u64, fold: usize, spec: &SplitSpec) -> Result<DatasetSplit> {
    let n = case_ids.len();
    if spec.folds == 0 || fold >= spec.folds {
        return Err(Error::usage(format!("fold {fold} outside 0..{}", spec.folds)));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::usage(format!("test_fraction must lie in [0, 1), got {}", spec.test_fraction)));
    }
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_rest = n.saturating_sub(n_test);
    if n < 5 || n_rest < spec.folds {
        return Err(Error::usage(format!(
            "{n} cases are too few to split ({n_test} test, {} folds)",
            spec.folds
        )));
    }
    let mut ids = case_ids.to_vec();
    let mut sorted = ids.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::usage("case ids must be unique"));
    }
    ids.shuffle(&mut stream(seed, &[tag::SPLIT]));
    let test = ids[n_rest..].to_vec();
    let lo = fold * n_rest / spec.folds;
    let hi = (fold + 1) * n_rest / spec.folds;
    let validation = ids[lo..hi].to_vec();
    let train = ids[..lo].iter().chain(&ids[hi..n_rest]).copied().collect();
    Ok(DatasetSplit { train, validation, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Validation,
    Test,
}

/// Log of every case access, used to prove split isolation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataAudit {
    pub records: Vec<(Phase, usize)>,
}

impl DataAudit {
    pub fn record(&mut self, phase: Phase, id: usize) {
        self.records.push((phase, id));
    }

    pub fn ids(&self, phase: Phase) -> Vec<usize> {
        let mut v: Vec<usize> = self.records.iter().filter(|r| r.0 == phase).map(|r| r.1).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// True when every recorded access of each phase stays inside that phase's split.
    pub fn respects(&self, split: &DatasetSplit) -> bool {
        self.records.iter().all(|&(phase, id)| match phase {
            Phase::Train => split.train.contains(&id),
            Phase::Validation => split.validation.contains(&id),
            Phase::Test => split.test.contains(&id),
        })
    }
}

/// A case as stored on disk, at its native spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCase {
    pub id: usize,
    pub ct: Volume,
    pub label: Option<LabelMask>,
}

/// Reads every case listed in a phantom manifest under `dir`.
pub fn load_manifest_cases(dir: &Path, manifest: &Manifest) -> Result<Vec<RawCase>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let ct = read_svol_file(&dir.join(&e.ct_path))?.into_volume()?;
            let label = read_svol_file(&dir.join(&e.label_path))?.into_labels()?;
            Ok(RawCase {
                id: e.id,
                ct,
                label: Some(label),
            })
        })
        .collect()
}

/// A case resampled to 1 mm with its CT whitened.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase {
    pub id: usize,
    pub ct: Volume,
    pub label: LabelMask,
}

/// Resamples a case to 1 mm isotropic and whitens its CT with `stats`.
pub fn prepare_case(case: &RawCase, stats: &NormStats) -> Result<PreparedCase> {
    let label = case
        .label
        .as_ref()
        .ok_or_else(|| Error::usage(format!("case {} has no ground truth", case.id)))?;
    if label.shape() != case.ct.shape() {
        return Err(Error::usage(format!("case {}: CT and label shapes differ", case.id)));
    }
    let ct = resample_nearest(&case.ct, Spacing::ISOTROPIC_1MM)?;
    Ok(PreparedCase {
        id: case.id,
        ct: normalize(&ct, stats),
        label: resample_nearest(label, Spacing::ISOTROPIC_1MM)?,
    })
}

/// Training and validation cases plus the whitening stats of the training split.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: Vec<PreparedCase>,
    pub validation: Vec<PreparedCase>,
    pub norm: NormStats,
}

/// Whitening stats come from the resampled training CTs only.
pub fn prepare_training_data(cases: &[RawCase], split: &DatasetSplit) -> Result<TrainingData> {
    let find = |id: usize| {
        cases
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::usage(format!("case {id} missing from the dataset")))
    };
    let train_ct: Vec<Volume> = split
        .train
        .iter()
        .map(|&id| resample_nearest(&find(id)?.ct, Spacing::ISOTROPIC_1MM))
        .collect::<Result<_>>()?;
    let norm = compute_norm_stats(&train_ct.iter().collect::<Vec<_>>())?;
    let prep = |ids: &[usize]| ids.iter().map(|&id| prepare_case(find(id)?, &norm)).collect::<Result<Vec<_>>>();
    Ok(TrainingData {
        train: prep(&split.train)?,
        validation: prep(&split.validation)?,
        norm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f32,
    pub batch_size: usize,
    pub patch: Shape3,
    pub stride: Shape3,
    pub total_epochs: usize,
    pub iterations_per_epoch: usize,
    pub validation_interval: usize,
    pub validation_cases: usize,
    pub schedule: WeightSchedule,
    pub reduction: Reduction,
    pub augment: AugmentParams,
    /// Apply augmentation to validation cases as well.
    pub augment_validation: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::REFERENCE,
            lr: 5e-4,
            batch_size: 4,
            patch: [32, 64, 64],
            stride: [20, 40, 40],
            total_epochs: 100,
            iterations_per_epoch: 100,
            validation_interval: 100,
            validation_cases: 6,
            schedule: WeightSchedule::default(),
            reduction: Reduction::Sum,
            augment: AugmentParams::default(),
            augment_validation: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for the phantom data: a small network, half-size
    /// patches and the weight switch at 40% of `total_epochs`.
    pub fn toy(total_epochs: usize) -> Result<Self> {
        Ok(TrainConfig {
            model: ModelConfig::TOY,
            lr: TOY_LR,
            patch: [16, 32, 32],
            stride: [10, 20, 20],
            total_epochs,
            validation_cases: 3,
            schedule: WeightSchedule::scaled_to(total_epochs)?,
            ..TrainConfig::default()
        })
    }

    pub fn total_iterations(&self) -> usize {
        self.total_epochs * self.iterations_per_epoch
    }

    pub fn patch_spec(&self) -> Result<PatchSpec> {
        PatchSpec::new(self.patch, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.check_input_dims(self.patch)?;
        self.patch_spec()?;
        self.augment.validate()?;
        self.schedule.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::usage(format!("lr must be positive, got {}", self.lr)));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("total_epochs", self.total_epochs),
            ("iterations_per_epoch", self.iterations_per_epoch),
            ("validation_interval", self.validation_interval),
            ("validation_cases", self.validation_cases),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::usage(format!("{name} must be >= 1")));
            }
        }
        if self.schedule.total_epochs != self.total_epochs {
            return Err(Error::usage(format!(
                "schedule covers {} epochs but training runs {}",
                self.schedule.total_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate of the toy configuration, tuned for sum-reduced loss over
/// a 4 x 16 x 32 x 32 batch.
pub const TOY_LR: f32 = 3e-6;

/// One minibatch: `N x 1 x D x H x W` CT patches and the matching label codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub case_ids: Vec<usize>,
    pub origins: Vec<Shape3>,
    pub ct: Tensor,
    pub labels: Vec<u8>,
}

/// Draws `batch_size` (case, origin) pairs uniformly, crops aligned patches
/// and augments them.
pub fn sample_minibatch<R: Rng + ?Sized>(
    train: &[PreparedCase],
    patch: Shape3,
    batch_size: usize,
    aug: &AugmentParams,
    rng: &mut R,
    audit: &mut DataAudit,
) -> Result<Minibatch> {
    if train.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    let vol = voxel_count(patch);
    let mut batch = Minibatch {
        case_ids: Vec::with_capacity(batch_size),
        origins: Vec::with_capacity(batch_size),
        ct: Tensor::zeros(&[0]),
        labels: Vec::with_capacity(batch_size * vol),
    };
    let mut ct = Vec::with_capacity(batch_size * vol);
    for _ in 0..batch_size {
        let case = &train[rng.random_range(0..train.len())];
        audit.record(Phase::Train, case.id);
        let shape = case.ct.shape();
        let origin: Shape3 = std::array::from_fn(|a| rng.random_range(0..=shape[a].saturating_sub(patch[a])));
        let (x, y) = augment(
            &extract_patch(&case.ct, origin, patch)?,
            &extract_patch(&case.label, origin, patch)?,
            aug,
            rng,
        )?;
        ct.extend_from_slice(x.data());
        batch.labels.extend_from_slice(y.data());
        batch.case_ids.push(case.id);
        batch.origins.push(origin);
    }
    batch.ct = Tensor::new(vec![batch_size, 1, patch[0], patch[1], patch[2]], ct)?;
    Ok(batch)
}

/// Anything that maps a CT window to per-voxel class probabilities.
///
/// `origin` is the window position in the full volume; trained models ignore
/// it, test stubs use it to look up ground truth.
pub trait WindowPredictor: Sync {
    fn predict_window(&self, patch: &Volume, origin: Shape3) -> Result<ProbMask>;
}

impl WindowPredictor for Model {
    fn predict_window(&self, patch: &Volume, _origin: Shape3) -> Result<ProbMask> {
        self.predict_patch(patch)
    }
}

/// Emits the one-hot encoding of a known label mask; padding reads as background.
#[derive(Debug, Clone)]
pub struct OracleStub {
    pub label: LabelMask,
}

impl WindowPredictor for OracleStub {
    fn predict_window(&self, patch: &Volume, origin: Shape3) -> Result<ProbMask> {
        let window = extract_patch(&self.label, origin, patch.shape())?;
        let mut data = vec![0.0; window.data().len() * NUM_CLASSES];
        for (i, &c) in window.data().iter().enumerate() {
            data[i * NUM_CLASSES + c as usize] = 1.0;
        }
        ProbMask::new(patch.shape(), data)
    }
}

/// Emits the same class scores at every voxel.
#[derive(Debug, Clone, Copy)]
pub struct ConstantStub(pub [f32; NUM_CLASSES]);

impl WindowPredictor for ConstantStub {
    fn predict_window(&self, patch: &Volume, _origin: Shape3) -> Result<ProbMask> {
        ProbMask::new(patch.shape(), self.0.repeat(voxel_count(patch.shape())))
    }
}

/// Sums window predictions over the regular window grid of `spec`.
pub fn sliding_window_infer<P: WindowPredictor + ?Sized>(model: &P, volume: &Volume, spec: &PatchSpec) -> Result<ProbMask> {
    spec.validate()?;
    sliding_window_infer_at(model, volume, spec.patch, &spec.window_origins(volume.shape()))
}

/// Sums window predictions at the given origins, in the given order.
/// Windows reaching past the volume are zero padded for prediction and
/// cropped before accumulation.
pub fn sliding_window_infer_at<P: WindowPredictor + ?Sized>(
    model: &P,
    volume: &Volume,
    patch: Shape3,
    origins: &[Shape3],
) -> Result<ProbMask> {
    let shape = volume.shape();
    let preds: Vec<ProbMask> = origins
        .par_iter()
        .map(|&o| {
            let window = extract_patch(volume, o, patch)?;
            let p = model.predict_window(&window, o)?;
            if p.shape() != patch {
                return Err(Error::usage(format!(
                    "predictor returned shape {:?} for a {patch:?} window",
                    p.shape()
                )));
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    // f64 accumulation keeps the f32 result independent of window order
    let mut acc = vec![0.0f64; voxel_count(shape) * NUM_CLASSES];
    for (o, p) in origins.iter().zip(&preds) {
        let ext: Shape3 = std::array::from_fn(|a| patch[a].min(shape[a].saturating_sub(o[a])));
        for d in 0..ext[0] {
            for h in 0..ext[1] {
                for w in 0..ext[2] {
                    let src = (d * patch[1] + h) * patch[2] + w;
                    let dst = ((o[0] + d) * shape[1] + o[1] + h) * shape[2] + o[2] + w;
                    for (a, v) in acc[dst * NUM_CLASSES..(dst + 1) * NUM_CLASSES].iter_mut().zip(p.voxel(src)) {
                        *a += *v as f64;
                    }
                }
            }
        }
    }
    ProbMask::new(shape, acc.into_iter().map(|v| v as f32).collect())
}

/// Per-voxel argmax over channels; ties go to the lowest class code.
/// The mask is placed on the 1 mm grid.
pub fn combine(y: &ProbMask) -> LabelMask {
    let n = voxel_count(y.shape());
    let data = (0..n)
        .map(|i| {
            let v = y.voxel(i);
            let mut best = 0;
            for k in 1..NUM_CLASSES {
                if v[k] > v[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(y.shape(), Spacing::ISOTROPIC_1MM, data).expect("argmax codes are valid")
}

/// Full-volume segmentation of an already whitened 1 mm CT.
pub fn segment<P: WindowPredictor + ?Sized>(model: &P, ct: &Volume, spec: &PatchSpec) -> Result<LabelMask> {
    let mut mask = combine(&sliding_window_infer(model, ct, spec)?);
    mask.set_spacing(ct.spacing());
    Ok(mask)
}

/// Per-class Dice of one prepared case.
fn case_dice<P: WindowPredictor + ?Sized>(model: &P, case: &PreparedCase, spec: &PatchSpec) -> Result<[f64; 2]> {
    let pred = segment(model, &case.ct, spec)?;
    let counts = confusion_counts(&pred, &case.label)?;
    Ok([dice(&counts, Class::Bone), dice(&counts, Class::Nerve)])
}

/// Mean bone and nerve Dice over `cases`.
pub fn validation_dice<P: WindowPredictor + ?Sized>(model: &P, cases: &[&PreparedCase], spec: &PatchSpec) -> Result<[f64; 2]> {
    if cases.is_empty() {
        return Err(Error::usage("no validation cases"));
    }
    let mut sum = [0.0; 2];
    for case in cases {
        let d = case_dice(model, case, spec)?;
        sum[0] += d[0];
        sum[1] += d[1];
    }
    Ok(sum.map(|s| s / cases.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Mean validation Dice `(bone, nerve)` when a validation ran after this iteration.
    pub validation: Option<[f64; 2]>,
    pub checkpointed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationEvent {
    pub iteration: usize,
    pub epoch: usize,
    pub case_ids: Vec<usize>,
    pub dice: [f64; 2],
}

impl ValidationEvent {
    pub fn mean_dice(&self) -> f64 {
        (self.dice[0] + self.dice[1]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEvent {
    pub iteration: usize,
    pub best_dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub iterations: Vec<IterationRecord>,
    pub validations: Vec<ValidationEvent>,
    pub checkpoints: Vec<CheckpointEvent>,
}

pub const HISTORY_CSV_HEADER: &str = "iteration,epoch,loss,val_dice_bone,val_dice_nerve,checkpointed";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_CSV_HEADER);
        s.push('\n');
        for r in &self.iterations {
            let (b, n) = match r.validation {
                Some([b, n]) => (format!("{b:?}"), format!("{n:?}")),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(s, "{},{},{:?},{b},{n},{}", r.iteration, r.epoch, r.loss, u8::from(r.checkpointed));
        }
        s
    }

    /// Parses [`TrainHistory::to_csv`] output. Validation case ids are not
    /// stored in the CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<TrainHistory> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == HISTORY_CSV_HEADER => {}
            _ => return Err(Error::Format(format!("line 1: expected header `{HISTORY_CSV_HEADER}`"))),
        }
        let mut hist = TrainHistory::default();
        let mut best = f64::NEG_INFINITY;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("line {}: {what}", i + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let iteration: usize = f[0].parse().map_err(|_| bad("bad iteration"))?;
            let epoch: usize = f[1].parse().map_err(|_| bad("bad epoch"))?;
            let loss: f64 = f[2].parse().map_err(|_| bad("bad loss"))?;
            let validation = match (f[3], f[4]) {
                ("", "") => None,
                (b, n) => Some([
                    b.parse().map_err(|_| bad("bad val_dice_bone"))?,
                    n.parse().map_err(|_| bad("bad val_dice_nerve"))?,
                ]),
            };
            let checkpointed = match f[5] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("checkpointed must be 0 or 1")),
            };
            if let Some(d) = validation {
                let ev = ValidationEvent {
                    iteration,
                    epoch,
                    case_ids: Vec::new(),
                    dice: d,
                };
                if checkpointed {
                    best = ev.mean_dice();
                    hist.checkpoints.push(CheckpointEvent {
                        iteration,
                        best_dice: best,
                    });
                }
                hist.validations.push(ev);
            } else if checkpointed {
                return Err(bad("checkpoint flagged without a validation"));
            }
            hist.iterations.push(IterationRecord {
                iteration,
                epoch,
                loss,
                validation,
                checkpointed,
            });
        }
        if hist.iterations.is_empty() {
            return Err(Error::Format("history has no rows".into()));
        }
        let _ = best;
        Ok(hist)
    }

    /// Running maximum of mean validation Dice, one value per validation event.
    pub fn best_dice_envelope(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.validations
            .iter()
            .map(|v| {
                best = best.max(v.mean_dice());
                best
            })
            .collect()
    }
}

/// Hooks for progress reporting and checkpoint persistence.
pub trait TrainObserver {
    fn on_iteration(&mut self, _record: &IterationRecord) {}
    fn on_validation(&mut self, _event: &ValidationEvent) {}
    fn on_checkpoint(&mut self, _model: &Model, _meta: &CheckpointMeta) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation event, or the final ones if no validation ran.
    pub model: Model,
    pub best: Option<CheckpointMeta>,
    pub history: TrainHistory,
    pub audit: DataAudit,
}

pub fn train(data: &TrainingData, config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    config.validate()?;
    if data.validation.len() < config.validation_cases {
        return Err(Error::usage(format!(
            "validation_cases {} exceeds the {} validation cases available",
            config.validation_cases,
            data.validation.len()
        )));
    }
    let spec = config.patch_spec()?;
    let mut model = Model::build(config.model, &mut stream(config.seed, &[tag::INIT]))?;
    let mut best_model: Option<(Model, CheckpointMeta)> = None;
    let mut history = TrainHistory::default();
    let mut audit = DataAudit::default();

    for iteration in 1..=config.total_iterations() {
        let epoch = (iteration - 1) / config.iterations_per_epoch;
        let weights = schedule_weights(epoch, &config.schedule)?;
        let mut rng = stream(config.seed, &[tag::BATCH, iteration as u64]);
        let batch = sample_minibatch(&data.train, config.patch, config.batch_size, &config.augment, &mut rng, &mut audit)?;
        let (logits, cache) = model.forward_train(&batch.ct)?;
        let (loss, grad) = weighted_ce_loss(&logits, &batch.labels, &weights, config.reduction)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration,
                reason: format!("loss is {loss}"),
            });
        }
        model.backward(&cache, &grad)?;
        sgd_step(model.params_mut(), config.lr, iteration)?;

        let mut record = IterationRecord {
            iteration,
            epoch,
            loss,
            validation: None,
            checkpointed: false,
        };
        if iteration % config.validation_interval == 0 {
            let mut vrng = stream(config.seed, &[tag::VALIDATION, iteration as u64]);
            let chosen: Vec<&PreparedCase> =
                data.validation.choose_multiple(&mut vrng, config.validation_cases).collect();
            let augmented: Vec<PreparedCase>;
            let cases: Vec<&PreparedCase> = if config.augment_validation {
                augmented = chosen
                    .iter()
                    .map(|c| {
                        let (ct, label) = augment(&c.ct, &c.label, &config.augment, &mut vrng)?;
                        Ok(PreparedCase { id: c.id, ct, label })
                    })
                    .collect::<Result<_>>()?;
                augmented.iter().collect()
            } else {
                chosen
            };
            for c in &cases {
                audit.record(Phase::Validation, c.id);
            }
            let dice = validation_dice(&model, &cases, &spec)?;
            let event = ValidationEvent {
                iteration,
                epoch,
                case_ids: cases.iter().map(|c| c.id).collect(),
                dice,
            };
            observer.on_validation(&event);
            let mean = event.mean_dice();
            if best_model.as_ref().is_none_or(|(_, m)| mean > m.best_dice) {
                let meta = CheckpointMeta {
                    epoch: epoch as u64,
                    iteration: iteration as u64,
                    best_dice: mean,
                };
                observer.on_checkpoint(&model, &meta)?;
                history.checkpoints.push(CheckpointEvent {
                    iteration,
                    best_dice: mean,
                });
                best_model = Some((model.clone(), meta));
                record.checkpointed = true;
            }
            record.validation = Some(dice);
            history.validations.push(event);
        }
        observer.on_iteration(&record);
        history.iterations.push(record);
    }

    let (model, best) = match best_model {
        Some((m, meta)) => (m, Some(meta)),
        None => (model, None),
    };
    Ok(TrainOutcome {
        model,
        best,
        history,
        audit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseEvaluation {
    pub id: usize,
    pub metrics: MetricResult,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub cases: Vec<CaseEvaluation>,
    pub mean: MetricResult,
}

/// Segments every test case with training-split whitening and scores it
/// against its resampled ground truth.
pub fn evaluate<P: WindowPredictor + ?Sized>(
    model: &P,
    test: &[&RawCase],
    norm: &NormStats,
    spec: &PatchSpec,
    audit: &mut DataAudit,
) -> Result<EvaluationReport> {
    if test.is_empty() {
        return Err(Error::usage("test set is empty"));
    }
    let mut cases = Vec::with_capacity(test.len());
    for raw in test {
        audit.record(Phase::Test, raw.id);
        let case = prepare_case(raw, norm)?;
        let start = Instant::now();
        let pred = segment(model, &case.ct, spec)?;
        let seconds = start.elapsed().as_secs_f64();
        cases.push(CaseEvaluation {
            id: raw.id,
            metrics: MetricResult::compare(&pred, &case.label)?,
            seconds,
        });
    }
    let mean = aggregate_mean(&cases.iter().map(|c| c.metrics).collect::<Vec<_>>())?;
    Ok(EvaluationReport { cases, mean })
}

const NORM_SIDECAR_TAG: &str = "# norm-stats v1";

/// Text sidecar holding the whitening stats bit-exactly, with a checksum.
pub fn norm_sidecar_text(stats: &NormStats) -> String {
    let body = format!(
        "mean_bits={:016x}\nstd_bits={:016x}\nmean={}\nstd={}\n",
        stats.mean.to_bits(),
        stats.std.to_bits(),
        stats.mean,
        stats.std
    );
    let sum = hex::encode(Sha256::digest(body.as_bytes()));
    format!("{NORM_SIDECAR_TAG}\n{body}sha256={sum}\n")
}

pub fn parse_norm_sidecar(text: &str) -> Result<NormStats> {
    let rest = text
        .strip_prefix(NORM_SIDECAR_TAG)
        .and_then(|r| r.strip_prefix('\n'))
        .ok_or_else(|| Error::Format("norm sidecar header missing".into()))?;
    let (body, sum_line) = rest
        .rsplit_once("sha256=")
        .ok_or_else(|| Error::Format("norm sidecar checksum missing".into()))?;
    if hex::encode(Sha256::digest(body.as_bytes())) != sum_line.trim() {
        return Err(Error::Content("norm sidecar checksum mismatch".into()));
    }
    let field = |key: &str| -> Result<f64> {
        let line = body
            .lines()
            .find_map(|l| l.strip_prefix(key))
            .ok_or_else(|| Error::Format(format!("norm sidecar lacks {key}")))?;
        let bits = u64::from_str_radix(line, 16).map_err(|_| Error::Format(format!("bad {key} value")))?;
        Ok(f64::from_bits(bits))
    };
    let stats = NormStats {
        mean: field("mean_bits=")?,
        std: field("std_bits=")?,
    };
    if !(stats.mean.is_finite() && stats.std > 0.0 && stats.std.is_finite()) {
        return Err(Error::Content("norm sidecar holds invalid stats".into()));
    }
    Ok(stats)
}
