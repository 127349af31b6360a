//! Class-weighted softmax cross-entropy, its two-phase weight schedule, and
//! the per-class evaluation metrics.

use crate::error::{Error, Result};
use crate::neural::{Real, Tensor};
use crate::volgrid::{Class, LabelMask, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub w_background: f64,
    pub w_bone: f64,
    pub w_nerve: f64,
}

impl ClassWeights {
    pub fn new(w_background: f64, w_bone: f64, w_nerve: f64) -> Result<Self> {
        let w = ClassWeights {
            w_background,
            w_bone,
            w_nerve,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| *w > 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::usage(format!("class weights must be positive and finite, got {self:?}")))
        }
    }

    pub fn as_array(&self) -> [f64; NUM_CLASSES] {
        [self.w_background, self.w_bone, self.w_nerve]
    }

    pub fn scaled(&self, k: f64) -> ClassWeights {
        ClassWeights {
            w_background: self.w_background * k,
            w_bone: self.w_bone * k,
            w_nerve: self.w_nerve * k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSchedule {
    pub early: ClassWeights,
    pub late: ClassWeights,
    /// First epoch that uses `late`.
    pub switch_epoch: usize,
    pub total_epochs: usize,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        WeightSchedule {
            early: ClassWeights {
                w_background: 1.0,
                w_bone: 1.0,
                w_nerve: 20.0,
            },
            late: ClassWeights {
                w_background: 1.0,
                w_bone: 1.0,
                w_nerve: 2.0,
            },
            switch_epoch: 40,
            total_epochs: 100,
        }
    }
}

impl WeightSchedule {
    /// The default weights with the switch placed at the same fraction (40%)
    /// of a shorter or longer run.
    pub fn scaled_to(total_epochs: usize) -> Result<Self> {
        let d = WeightSchedule::default();
        let switch = ((total_epochs * d.switch_epoch) as f64 / d.total_epochs as f64).round() as usize;
        let s = WeightSchedule {
            switch_epoch: switch.clamp(1, total_epochs.saturating_sub(1).max(1)),
            total_epochs,
            ..d
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.early.validate()?;
        self.late.validate()?;
        if !(0 < self.switch_epoch && self.switch_epoch < self.total_epochs) {
            return Err(Error::usage(format!(
                "schedule needs 0 < switch_epoch ({}) < total_epochs ({})",
                self.switch_epoch, self.total_epochs
            )));
        }
        Ok(())
    }
}

pub fn schedule_weights(epoch: usize, s: &WeightSchedule) -> Result<ClassWeights> {
    if epoch >= s.total_epochs {
        return Err(Error::usage(format!(
            "epoch {epoch} outside schedule of {} epochs",
            s.total_epochs
        )));
    }
    Ok(if epoch < s.switch_epoch { s.early } else { s.late })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Weighted softmax cross-entropy over a batch of `N x 3 x D x H x W` logits.
///
/// `labels` holds the class codes in the same `N x D x H x W` order. Returns
/// the loss and its gradient with respect to the logits.
pub fn weighted_ce_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[u8],
    weights: &ClassWeights,
    reduction: Reduction,
) -> Result<(f64, Tensor<T>)> {
    let [n, c, d, h, w] = logits.dims5()?;
    if c != NUM_CLASSES {
        return Err(Error::usage(format!("loss expects {NUM_CLASSES} logit channels, got {c}")));
    }
    let vol = d * h * w;
    if labels.len() != n * vol {
        return Err(Error::usage(format!(
            "label count {} does not match logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Content(format!("invalid class code {bad} in loss labels")));
    }
    weights.validate()?;
    let wc = weights.as_array();
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / (n * vol).max(1) as f64,
    };
    let x = logits.data();
    let mut grad = vec![T::zero(); x.len()];
    let mut loss = 0.0f64;
    for ni in 0..n {
        let base = ni * c * vol;
        for v in 0..vol {
            let l = labels[ni * vol + v] as usize;
            let a = [0, 1, 2].map(|k| x[base + k * vol + v].to_f64().unwrap_or(f64::NAN));
            let m = a[0].max(a[1]).max(a[2]);
            let e = a.map(|ak| (ak - m).exp());
            let z: f64 = e.iter().sum();
            let wx = wc[l] * scale;
            // -log softmax_l = log-sum-exp - a_l
            loss += wx * (m + z.ln() - a[l]);
            for k in 0..c {
                let onehot = if k == l { 1.0 } else { 0.0 };
                grad[base + k * vol + v] = T::from_f64_lossy(wx * (e[k] / z - onehot));
            }
        }
    }
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// [`weighted_ce_loss`] with one label mask per batch element.
pub fn weighted_ce_loss_masks<T: Real>(
    logits: &Tensor<T>,
    gt: &[LabelMask],
    weights: &ClassWeights,
    reduction: Reduction,
) -> Result<(f64, Tensor<T>)> {
    let [n, _, d, h, w] = logits.dims5()?;
    if gt.len() != n || gt.iter().any(|m| m.shape() != [d, h, w]) {
        return Err(Error::usage("label masks do not match the logits batch"));
    }
    let labels: Vec<u8> = gt.iter().flat_map(|m| m.data().iter().copied()).collect();
    weighted_ce_loss(logits, &labels, weights, reduction)
}

/// Per-class true positive, false positive and false negative voxel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: [u64; NUM_CLASSES],
    pub fp: [u64; NUM_CLASSES],
    pub fn_: [u64; NUM_CLASSES],
    pub total: u64,
}

impl ConfusionCounts {
    /// Ground-truth voxels of class `c`.
    pub fn gt_count(&self, c: Class) -> u64 {
        self.tp[c.code() as usize] + self.fn_[c.code() as usize]
    }

    pub fn pred_count(&self, c: Class) -> u64 {
        self.tp[c.code() as usize] + self.fp[c.code() as usize]
    }
}

pub fn confusion_counts(pred: &LabelMask, gt: &LabelMask) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::usage(format!(
            "prediction shape {:?} differs from ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut joint = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        joint[p as usize][g as usize] += 1;
    }
    let mut out = ConfusionCounts {
        total: pred.data().len() as u64,
        ..Default::default()
    };
    for c in 0..NUM_CLASSES {
        out.tp[c] = joint[c][c];
        out.fp[c] = (0..NUM_CLASSES).filter(|&g| g != c).map(|g| joint[c][g]).sum();
        out.fn_[c] = (0..NUM_CLASSES).filter(|&p| p != c).map(|p| joint[p][c]).sum();
    }
    Ok(out)
}

/// Class recall. With no ground-truth voxels of `c` the score is 1 if
/// nothing was predicted as `c` and 0 otherwise.
pub fn pixel_accuracy(counts: &ConfusionCounts, c: Class) -> f64 {
    let i = c.code() as usize;
    let (tp, fp, fn_) = (counts.tp[i], counts.fp[i], counts.fn_[i]);
    if tp + fn_ == 0 {
        return if fp == 0 { 1.0 } else { 0.0 };
    }
    tp as f64 / (tp + fn_) as f64
}

pub fn iou(counts: &ConfusionCounts, c: Class) -> f64 {
    let i = c.code() as usize;
    let den = counts.tp[i] + counts.fp[i] + counts.fn_[i];
    if den == 0 {
        return 1.0;
    }
    counts.tp[i] as f64 / den as f64
}

pub fn dice(counts: &ConfusionCounts, c: Class) -> f64 {
    let i = c.code() as usize;
    let den = 2 * counts.tp[i] + counts.fp[i] + counts.fn_[i];
    if den == 0 {
        return 1.0;
    }
    (2 * counts.tp[i]) as f64 / den as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub pixel_accuracy: f64,
    pub iou: f64,
    pub dice: f64,
}

impl ClassMetrics {
    pub fn from_counts(counts: &ConfusionCounts, c: Class) -> Self {
        ClassMetrics {
            pixel_accuracy: pixel_accuracy(counts, c),
            iou: iou(counts, c),
            dice: dice(counts, c),
        }
    }
}

/// Bone and nerve metrics for one case, or their mean over cases.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricResult {
    pub bone: ClassMetrics,
    pub nerve: ClassMetrics,
    /// Counts backing the metrics; absent for aggregates and tabulated values.
    pub counts: Option<ConfusionCounts>,
}

impl MetricResult {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        MetricResult {
            bone: ClassMetrics::from_counts(&counts, Class::Bone),
            nerve: ClassMetrics::from_counts(&counts, Class::Nerve),
            counts: Some(counts),
        }
    }

    pub fn compare(pred: &LabelMask, gt: &LabelMask) -> Result<Self> {
        Ok(Self::from_counts(confusion_counts(pred, gt)?))
    }

    pub fn class(&self, c: Class) -> Option<&ClassMetrics> {
        match c {
            Class::Bone => Some(&self.bone),
            Class::Nerve => Some(&self.nerve),
            Class::Background => None,
        }
    }

    /// Dice averaged over the two foreground classes.
    pub fn mean_dice(&self) -> f64 {
        (self.bone.dice + self.nerve.dice) / 2.0
    }
}

/// Unweighted arithmetic mean of each metric over cases.
pub fn aggregate_mean(per_case: &[MetricResult]) -> Result<MetricResult> {
    if per_case.is_empty() {
        return Err(Error::usage("cannot average an empty list of metric results"));
    }
    let n = per_case.len() as f64;
    let mean = |f: &dyn Fn(&MetricResult) -> f64| per_case.iter().map(f).sum::<f64>() / n;
    let class_mean = |pick: fn(&MetricResult) -> &ClassMetrics| ClassMetrics {
        pixel_accuracy: mean(&|m| pick(m).pixel_accuracy),
        iou: mean(&|m| pick(m).iou),
        dice: mean(&|m| pick(m).dice),
    };
    Ok(MetricResult {
        bone: class_mean(|m| &m.bone),
        nerve: class_mean(|m| &m.nerve),
        counts: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Spacing;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn w(a: f64, b: f64, c: f64) -> ClassWeights {
        ClassWeights::new(a, b, c).unwrap()
    }

    fn single(logits: [f64; 3], label: u8, weights: ClassWeights) -> f64 {
        let t = Tensor::new(vec![1, 3, 1, 1, 1], logits.to_vec()).unwrap();
        weighted_ce_loss(&t, &[label], &weights, Reduction::Sum).unwrap().0
    }

    /// Direct evaluation of L = -sum_x w(x) log(exp(a_l(x)) / sum_k exp(a_k(x))).
    fn direct_loss(a: &[[f64; 3]], labels: &[u8], weights: &ClassWeights) -> f64 {
        let wc = weights.as_array();
        a.iter()
            .zip(labels)
            .map(|(ak, &l)| {
                let p = ak[l as usize].exp() / ak.iter().map(|v| v.exp()).sum::<f64>();
                -wc[l as usize] * p.ln()
            })
            .sum()
    }

    #[test]
    fn uniform_logits_nerve() {
        let l = single([0.0, 0.0, 0.0], 2, w(1.0, 1.0, 20.0));
        assert!((l - 20.0 * 3f64.ln()).abs() < 1e-12);
        assert!((l - 21.9722).abs() < 1e-4);
    }

    #[test]
    fn confident_prediction_has_tiny_loss() {
        assert!(single([30.0, 0.0, 0.0], 0, w(1.0, 1.0, 1.0)) < 1e-9);
    }

    #[test]
    fn two_voxel_example() {
        let t = Tensor::new(vec![1, 3, 1, 1, 2], vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]).unwrap();
        let (l, _) = weighted_ce_loss(&t, &[1, 0], &w(1.0, 1.0, 20.0), Reduction::Sum).unwrap();
        assert!((l - 2.50622).abs() < 1e-4, "{l}");
    }

    #[test]
    fn mean_reduction_divides_by_voxels() {
        let t = Tensor::<f64>::new(vec![1, 3, 1, 1, 2], vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]).unwrap();
        let (s, gs) = weighted_ce_loss(&t, &[1, 0], &w(1.0, 1.0, 20.0), Reduction::Sum).unwrap();
        let (m, gm) = weighted_ce_loss(&t, &[1, 0], &w(1.0, 1.0, 20.0), Reduction::Mean).unwrap();
        assert!((m - s / 2.0).abs() < 1e-12);
        for (a, b) in gs.data().iter().zip(gm.data()) {
            assert!((a / 2.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_label_is_content_error() {
        let t = Tensor::<f64>::zeros(&[1, 3, 1, 1, 1]);
        assert!(matches!(
            weighted_ce_loss(&t, &[3], &w(1.0, 1.0, 1.0), Reduction::Sum),
            Err(Error::Content(_))
        ));
    }

    #[test]
    fn loss_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..3);
            let dims = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
            let vol: usize = dims.iter().product();
            let weights = w(rng.random_range(0.1..5.0), rng.random_range(0.1..5.0), rng.random_range(0.1..30.0));
            let data: Vec<f64> = (0..n * 3 * vol).map(|_| rng.random_range(-8.0..8.0)).collect();
            let labels: Vec<u8> = (0..n * vol).map(|_| rng.random_range(0..3)).collect();
            let t = Tensor::new(vec![n, 3, dims[0], dims[1], dims[2]], data.clone()).unwrap();
            let (l, _) = weighted_ce_loss(&t, &labels, &weights, Reduction::Sum).unwrap();
            let per_voxel: Vec<[f64; 3]> = (0..n * vol)
                .map(|i| {
                    let (ni, v) = (i / vol, i % vol);
                    [0, 1, 2].map(|k| data[ni * 3 * vol + k * vol + v])
                })
                .collect();
            let expect = direct_loss(&per_voxel, &labels, &weights);
            assert!((l - expect).abs() <= 1e-6 * expect.abs().max(1e-12), "{l} vs {expect}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let vol = rng.random_range(1..6);
            let weights = w(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(1.0..20.0));
            let data: Vec<f64> = (0..3 * vol).map(|_| rng.random_range(-4.0..4.0)).collect();
            let labels: Vec<u8> = (0..vol).map(|_| rng.random_range(0..3)).collect();
            let t = Tensor::new(vec![1, 3, 1, 1, vol], data.clone()).unwrap();
            let (_, g) = weighted_ce_loss(&t, &labels, &weights, Reduction::Sum).unwrap();
            let eps = 1e-6;
            for i in 0..data.len() {
                let mut p = data.clone();
                p[i] += eps;
                let mut m = data.clone();
                m[i] -= eps;
                let f = |d: Vec<f64>| {
                    let t = Tensor::new(vec![1, 3, 1, 1, vol], d).unwrap();
                    weighted_ce_loss(&t, &labels, &weights, Reduction::Sum).unwrap().0
                };
                let num = (f(p) - f(m)) / (2.0 * eps);
                let a = g.data()[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-2);
                assert!(rel < 1e-4, "{a} vs {num}");
            }
        }
    }

    proptest! {
        #[test]
        fn shift_invariance(a in prop::array::uniform3(-10.0f64..10.0), shift in -50.0f64..50.0, l in 0u8..3) {
            let weights = w(1.0, 1.0, 20.0);
            let base = single(a, l, weights);
            let shifted = single(a.map(|v| v + shift), l, weights);
            prop_assert!((base - shifted).abs() <= 1e-6 * base.abs().max(1e-6));
        }

        #[test]
        fn weight_scaling_is_linear(a in prop::array::uniform3(-10.0f64..10.0), k in 0.01f64..100.0, l in 0u8..3) {
            let weights = w(1.0, 2.0, 20.0);
            let t = Tensor::new(vec![1, 3, 1, 1, 1], a.to_vec()).unwrap();
            let (l1, g1) = weighted_ce_loss(&t, &[l], &weights, Reduction::Sum).unwrap();
            let (lk, gk) = weighted_ce_loss(&t, &[l], &weights.scaled(k), Reduction::Sum).unwrap();
            prop_assert!((lk - k * l1).abs() <= 1e-12 * lk.abs().max(1.0));
            for (x, y) in g1.data().iter().zip(gk.data()) {
                prop_assert!((y - k * x).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn schedule_switches_once() {
        let s = WeightSchedule::default();
        let early = w(1.0, 1.0, 20.0);
        let late = w(1.0, 1.0, 2.0);
        assert_eq!(schedule_weights(0, &s).unwrap(), early);
        assert_eq!(schedule_weights(39, &s).unwrap(), early);
        assert_eq!(schedule_weights(40, &s).unwrap(), late);
        assert_eq!(schedule_weights(99, &s).unwrap(), late);
        assert!(matches!(schedule_weights(100, &s), Err(Error::Usage(_))));
        let switches = (1..100)
            .filter(|&e| schedule_weights(e, &s).unwrap() != schedule_weights(e - 1, &s).unwrap())
            .count();
        assert_eq!(switches, 1);
    }

    #[test]
    fn scaled_schedule() {
        assert_eq!(WeightSchedule::scaled_to(100).unwrap(), WeightSchedule::default());
        assert_eq!(WeightSchedule::scaled_to(10).unwrap().switch_epoch, 4);
        assert_eq!(WeightSchedule::scaled_to(2).unwrap().switch_epoch, 1);
        assert!(WeightSchedule::scaled_to(1).is_err());
    }

    fn mask(shape: [usize; 3], data: Vec<u8>) -> LabelMask {
        LabelMask::new(shape, Spacing::ISOTROPIC_1MM, data).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let gt = mask([2, 2, 2], vec![1; 8]);
        let pred = mask([2, 2, 2], vec![0; 8]);
        let c = confusion_counts(&pred, &gt).unwrap();
        assert_eq!((c.tp[1], c.fn_[1]), (0, 8));
        let c = confusion_counts(&gt, &gt).unwrap();
        assert!(c.fp.iter().chain(&c.fn_).all(|&v| v == 0));
        assert_eq!(pixel_accuracy(&c, Class::Bone), 1.0);
        assert!(confusion_counts(&mask([1, 1, 8], vec![0; 8]), &gt).is_err());
    }

    #[test]
    fn metric_examples() {
        // gt bone at 0..4, pred bone at 2..6: intersection 2
        let gt = mask([1, 1, 8], vec![1, 1, 1, 1, 0, 0, 0, 0]);
        let pred = mask([1, 1, 8], vec![0, 0, 1, 1, 1, 1, 0, 0]);
        let c = confusion_counts(&pred, &gt).unwrap();
        assert!((iou(&c, Class::Bone) - 2.0 / 6.0).abs() < 1e-12);
        assert!((dice(&c, Class::Bone) - 0.5).abs() < 1e-12);
        let pred = mask([1, 1, 8], vec![1, 1, 1, 0, 0, 0, 0, 0]);
        let c = confusion_counts(&pred, &gt).unwrap();
        assert_eq!(pixel_accuracy(&c, Class::Bone), 0.75);
        let disjoint = mask([1, 1, 8], vec![0, 0, 0, 0, 1, 1, 1, 1]);
        let c = confusion_counts(&disjoint, &gt).unwrap();
        assert_eq!(iou(&c, Class::Bone), 0.0);
        // nerve absent from both
        assert_eq!((pixel_accuracy(&c, Class::Nerve), iou(&c, Class::Nerve), dice(&c, Class::Nerve)), (1.0, 1.0, 1.0));
        // nerve absent from gt but predicted
        let c = confusion_counts(&mask([1, 1, 8], vec![2, 0, 0, 0, 0, 0, 0, 0]), &gt).unwrap();
        assert_eq!(pixel_accuracy(&c, Class::Nerve), 0.0);
    }

    #[test]
    fn aggregate_examples() {
        let bone_iou = [89.7, 85.7, 82.0, 94.1, 85.2, 89.4, 90.1, 92.0, 93.9, 95.2];
        let cases: Vec<MetricResult> = bone_iou
            .iter()
            .map(|&v| MetricResult {
                bone: ClassMetrics {
                    iou: v,
                    ..Default::default()
                },
                ..Default::default()
            })
            .collect();
        let m = aggregate_mean(&cases).unwrap();
        assert!((m.bone.iou - 89.73).abs() < 1e-9);
        assert_eq!(aggregate_mean(&cases[..1]).unwrap().bone, cases[0].bone);
        assert!(aggregate_mean(&[]).is_err());
    }

    proptest! {
        #[test]
        fn dice_iou_identity(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
            let c = ConfusionCounts { tp: [0, tp, 0], fp: [0, fp, 0], fn_: [0, fn_, 0], total: tp + fp + fn_ };
            let i = iou(&c, Class::Bone);
            prop_assert!((dice(&c, Class::Bone) - 2.0 * i / (1.0 + i)).abs() < 1e-9);
        }
    }
}
