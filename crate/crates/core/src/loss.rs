//! Training objectives: pixel-wise cross-entropy on forecast probabilities,
//! smooth-l1 reconstruction on warped frames, and their weighted sum with a
//! step schedule for the reconstruction weight.

use log::warn;

use crate::autodiff::{Backward, Var};
use crate::error::{Error, Result};
use crate::segmap::{LabelMap, VOID};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking the log.
pub const LOG_CLAMP: f64 = 1e-8;

/// Result of [`seg_loss`].
pub struct SegLoss<'t> {
    pub loss: Var<'t>,
    /// Number of non-VOID pixels that were averaged.
    pub counted: usize,
}

impl SegLoss<'_> {
    /// True when every ground-truth pixel was VOID and the loss is a
    /// placeholder zero.
    pub fn all_void(&self) -> bool {
        self.counted == 0
    }
}

struct CrossEntropy {
    labels: Vec<u8>,
    counted: usize,
}

impl Backward for CrossEntropy {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let probs = inputs[0];
        let hw = self.labels.len();
        let g = grad.item()?;
        let mut out = Tensor::zeros(probs.shape());
        if self.counted > 0 {
            let norm = g / self.counted as f64;
            for (p, &l) in self.labels.iter().enumerate() {
                if l == VOID {
                    continue;
                }
                let idx = usize::from(l) * hw + p;
                let prob = probs.data()[idx];
                if prob > LOG_CLAMP {
                    out.data_mut()[idx] = -norm / prob;
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Mean of `-ln p(gt)` over non-VOID pixels of a `[1, C, H, W]`
/// probability map.
pub fn seg_loss<'t>(probs: Var<'t>, gt: &LabelMap) -> Result<SegLoss<'t>> {
    let value = probs.value();
    let (n, c, h, w) = value.dims4()?;
    if n != 1 || h != gt.height() || w != gt.width() {
        return Err(Error::dim(
            "seg_loss",
            format!(
                "prediction {:?} vs ground truth {}x{}",
                value.shape(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    gt.validate(c)?;
    let hw = h * w;
    let mut total = 0.0;
    let mut counted = 0usize;
    for (p, &l) in gt.labels().iter().enumerate() {
        if l == VOID {
            continue;
        }
        let prob = value.data()[usize::from(l) * hw + p];
        total -= prob.max(LOG_CLAMP).ln();
        counted += 1;
    }
    if counted == 0 {
        warn!("seg_loss: every ground-truth pixel is VOID; loss defined as 0");
    }
    let mean = if counted > 0 { total / counted as f64 } else { 0.0 };
    let loss = probs.tape().record(
        Tensor::scalar(mean),
        &[probs],
        CrossEntropy {
            labels: gt.labels().to_vec(),
            counted,
        },
    );
    Ok(SegLoss { loss, counted })
}

/// How the smooth-l1 branches are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SmoothL1Mode {
    /// Branch per element, then average.
    #[default]
    PerElement,
    /// Branch once on the summed absolute difference over the whole image.
    SummedDistance,
}

#[inline]
fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

#[inline]
fn huber_slope(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

struct SmoothL1 {
    mode: SmoothL1Mode,
}

impl Backward for SmoothL1 {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = grad.item()?;
        let (pred, target) = (inputs[0], inputs[1]);
        let n = pred.len().max(1) as f64;
        let gp = match self.mode {
            SmoothL1Mode::PerElement => pred.zip_map(target, |a, b| g * huber_slope(a - b) / n)?,
            SmoothL1Mode::SummedDistance => {
                let d: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
                let outer = huber_slope(d);
                pred.zip_map(target, |a, b| g * outer * (a - b).signum())?
            }
        };
        let gt = gp.map(|v| -v);
        Ok(vec![Some(gp), Some(gt)])
    }
}

/// Smooth-l1 distance between two same-shaped values.
pub fn smooth_l1<'t>(pred: Var<'t>, target: Var<'t>, mode: SmoothL1Mode) -> Result<Var<'t>> {
    let (a, b) = (pred.value(), target.value());
    a.expect_same_shape(&b, "smooth_l1")?;
    let value = match mode {
        SmoothL1Mode::PerElement => {
            let n = a.len().max(1) as f64;
            a.data().iter().zip(b.data()).map(|(x, y)| huber(x - y)).sum::<f64>() / n
        }
        SmoothL1Mode::SummedDistance => {
            huber(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum())
        }
    };
    Ok(pred
        .tape()
        .record(Tensor::scalar(value), &[pred, target], SmoothL1 { mode }))
}

/// Reconstruction loss between a warped frame and the true frame.
pub fn rgb_loss<'t>(pred_frame: Var<'t>, gt_frame: Var<'t>) -> Result<Var<'t>> {
    smooth_l1(pred_frame, gt_frame, SmoothL1Mode::PerElement)
}

/// Weights of the combined objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// `(iteration, lambda2)` breakpoints; each value applies from its
    /// iteration onwards.
    pub anneal_schedule: Vec<(u64, f64)>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            anneal_schedule: Vec::new(),
        }
    }
}

impl LossWeights {
    /// Both weights start at 1; the reconstruction weight steps down
    /// through 0.5, 0.1 and 0 at a quarter, half and three quarters of
    /// training.
    pub fn annealed(max_iterations: u64) -> Self {
        let mut anneal_schedule: Vec<(u64, f64)> = Vec::new();
        for (num, v) in [(1, 0.5), (2, 0.1), (3, 0.0)] {
            let it = (max_iterations * num / 4).max(1);
            // short runs collapse breakpoints; the later value wins
            match anneal_schedule.last_mut() {
                Some(last) if last.0 == it => last.1 = v,
                _ => anneal_schedule.push((it, v)),
            }
        }
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            anneal_schedule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        let mut last_it = None;
        let mut last_v = self.lambda2;
        for &(it, v) in &self.anneal_schedule {
            if last_it.is_some_and(|l| it <= l) {
                return Err(Error::Config(
                    "anneal schedule iterations must be strictly increasing".into(),
                ));
            }
            if !(v >= 0.0) || v > last_v {
                return Err(Error::Config(
                    "anneal schedule lambda2 values must be nonnegative and non-increasing".into(),
                ));
            }
            last_it = Some(it);
            last_v = v;
        }
        Ok(())
    }

    pub fn lambda2_at(&self, iteration: u64) -> f64 {
        self.anneal_schedule
            .iter()
            .take_while(|&&(it, _)| it <= iteration)
            .last()
            .map_or(self.lambda2, |&(_, v)| v)
    }
}

/// `lambda1 * seg + lambda2(iteration) * rgb`. A zero reconstruction
/// weight drops the term from the graph altogether.
pub fn total_loss<'t>(
    seg: Var<'t>,
    rgb: Option<Var<'t>>,
    weights: &LossWeights,
    iteration: u64,
) -> Result<Var<'t>> {
    let seg_term = seg.scale(weights.lambda1);
    let lambda2 = weights.lambda2_at(iteration);
    match rgb {
        Some(rgb) if lambda2 != 0.0 => seg_term.add(rgb.scale(lambda2)),
        _ => Ok(seg_term),
    }
}
