//! Intersection-over-union and flow endpoint error.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::segmap::{LabelMap, VOID};
use crate::tensor::Tensor;
use crate::warp::OutOfBoundsMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    /// `None` when the class never appears in prediction or ground truth.
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

/// Per-class confusion counts. Accumulation is associative and
/// commutative, so per-sequence counts can be merged in any order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    counts: Vec<ClassCounts>,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Usage("IoU needs at least one class".into()));
        }
        Ok(IouCounts {
            counts: vec![ClassCounts::default(); num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[ClassCounts] {
        &self.counts
    }

    /// Count one prediction. VOID ground truth is skipped; a VOID
    /// prediction over a labelled pixel is a miss for that label.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::dim(
                "iou",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        let c = self.counts.len();
        gt.validate(c)?;
        pred.validate(c)?;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == VOID {
                continue;
            }
            if p == g {
                self.counts[usize::from(g)].tp += 1;
            } else {
                self.counts[usize::from(g)].fn_ += 1;
                if p != VOID {
                    self.counts[usize::from(p)].fp += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &IouCounts) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::dim("iou merge", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
        Ok(())
    }

    pub fn report(&self, moving_classes: &[u8]) -> IouReport {
        let per_class: Vec<Option<f64>> = self.counts.iter().map(ClassCounts::iou).collect();
        let mean = |ids: &mut dyn Iterator<Item = usize>| {
            let vals: Vec<f64> = ids.filter_map(|k| per_class.get(k).copied().flatten()).collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let mean_iou = mean(&mut (0..per_class.len()));
        let mean_iou_mo = mean(&mut moving_classes.iter().map(|&k| usize::from(k)));
        IouReport {
            per_class,
            mean_iou,
            mean_iou_mo,
            counts: self.counts.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes; 0 if none is defined.
    pub mean_iou: f64,
    /// Mean over defined moving classes; 0 if none is defined.
    pub mean_iou_mo: f64,
    pub counts: Vec<ClassCounts>,
}

impl IouReport {
    /// Lines `class_id TP FP FN IoU`, then `MEAN v` and `MEAN_MO v`.
    /// Undefined IoU is written as `nan`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, (c, iou)) in self.counts.iter().zip(&self.per_class).enumerate() {
            let iou = iou.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{k} {} {} {} {iou}", c.tp, c.fp, c.fn_);
        }
        let _ = writeln!(s, "MEAN {:.6}", self.mean_iou);
        let _ = writeln!(s, "MEAN_MO {:.6}", self.mean_iou_mo);
        s
    }
}

/// IoU of a single prediction.
pub fn iou(pred: &LabelMap, gt: &LabelMap, num_classes: usize, moving_classes: &[u8]) -> Result<IouReport> {
    let mut counts = IouCounts::new(num_classes)?;
    counts.accumulate(pred, gt)?;
    Ok(counts.report(moving_classes))
}

/// Mean Euclidean distance between two `[N, 2, H, W]` flows, skipping
/// pixels set in `exclude`. Returns 0 when every pixel is excluded.
pub fn endpoint_error(pred: &Tensor, gt: &Tensor, exclude: Option<&OutOfBoundsMask>) -> Result<f64> {
    pred.expect_same_shape(gt, "endpoint_error")?;
    let (n, c, h, w) = pred.dims4()?;
    if c != 2 {
        return Err(Error::dim("endpoint_error", "flows need 2 channels"));
    }
    if let Some(m) = exclude {
        if m.tensor().shape() != [n, 1, h, w] {
            return Err(Error::dim("endpoint_error", "mask extent differs from flow"));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                if exclude.is_some_and(|m| m.is_set(b, i, j)) {
                    continue;
                }
                let p = i * w + j;
                let dx = pred.plane(b, 0)[p] - gt.plane(b, 0)[p];
                let dy = pred.plane(b, 1)[p] - gt.plane(b, 1)[p];
                total += (dx * dx + dy * dy).sqrt();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
