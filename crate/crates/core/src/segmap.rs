//! Hard label maps and conversions to and from per-class probability maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reserved label excluded from losses and metrics.
pub const VOID: u8 = 255;

/// Single-image class label map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(
                "label map",
                format!("{height}x{width} map needs {} labels, got {}", height * width, labels.len()),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, label: u8) {
        self.labels[i * self.width + j] = label;
    }

    /// Every label is below `num_classes` or is [`VOID`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&l| l != VOID && usize::from(l) >= num_classes)
        {
            Some(p) => Err(Error::Usage(format!(
                "label {} at pixel {p} outside 0..{num_classes}",
                self.labels[p]
            ))),
            None => Ok(()),
        }
    }

    /// `[1, C, H, W]` probabilities: `1 - smoothing` on the labelled class
    /// and `smoothing / (C - 1)` elsewhere. VOID pixels get all zeros.
    pub fn to_one_hot(&self, num_classes: usize, smoothing: f64) -> Result<Tensor> {
        self.validate(num_classes)?;
        let hw = self.height * self.width;
        let off = if num_classes > 1 {
            smoothing / (num_classes - 1) as f64
        } else {
            0.0
        };
        let mut t = Tensor::zeros(&[1, num_classes, self.height, self.width]);
        let data = t.data_mut();
        for (p, &l) in self.labels.iter().enumerate() {
            if l == VOID {
                continue;
            }
            for k in 0..num_classes {
                data[k * hw + p] = if usize::from(l) == k { 1.0 - smoothing } else { off };
            }
        }
        Ok(t)
    }

    /// Per-pixel argmax of a `[1, C, H, W]` probability map.
    ///
    /// Pixels whose probabilities are all zero (e.g. warped from outside the
    /// image) become [`VOID`]. Ties go to the lowest class index.
    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        let (n, c, h, w) = probs.dims4()?;
        if n != 1 {
            return Err(Error::dim("argmax", format!("expected batch 1, got {n}")));
        }
        let hw = h * w;
        let labels = (0..hw)
            .map(|p| {
                let mut best = VOID;
                let mut best_v = 0.0;
                for k in 0..c {
                    let v = probs.data()[k * hw + p];
                    if v > best_v {
                        best_v = v;
                        best = k as u8;
                    }
                }
                best
            })
            .collect();
        LabelMap::new(h, w, labels)
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Maximum deviation of per-pixel channel sums from one.
pub fn simplex_error(probs: &Tensor) -> Result<f64> {
    let (n, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let mut worst: f64 = 0.0;
    for b in 0..n {
        for p in 0..hw {
            let s: f64 = (0..c).map(|k| probs.data()[(b * c + k) * hw + p]).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok(worst)
}
