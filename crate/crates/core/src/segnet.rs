//! Current-frame segmentation backbones.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Binder, Conv2dLayer, Init, ParamBuilder, ParamStore};
use crate::segmap::LabelMap;

/// Four 3x3 convolutions at full resolution followed by a channel softmax.
#[derive(Clone, Debug)]
pub struct SegCnn {
    convs: [Conv2dLayer; 4],
    num_classes: usize,
}

impl SegCnn {
    pub fn build(params: &mut ParamBuilder<'_>, width: usize, num_classes: usize) -> Result<Self> {
        if width == 0 || num_classes == 0 {
            return Err(Error::Config("segmentation widths must be positive".into()));
        }
        Ok(SegCnn {
            convs: [
                params.conv("seg.conv1", 3, width, 3, Init::HeUniform)?,
                params.conv("seg.conv2", width, width, 3, Init::HeUniform)?,
                params.conv("seg.conv3", width, width, 3, Init::HeUniform)?,
                params.conv("seg.conv4", width, num_classes, 3, Init::LecunUniform)?,
            ],
            num_classes,
        })
    }

    /// `(width, num_classes)` from stored shapes, if a learned backbone is present.
    pub fn infer(store: &ParamStore) -> Option<(usize, usize)> {
        let width = store.by_name("seg.conv1.weight")?.shape()[0];
        let classes = store.by_name("seg.conv4.weight")?.shape()[0];
        Some((width, classes))
    }

    pub fn forward<'t>(&self, params: &Binder<'t, '_>, frame: Var<'t>) -> Result<Var<'t>> {
        let mut x = frame;
        for (k, conv) in self.convs.iter().enumerate() {
            x = conv.forward(params, x)?;
            if k < 3 {
                x = x.relu();
            }
        }
        x.softmax_channels()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

#[derive(Clone, Debug)]
pub enum SegBackbone {
    /// One-hot ground truth, optionally label-smoothed.
    Oracle { num_classes: usize, smoothing: f64 },
    Learned(SegCnn),
}

impl SegBackbone {
    pub fn num_classes(&self) -> usize {
        match self {
            SegBackbone::Oracle { num_classes, .. } => *num_classes,
            SegBackbone::Learned(net) => net.num_classes(),
        }
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self, SegBackbone::Oracle { .. })
    }

    /// `[1, C, H, W]` class probabilities for `frame`.
    pub fn segment<'t>(
        &self,
        params: &Binder<'t, '_>,
        frame: Var<'t>,
        gt: Option<&LabelMap>,
    ) -> Result<Var<'t>> {
        match self {
            SegBackbone::Oracle {
                num_classes,
                smoothing,
            } => {
                let gt = gt.ok_or_else(|| {
                    Error::Usage("oracle segmentation needs ground-truth labels".into())
                })?;
                let shape = frame.shape();
                if shape.len() != 4 || shape[2] != gt.height() || shape[3] != gt.width() {
                    return Err(Error::dim(
                        "segment",
                        format!(
                            "frame {shape:?} does not match {}x{} labels",
                            gt.height(),
                            gt.width()
                        ),
                    ));
                }
                Ok(frame.tape().constant(gt.to_one_hot(*num_classes, *smoothing)?))
            }
            SegBackbone::Learned(net) => net.forward(params, frame),
        }
    }
}
