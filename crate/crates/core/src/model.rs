//! The full forecasting network: flow encoder, recurrent aggregation, flow
//! head, segmentation backbone and the fusion of flow with segmentation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat_channels, Var};
use crate::error::{Error, Result};
use crate::flownet::{FlowNet, FlowNetConfig, FlowOutput};
use crate::lstm::{ConvLstm, FlowHead};
use crate::params::{Binder, Conv2dLayer, Init, ParamBuilder, ParamStore};
use crate::segmap::LabelMap;
use crate::segnet::{SegBackbone, SegCnn};
use crate::warp::{warp, OutOfBoundsMask};

/// How predicted motion is combined with the current segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    /// Bilinear warp of the segmentation along the predicted flow.
    Warp,
    /// Concatenate upsampled flow features with the segmentation, then two convs.
    Concat,
    /// Project flow features to class channels, add, then one conv.
    Add,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Warp => "warp",
            FusionKind::Concat => "concat",
            FusionKind::Add => "add",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warp" => Ok(FusionKind::Warp),
            "concat" => Ok(FusionKind::Concat),
            "add" => Ok(FusionKind::Add),
            _ => Err(Error::Config(format!("unknown fusion {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SegMode {
    /// One-hot ground truth with the given label smoothing.
    Oracle { smoothing: f64 },
    Learned { width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub flow: FlowNetConfig,
    /// Hidden width of the ConvLSTM. `None` feeds the last pair's features
    /// straight to the flow head.
    pub lstm_hidden: Option<usize>,
    pub fusion: FusionKind,
    /// Hidden width of the concat fusion block.
    pub fusion_width: usize,
    pub seg: SegMode,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            flow: FlowNetConfig::default(),
            lstm_hidden: Some(16),
            fusion: FusionKind::Warp,
            fusion_width: 16,
            seg: SegMode::Oracle { smoothing: 0.0 },
            num_classes: 6,
        }
    }
}

#[derive(Clone, Debug)]
enum Fusion {
    Warp,
    Concat { conv1: Conv2dLayer, conv2: Conv2dLayer },
    Add { proj: Conv2dLayer, conv: Conv2dLayer },
}

/// Parameter groups, by name prefix.
pub const PARAM_GROUPS: [&str; 5] = ["flow", "lstm", "head", "fusion", "seg"];

/// Group of a parameter name, e.g. `"lstm"` for `"lstm.gates.weight"`.
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Flow predicted for the future jump.
#[derive(Clone, Copy, Debug)]
pub struct FlowPrediction<'t> {
    /// `[1, 2, H/4, W/4]` sampling field in quarter-scale pixels.
    pub quarter: Var<'t>,
    /// `quarter` upsampled to full resolution, in full-scale pixels.
    pub full: Var<'t>,
    /// Recurrent hidden state, or the last pair's features without LSTM.
    pub context: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct ForecastModel {
    config: ModelConfig,
    params: ParamStore,
    flow_net: FlowNet,
    lstm: Option<ConvLstm>,
    head: FlowHead,
    seg: SegBackbone,
    fusion: Fusion,
}

impl ForecastModel {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut builder = ParamBuilder::fresh(&mut params, ChaCha8Rng::seed_from_u64(seed));
        let parts = Self::build(&mut builder, &config)?;
        Ok(Self::assemble(config, params, parts))
    }

    /// Rebuild from stored parameters, inferring the architecture from
    /// parameter names and shapes. `num_classes` and the oracle smoothing
    /// are only used when no learned layer reveals them.
    pub fn from_params(mut params: ParamStore, num_classes: usize, oracle_smoothing: f64) -> Result<Self> {
        let flow = FlowNet::infer_config(&params)?;
        let lstm_hidden = ConvLstm::infer_widths(&params).map(|(_, h)| h);
        let (fusion, fusion_width) = if let Some(w) = params.by_name("fusion.concat1.weight") {
            (FusionKind::Concat, w.shape()[0])
        } else if params.by_name("fusion.proj.weight").is_some() {
            (FusionKind::Add, ModelConfig::default().fusion_width)
        } else {
            (FusionKind::Warp, ModelConfig::default().fusion_width)
        };
        let (seg, num_classes) = match SegCnn::infer(&params) {
            Some((width, classes)) => (SegMode::Learned { width }, classes),
            None => {
                let classes = params
                    .by_name("fusion.proj.weight")
                    .or_else(|| params.by_name("fusion.concat2.weight"))
                    .map_or(num_classes, |w| w.shape()[0]);
                (SegMode::Oracle { smoothing: oracle_smoothing }, classes)
            }
        };
        let config = ModelConfig {
            flow,
            lstm_hidden,
            fusion,
            fusion_width,
            seg,
            num_classes,
        };
        let expected = params.len();
        let parts = Self::build(&mut ParamBuilder::loaded(&mut params), &config)?;
        let model = Self::assemble(config, params, parts);
        if model.expected_len()? != expected {
            return Err(Error::Version(format!(
                "checkpoint holds {expected} tensors, architecture uses {}",
                model.expected_len()?
            )));
        }
        Ok(model)
    }

    fn expected_len(&self) -> Result<usize> {
        let mut scratch = ParamStore::new();
        Self::build(
            &mut ParamBuilder::fresh(&mut scratch, ChaCha8Rng::seed_from_u64(0)),
            &self.config,
        )?;
        Ok(scratch.len())
    }

    fn build(
        b: &mut ParamBuilder<'_>,
        config: &ModelConfig,
    ) -> Result<(FlowNet, Option<ConvLstm>, FlowHead, SegBackbone, Fusion)> {
        if config.num_classes == 0 || config.num_classes >= usize::from(crate::segmap::VOID) {
            return Err(Error::Config(format!("invalid class count {}", config.num_classes)));
        }
        let flow_net = FlowNet::build(b, config.flow)?;
        let f = config.flow.features;
        let lstm = config
            .lstm_hidden
            .map(|h| ConvLstm::build(b, f, h))
            .transpose()?;
        let context = config.lstm_hidden.unwrap_or(f);
        let head = FlowHead::build(b, context)?;
        let c = config.num_classes;
        let seg = match config.seg {
            SegMode::Oracle { smoothing } => {
                if !(0.0..1.0).contains(&smoothing) {
                    return Err(Error::Config(format!("oracle smoothing {smoothing} outside [0,1)")));
                }
                SegBackbone::Oracle {
                    num_classes: c,
                    smoothing,
                }
            }
            SegMode::Learned { width } => SegBackbone::Learned(SegCnn::build(b, width, c)?),
        };
        let fusion = match config.fusion {
            FusionKind::Warp => Fusion::Warp,
            FusionKind::Concat => Fusion::Concat {
                conv1: b.conv("fusion.concat1", context + c, config.fusion_width, 3, Init::HeUniform)?,
                conv2: b.conv("fusion.concat2", config.fusion_width, c, 3, Init::LecunUniform)?,
            },
            FusionKind::Add => Fusion::Add {
                proj: b.conv("fusion.proj", context, c, 1, Init::LecunUniform)?,
                conv: b.conv("fusion.add", c, c, 3, Init::LecunUniform)?,
            },
        };
        Ok((flow_net, lstm, head, seg, fusion))
    }

    fn assemble(
        config: ModelConfig,
        params: ParamStore,
        (flow_net, lstm, head, seg, fusion): (FlowNet, Option<ConvLstm>, FlowHead, SegBackbone, Fusion),
    ) -> Self {
        ForecastModel {
            config,
            params,
            flow_net,
            lstm,
            head,
            seg,
            fusion,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn flow_net(&self) -> &FlowNet {
        &self.flow_net
    }

    pub fn segmentation(&self) -> &SegBackbone {
        &self.seg
    }

    /// Copy every `flow.*` tensor from `source`, e.g. a pretrained encoder.
    pub fn load_flow_params(&mut self, source: &ParamStore) -> Result<()> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            if param_group(&name) != "flow" {
                continue;
            }
            let value = source
                .by_name(&name)
                .ok_or_else(|| Error::Version(format!("pretrained weights lack {name}")))?;
            if value.shape() != self.params.get(id).shape() {
                return Err(Error::Version(format!(
                    "pretrained {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    self.params.get(id).shape()
                )));
            }
            self.params.set(id, value.clone())?;
        }
        Ok(())
    }

    /// Encoder features and flow for one pair of `[1, 3, H, W]` frames.
    pub fn pair_features<'t>(
        &self,
        params: &Binder<'t, '_>,
        frame_a: Var<'t>,
        frame_b: Var<'t>,
    ) -> Result<FlowOutput<'t>> {
        self.flow_net.forward(params, frame_a, frame_b)
    }

    /// Run the recurrent stage over per-pair features in time order and
    /// predict the future flow.
    pub fn aggregate<'t>(&self, params: &Binder<'t, '_>, features: &[Var<'t>]) -> Result<FlowPrediction<'t>> {
        let last = *features
            .last()
            .ok_or_else(|| Error::Usage("flow aggregation needs at least one frame pair".into()))?;
        let context = match &self.lstm {
            Some(lstm) => {
                let mut state = None;
                for &x in features {
                    state = Some(lstm.step(params, x, state)?);
                }
                state.expect("at least one step").hidden
            }
            None => last,
        };
        let quarter = self.head.forward(params, context)?;
        let full = quarter.upsample_bilinear(4, 4.0)?;
        Ok(FlowPrediction {
            quarter,
            full,
            context,
        })
    }

    /// Class probabilities of the current frame.
    pub fn segment<'t>(&self, params: &Binder<'t, '_>, frame: Var<'t>, gt: Option<&LabelMap>) -> Result<Var<'t>> {
        self.seg.segment(params, frame, gt)
    }

    /// Combine current segmentation probabilities with predicted motion.
    ///
    /// Only the warp variant can push content out of the image, so the
    /// other variants return an empty mask.
    pub fn fuse<'t>(
        &self,
        params: &Binder<'t, '_>,
        seg: Var<'t>,
        flow: &FlowPrediction<'t>,
    ) -> Result<(Var<'t>, OutOfBoundsMask)> {
        let (n, _, h, w) = seg.value().dims4()?;
        match &self.fusion {
            Fusion::Warp => warp(seg, flow.full),
            Fusion::Concat { conv1, conv2 } => {
                let up = flow.context.upsample_bilinear(4, 1.0)?;
                let x = conv1.forward(params, concat_channels(&[up, seg])?)?.relu();
                let probs = conv2.forward(params, x)?.softmax_channels()?;
                Ok((probs, OutOfBoundsMask::zeros(n, h, w)))
            }
            Fusion::Add { proj, conv } => {
                let up = proj.forward(params, flow.context)?.upsample_bilinear(4, 1.0)?;
                let probs = conv.forward(params, seg.add(up)?)?.softmax_channels()?;
                Ok((probs, OutOfBoundsMask::zeros(n, h, w)))
            }
        }
    }
}
