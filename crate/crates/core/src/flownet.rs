//! Pair-of-frames flow encoder.
//!
//! Two RGB frames are concatenated along channels and encoded down to a
//! quarter-resolution feature map. A zero-initialized 3x3 head reads a
//! flow field off those features, so an untrained network predicts no
//! motion.
//!
//! The predicted field is in sampling convention at quarter resolution:
//! warping a quarter-scale version of `frame_a` along it approximates
//! `frame_b`. Displacements are in quarter-scale pixels.

use crate::autodiff::{concat_channels, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Conv2dLayer, Init, ParamBuilder, ParamStore};

/// Channel widths of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowNetConfig {
    /// Full-resolution block.
    pub width1: usize,
    /// Half-resolution block.
    pub width2: usize,
    /// Quarter-resolution feature channels exposed to the recurrent stage.
    pub features: usize,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        FlowNetConfig {
            width1: 8,
            width2: 16,
            features: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowNet {
    config: FlowNetConfig,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    conv3: Conv2dLayer,
    refine1: Conv2dLayer,
    refine2: Conv2dLayer,
    head: Conv2dLayer,
}

/// Output of [`FlowNet::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FlowOutput<'t> {
    /// `[N, F, H/4, W/4]`, the input of the flow head.
    pub features: Var<'t>,
    /// `[N, 2, H/4, W/4]` in quarter-scale pixels.
    pub flow: Var<'t>,
}

impl FlowNet {
    pub fn build(params: &mut ParamBuilder<'_>, config: FlowNetConfig) -> Result<Self> {
        if config.width1 == 0 || config.width2 == 0 || config.features == 0 {
            return Err(Error::Config("flow network widths must be positive".into()));
        }
        let f = config.features;
        Ok(FlowNet {
            config,
            conv1: params.conv("flow.conv1", 6, config.width1, 3, Init::HeUniform)?,
            conv2: params.conv("flow.conv2", config.width1, config.width2, 3, Init::HeUniform)?,
            conv3: params.conv("flow.conv3", config.width2, f, 3, Init::HeUniform)?,
            refine1: params.conv("flow.refine1", f, f, 3, Init::HeUniform)?,
            refine2: params.conv("flow.refine2", f, f, 3, Init::HeUniform)?,
            head: params.conv("flow.head", f, 2, 3, Init::Zeros)?,
        })
    }

    /// Recover the widths from stored parameter shapes.
    pub fn infer_config(store: &ParamStore) -> Result<FlowNetConfig> {
        let out_channels = |name: &str| {
            store
                .by_name(name)
                .map(|t| t.shape()[0])
                .ok_or_else(|| Error::Version(format!("missing parameter {name}")))
        };
        Ok(FlowNetConfig {
            width1: out_channels("flow.conv1.weight")?,
            width2: out_channels("flow.conv2.weight")?,
            features: out_channels("flow.conv3.weight")?,
        })
    }

    pub fn config(&self) -> FlowNetConfig {
        self.config
    }

    pub fn forward<'t>(
        &self,
        params: &Binder<'t, '_>,
        frame_a: Var<'t>,
        frame_b: Var<'t>,
    ) -> Result<FlowOutput<'t>> {
        let shape = frame_a.shape();
        if shape != frame_b.shape() {
            return Err(Error::dim(
                "flow_forward",
                format!("frame shapes differ: {:?} vs {:?}", shape, frame_b.shape()),
            ));
        }
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::dim(
                "flow_forward",
                format!("frames must be [N,3,H,W], got {shape:?}"),
            ));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(Error::Config(format!(
                "frame extents {}x{} must be divisible by 4",
                shape[2], shape[3]
            )));
        }
        // centre intensities around zero
        let x = concat_channels(&[frame_a, frame_b])?.add_scalar(-0.5);
        let x = self.conv1.forward(params, x)?.relu().avg_pool(2)?;
        let x = self.conv2.forward(params, x)?.relu().avg_pool(2)?;
        let x = self.conv3.forward(params, x)?.relu();
        let x = self.refine1.forward(params, x)?.relu();
        let features = self.refine2.forward(params, x)?.relu();
        let flow = self.head.forward(params, features)?;
        Ok(FlowOutput { features, flow })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(config: FlowNetConfig) -> (ParamStore, FlowNet) {
        let mut store = ParamStore::new();
        let net = FlowNet::build(
            &mut ParamBuilder::fresh(&mut store, ChaCha8Rng::seed_from_u64(1)),
            config,
        )
        .unwrap();
        (store, net)
    }

    #[test]
    fn output_shapes_and_zero_head() {
        let (store, net) = net(FlowNetConfig::default());
        let tape = Tape::new();
        let params = Binder::frozen(&tape, &store);
        let a = tape.constant(Tensor::full(&[1, 3, 64, 128], 0.3));
        let b = tape.constant(Tensor::full(&[1, 3, 64, 128], 0.7));
        let out = net.forward(&params, a, b).unwrap();
        assert_eq!(out.features.shape(), [1, 16, 16, 32]);
        assert_eq!(out.flow.shape(), [1, 2, 16, 32]);
        assert_eq!(out.flow.value().max_abs(), 0.0);
    }

    #[test]
    fn indivisible_extent_is_config_error() {
        let (store, net) = net(FlowNetConfig::default());
        let tape = Tape::new();
        let params = Binder::frozen(&tape, &store);
        let a = tape.constant(Tensor::zeros(&[1, 3, 10, 8]));
        assert!(matches!(net.forward(&params, a, a), Err(Error::Config(_))));
    }

    #[test]
    fn config_is_recoverable_from_shapes() {
        let config = FlowNetConfig {
            width1: 4,
            width2: 6,
            features: 5,
        };
        let (store, _) = net(config);
        assert_eq!(FlowNet::infer_config(&store).unwrap(), config);
    }
}
