pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod flownet;
pub mod forecast;
pub mod loss;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scenes;
pub mod segmap;
pub mod segnet;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/warping.md")]
    mod warping {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/forecasting.md")]
    mod forecasting {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
