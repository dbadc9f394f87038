//! Future segmentation from past frames: single-step and auto-regressive
//! forecasting, inpainting of unreliable pixels, and the copy-last and
//! warp-last baselines.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{FlowPrediction, ForecastModel};
use crate::params::Binder;
use crate::scenes::{forward_to_sampling, SceneSequence};
use crate::segmap::LabelMap;
use crate::tensor::Tensor;
use crate::warp::{warp, warp_label_map, warp_tensor, OutOfBoundsMask};

/// Flow magnitude (max-norm, px) below which inpainting treats a pixel as
/// having no reliable motion.
pub const EPS_OCC: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForecastMode {
    /// One flow spans the whole jump.
    SingleStep,
    /// Repeated predict-warp steps of `sub_step` frames each; warped RGB
    /// frames re-enter the flow encoder.
    AutoRegressive { sub_step: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForecastRequest {
    /// Index of the last observed frame.
    pub t: usize,
    /// Future jump in frames.
    pub s: usize,
    pub mode: ForecastMode,
    /// Frames between the two members of each input pair, and between pairs.
    pub step_size: usize,
    /// Number of input pairs fed to the recurrent stage.
    pub num_pairs: usize,
    pub inpaint: bool,
}

impl ForecastRequest {
    /// Request whose target is the last frame of a `len`-frame sequence.
    pub fn last_frame(len: usize, s: usize, step_size: usize, num_pairs: usize) -> Result<Self> {
        let t = len
            .checked_sub(s + 1)
            .ok_or_else(|| Error::Usage(format!("jump {s} does not fit a {len}-frame sequence")))?;
        Ok(ForecastRequest {
            t,
            s,
            mode: ForecastMode::SingleStep,
            step_size,
            num_pairs,
            inpaint: false,
        })
    }

    /// Frames covered by one flow prediction.
    pub fn sub_step(&self) -> usize {
        match self.mode {
            ForecastMode::SingleStep => self.s,
            ForecastMode::AutoRegressive { sub_step } => sub_step,
        }
    }

    /// Observed frames needed before and including `t`.
    pub fn history(&self) -> usize {
        self.num_pairs * self.step_size + 1
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.s == 0 || self.step_size == 0 || self.num_pairs == 0 {
            return Err(Error::Usage("jump, step size and pair count must be positive".into()));
        }
        if self.t + self.s >= len {
            return Err(Error::Usage(format!(
                "target frame {} is beyond a {len}-frame sequence",
                self.t + self.s
            )));
        }
        if self.t + 1 < self.history() {
            return Err(Error::Usage(format!(
                "insufficient history: {} pairs at step {} need {} frames up to t, have {}",
                self.num_pairs,
                self.step_size,
                self.history(),
                self.t + 1
            )));
        }
        if let ForecastMode::AutoRegressive { sub_step } = self.mode {
            if sub_step == 0 || self.s % sub_step != 0 {
                return Err(Error::Usage(format!(
                    "sub-step {sub_step} does not divide the jump {}",
                    self.s
                )));
            }
            if self.step_size % sub_step != 0 && sub_step != self.s {
                return Err(Error::Usage(format!(
                    "step size {} must be a multiple of the sub-step {sub_step} so that \
                     every input frame after t is a predicted one",
                    self.step_size
                )));
            }
        }
        Ok(())
    }

    /// Input pairs `(a, b)` in time order for a window ending at `end`.
    pub fn pairs_ending_at(&self, end: usize) -> Vec<(usize, usize)> {
        (0..self.num_pairs)
            .rev()
            .map(|i| {
                let b = end - i * self.step_size;
                (b - self.step_size, b)
            })
            .collect()
    }
}

/// Encoder features of observed pairs computed once with frozen weights.
#[derive(Default)]
pub struct FeatureCache {
    entries: RefCell<HashMap<(usize, usize, usize), Tensor>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Features of `(seq.frames[a], seq.frames[b])` for sequence `seq_id`.
    pub fn get(&self, model: &ForecastModel, seq_id: usize, seq: &SceneSequence, a: usize, b: usize) -> Result<Tensor> {
        if let Some(t) = self.entries.borrow().get(&(seq_id, a, b)) {
            return Ok(t.clone());
        }
        let tape = Tape::new();
        let params = Binder::frozen(&tape, model.params());
        let fa = tape.constant(seq.frame_batch(a));
        let fb = tape.constant(seq.frame_batch(b));
        let features = model.pair_features(&params, fa, fb)?.features.value();
        let features = (*features).clone();
        self.entries.borrow_mut().insert((seq_id, a, b), features.clone());
        Ok(features)
    }
}

/// Where encoder features of observed pairs come from.
#[derive(Clone, Copy)]
pub enum FeatureSource<'c> {
    /// Run the encoder on the tape, so it can be trained.
    Live,
    /// Look features up in a cache; the encoder is treated as frozen.
    Cached(&'c FeatureCache),
}

/// One sequence plus the way to obtain its pair features.
#[derive(Clone, Copy)]
pub struct SequenceInput<'a> {
    pub seq: &'a SceneSequence,
    pub seq_id: usize,
    pub features: FeatureSource<'a>,
}

/// Result of [`forecast`].
pub struct Forecast<'t> {
    /// Current-frame probabilities `f_S(X_t)`.
    pub current: Var<'t>,
    /// Forecast probabilities for frame `t + s`, before inpainting.
    pub probs: Var<'t>,
    /// Pixels whose warp chain sampled outside the image.
    pub mask: OutOfBoundsMask,
    /// One prediction per sub-step.
    pub flows: Vec<FlowPrediction<'t>>,
    /// `(frame index, warped RGB)` per sub-step.
    pub warped_frames: Vec<(usize, Var<'t>)>,
}

/// Build the forecasting graph for `req` on `params`' tape.
pub fn forecast<'t>(
    model: &ForecastModel,
    params: &Binder<'t, '_>,
    input: SequenceInput<'_>,
    req: &ForecastRequest,
) -> Result<Forecast<'t>> {
    let seq = input.seq;
    req.validate(seq.len())?;
    let tape = params.tape();
    let mut frames: HashMap<usize, Var<'t>> = HashMap::new();
    let frame = |k: usize, frames: &mut HashMap<usize, Var<'t>>| -> Var<'t> {
        *frames
            .entry(k)
            .or_insert_with(|| tape.constant(seq.frame_batch(k)))
    };

    let current_frame = frame(req.t, &mut frames);
    let gt = model.segmentation().is_oracle().then(|| &seq.labels[req.t]);
    let current = model.segment(params, current_frame, gt)?;

    let sub = req.sub_step();
    let mut seg = current;
    let mut rgb = current_frame;
    let (h, w) = (seq.height(), seq.width());
    let mut mask = OutOfBoundsMask::zeros(1, h, w);
    let mut flows = Vec::new();
    let mut warped_frames = Vec::new();
    for k in 0..req.s / sub {
        let end = req.t + k * sub;
        let mut features = Vec::with_capacity(req.num_pairs);
        for (a, b) in req.pairs_ending_at(end) {
            let observed = b <= req.t;
            let f = match (input.features, observed) {
                (FeatureSource::Cached(cache), true) => {
                    tape.constant(cache.get(model, input.seq_id, seq, a, b)?)
                }
                _ => {
                    let fa = frame(a, &mut frames);
                    let fb = frame(b, &mut frames);
                    model.pair_features(params, fa, fb)?.features
                }
            };
            features.push(f);
        }
        let pred = model.aggregate(params, &features)?;
        let (next_seg, step_mask) = model.fuse(params, seg, &pred)?;
        if k > 0 {
            let (carried, _) = warp_tensor(mask.tensor(), &pred.full.value())?;
            mask = step_mask.union(&OutOfBoundsMask::from_tensor(carried.map(|v| f64::from(u8::from(v > 0.0)))))?;
        } else {
            mask = step_mask;
        }
        let (next_rgb, _) = warp(rgb, pred.full)?;
        seg = next_seg;
        rgb = next_rgb;
        frames.insert(end + sub, next_rgb);
        warped_frames.push((end + sub, next_rgb));
        flows.push(pred);
    }
    Ok(Forecast {
        current,
        probs: seg,
        mask,
        flows,
        warped_frames,
    })
}

/// Replace pixels that are masked, or whose flow is below [`EPS_OCC`] in
/// max-norm, with the current-frame probabilities.
pub fn inpaint(pred: &Tensor, mask: &OutOfBoundsMask, flow: Option<&Tensor>, current: &Tensor) -> Result<Tensor> {
    pred.expect_same_shape(current, "inpaint")?;
    let (n, c, h, w) = pred.dims4()?;
    if mask.tensor().shape() != [n, 1, h, w] {
        return Err(Error::dim("inpaint", "mask extent differs from prediction"));
    }
    if let Some(f) = flow {
        crate::warp::check_flow(f, n, h, w)?;
    }
    let mut out = pred.clone();
    for b in 0..n {
        for p in 0..h * w {
            let still = flow.is_some_and(|f| f.plane(b, 0)[p].abs().max(f.plane(b, 1)[p].abs()) < EPS_OCC);
            if mask.tensor().plane(b, 0)[p] > 0.0 || still {
                for k in 0..c {
                    out.plane_mut(b, k)[p] = current.plane(b, k)[p];
                }
            }
        }
    }
    Ok(out)
}

/// Forecast labels and the full-resolution flow of the final sub-step.
pub fn predict_labels(
    model: &ForecastModel,
    input: SequenceInput<'_>,
    req: &ForecastRequest,
) -> Result<(LabelMap, Tensor)> {
    let tape = Tape::new();
    let params = Binder::frozen(&tape, model.params());
    let out = forecast(model, &params, input, req)?;
    let flow = (*out.flows.last().expect("at least one sub-step").full.value()).clone();
    let probs = out.probs.value();
    let probs = if req.inpaint {
        inpaint(&probs, &out.mask, Some(&flow), &out.current.value())?
    } else {
        (*probs).clone()
    };
    Ok((LabelMap::from_probs(&probs)?, flow))
}

/// Current segmentation as the prediction for any future frame.
pub fn baseline_copy_last(model: Option<&ForecastModel>, seq: &SceneSequence, t: usize) -> Result<LabelMap> {
    if t >= seq.len() {
        return Err(Error::Usage(format!("frame {t} outside a {}-frame sequence", seq.len())));
    }
    match model {
        Some(m) if !m.segmentation().is_oracle() => {
            let tape = Tape::new();
            let params = Binder::frozen(&tape, m.params());
            let probs = m.segment(&params, tape.constant(seq.frame_batch(t)), None)?;
            LabelMap::from_probs(&probs.value())
        }
        _ => Ok(seq.labels[t].clone()),
    }
}

/// Motion source for [`baseline_warp_last`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpLastFlow {
    /// Flow encoder of the given model on `(X_{t-s}, X_t)`.
    Estimated,
    /// Ground-truth motion of the sequence over the same pair.
    GroundTruth,
}

/// Extrapolate the motion of the last `s` frames: the motion that brought
/// frame `t - s` to frame `t` is assumed to continue for `s` more frames.
pub fn baseline_warp_last(
    model: Option<&ForecastModel>,
    seq: &SceneSequence,
    t: usize,
    s: usize,
    source: WarpLastFlow,
) -> Result<LabelMap> {
    if s == 0 || t < s || t >= seq.len() {
        return Err(Error::Usage(format!(
            "warp-last needs frames {}..={t} of a {}-frame sequence",
            t as i64 - s as i64,
            seq.len()
        )));
    }
    // sampling field that carries frame t-s onto frame t, indexed at frame t
    let back = match source {
        WarpLastFlow::GroundTruth => seq.sampling_flow(t - s, s)?,
        WarpLastFlow::Estimated => {
            let model = model.ok_or_else(|| Error::Usage("estimated warp-last needs a model".into()))?;
            let tape = Tape::new();
            let params = Binder::frozen(&tape, model.params());
            let fa = tape.constant(seq.frame_batch(t - s));
            let fb = tape.constant(seq.frame_batch(t));
            let quarter = model.pair_features(&params, fa, fb)?.flow;
            (*quarter.upsample_bilinear(4, 4.0)?.value()).clone()
        }
    };
    // pixels of frame t moved by -back over the last s frames; keep going
    let forward = back.map(|v| -v);
    let sampling = forward_to_sampling(&forward, None, None)?;
    let current = baseline_copy_last(model, seq, t)?;
    warp_label_map(&current, &sampling)
}
