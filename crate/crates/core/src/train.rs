//! SGD with momentum, poly learning rate, gradient clipping and the
//! end-to-end training loop through the unrolled forecaster.

use std::io::Write;
use std::path::PathBuf;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::forecast::{forecast, FeatureCache, FeatureSource, ForecastMode, ForecastRequest, SequenceInput};
use crate::loss::{rgb_loss, seg_loss, smooth_l1, total_loss, LossWeights, SmoothL1Mode};
use crate::model::{param_group, ForecastModel};
use crate::params::Binder;
use crate::scenes::{downscale_flow, SceneSequence};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    /// Input pairs per forecast.
    pub unroll_pairs: usize,
    /// Frames between pair members and between consecutive pairs.
    pub step_size: usize,
    /// Frames between the last observed frame and the target.
    pub future_jump: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Weight of a smooth-l1 loss between predicted and true quarter-scale
    /// flow. 0 lets the flow path learn only through the warp.
    pub flow_supervision: f64,
    pub train_flow_cnn: bool,
    pub train_seg: bool,
    /// Unroll the auto-regressive chain during training.
    pub recurrent_finetune: bool,
    /// Auto-regressive sub-step; `None` means half the jump when even,
    /// else the whole jump.
    pub sub_step: Option<usize>,
    /// Strides of the frame pairs used by flow pretraining.
    pub pretrain_strides: Vec<usize>,
    pub log_every: u64,
    /// Write a checkpoint every this many iterations; 0 only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.001,
            power: 0.9,
            weight_decay: 0.0005,
            momentum: 0.9,
            batch_size: 1,
            max_iterations: 5000,
            unroll_pairs: 4,
            step_size: 1,
            future_jump: 3,
            seed: 0,
            loss_weights: LossWeights::annealed(5000),
            clip_norm: 10.0,
            flow_supervision: 0.0,
            train_flow_cnn: true,
            train_seg: false,
            recurrent_finetune: false,
            sub_step: None,
            pretrain_strides: vec![1, 2, 3],
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        if self.max_iterations == 0 {
            return fail("max_iterations must be positive");
        }
        if self.batch_size == 0 || self.unroll_pairs == 0 || self.step_size == 0 || self.future_jump == 0 {
            return fail("batch_size, unroll_pairs, step_size and future_jump must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.power >= 0.0 && self.clip_norm >= 0.0 && self.flow_supervision >= 0.0) {
            return fail("weight_decay, power, clip_norm and flow_supervision must be nonnegative");
        }
        if self.pretrain_strides.is_empty() || self.pretrain_strides.contains(&0) {
            return fail("pretrain_strides must be nonempty and positive");
        }
        self.loss_weights.validate()
    }

    pub fn mode(&self) -> ForecastMode {
        if self.recurrent_finetune {
            ForecastMode::AutoRegressive {
                sub_step: self.effective_sub_step(),
            }
        } else {
            ForecastMode::SingleStep
        }
    }

    pub fn effective_sub_step(&self) -> usize {
        self.sub_step.unwrap_or(if self.future_jump % 2 == 0 {
            self.future_jump / 2
        } else {
            self.future_jump
        })
    }

    /// Forecast request for observed frame `t`.
    pub fn request(&self, t: usize) -> ForecastRequest {
        ForecastRequest {
            t,
            s: self.future_jump,
            mode: self.mode(),
            step_size: self.step_size,
            num_pairs: self.unroll_pairs,
            inpaint: false,
        }
    }
}

/// `base_lr * (1 - iteration / max_iterations)^power`, zero past the end.
pub fn poly_lr(iteration: u64, config: &TrainConfig) -> f64 {
    let frac = (iteration.min(config.max_iterations)) as f64 / config.max_iterations as f64;
    config.base_lr * (1.0 - frac).powf(config.power)
}

/// `v <- m*v + g + wd*p; p <- p - lr*v`, then both rounded to `f32`
/// precision so checkpoints reload exactly. Tensors whose `trainable`
/// entry is false are left alone, weight decay included.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    trainable: &[bool],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    iteration: u64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() || params.len() != trainable.len() {
        return Err(Error::Usage("parameter, gradient and velocity lists differ in length".into()));
    }
    for g in grads {
        if !g.all_finite() {
            return Err(Error::Numerical {
                iteration,
                detail: "non-finite gradient".into(),
            });
        }
    }
    for (((p, g), v), _) in params
        .iter_mut()
        .zip(grads)
        .zip(velocity.iter_mut())
        .zip(trainable)
        .filter(|(_, &t)| t)
    {
        p.expect_same_shape(g, "sgd_step")?;
        p.expect_same_shape(v, "sgd_step")?;
        let (pd, vd) = (p.data_mut(), v.data_mut());
        for ((pv, &gv), vv) in pd.iter_mut().zip(g.data()).zip(vd.iter_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
        p.quantize_f32();
        v.quantize_f32();
    }
    Ok(())
}

/// Scale gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(k);
        }
    }
    norm
}

/// Loss terms of one sample.
pub struct SampleLoss<'t> {
    pub total: Var<'t>,
    pub seg: f64,
    pub rgb: f64,
    pub flow: f64,
}

/// Build the training loss for observed frame `t` of `input.seq`.
pub fn sample_loss<'t>(
    model: &ForecastModel,
    params: &Binder<'t, '_>,
    input: SequenceInput<'_>,
    config: &TrainConfig,
    t: usize,
    iteration: u64,
) -> Result<SampleLoss<'t>> {
    let req = config.request(t);
    let out = forecast(model, params, input, &req)?;
    let seq = input.seq;
    let tape = params.tape();
    let seg = seg_loss(out.probs, &seq.labels[t + req.s])?;
    if seg.all_void() {
        warn!("all target pixels are VOID at frame {}", t + req.s);
    }
    let mut rgb_terms = Vec::new();
    for &(k, warped) in &out.warped_frames {
        rgb_terms.push(rgb_loss(warped, tape.constant(seq.frame_batch(k)))?);
    }
    let rgb = mean_of(&rgb_terms)?;
    let mut total = total_loss(seg.loss, Some(rgb), &config.loss_weights, iteration)?;
    let mut flow_value = 0.0;
    if config.flow_supervision > 0.0 {
        let sub = req.sub_step();
        let mut terms = Vec::new();
        for (k, pred) in out.flows.iter().enumerate() {
            let start = t + k * sub;
            terms.push(flow_regression_loss(pred.quarter, &seq.sampling_flow(start, sub)?)?);
        }
        let flow = mean_of(&terms)?;
        flow_value = flow.value().item()?;
        total = total.add(flow.scale(config.flow_supervision))?;
    }
    Ok(SampleLoss {
        total,
        seg: seg.loss.value().item()?,
        rgb: rgb.value().item()?,
        flow: flow_value,
    })
}

/// Smooth-l1 between a quarter-scale flow and the full-resolution ground
/// truth averaged and divided by 4.
pub fn flow_regression_loss<'t>(quarter: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    let target = quarter.tape().constant(downscale_flow(gt, 4)?);
    smooth_l1(quarter, target, SmoothL1Mode::PerElement)
}

fn mean_of<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Usage("no loss terms".into()))?;
    let mut acc = *first;
    for &t in rest {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / terms.len() as f64))
}

/// Observed frames `t` usable for training under `config`.
pub fn valid_frames(config: &TrainConfig, len: usize) -> Result<std::ops::RangeInclusive<usize>> {
    let lo = config.unroll_pairs * config.step_size;
    let hi = len
        .checked_sub(config.future_jump + 1)
        .filter(|&hi| hi >= lo)
        .ok_or_else(|| {
            Error::Usage(format!(
                "{len}-frame sequences cannot hold {} pairs at step {} plus a jump of {}",
                config.unroll_pairs, config.step_size, config.future_jump
            ))
        })?;
    Ok(lo..=hi)
}

/// Mean seg_loss over sequences, each forecasting its last frame.
pub fn validation_seg_loss(
    model: &ForecastModel,
    data: &[SceneSequence],
    config: &TrainConfig,
    cache: Option<&FeatureCache>,
    seq_offset: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("empty validation set".into()));
    }
    let mut total = 0.0;
    for (k, seq) in data.iter().enumerate() {
        let t = *valid_frames(config, seq.len())?.end();
        let tape = Tape::new();
        let params = Binder::frozen(&tape, model.params());
        let input = SequenceInput {
            seq,
            seq_id: seq_offset + k,
            features: cache.map_or(FeatureSource::Live, FeatureSource::Cached),
        };
        let out = forecast(model, &params, input, &config.request(t))?;
        total += seg_loss(out.probs, &seq.labels[t + config.future_jump])?
            .loss
            .value()
            .item()?;
    }
    Ok(total / data.len() as f64)
}

/// Optional outputs and state for [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `iter n loss v seg v rgb v lr v` lines.
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_path: Option<PathBuf>,
    /// Continue from a checkpoint's optimizer state and iteration counter.
    pub resume: Option<Checkpoint>,
    /// Frozen encoder features; also freezes the encoder parameters.
    pub cache: Option<&'a FeatureCache>,
    /// Return once this many iterations are complete. The learning-rate
    /// schedule still runs to `max_iterations`.
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub first_loss: f64,
    pub last_loss: f64,
    pub checkpoint: Checkpoint,
}

fn trainable(config: &TrainConfig, cached: bool) -> impl Fn(&str) -> bool + '_ {
    move |name: &str| match param_group(name) {
        "flow" => config.train_flow_cnn && !cached,
        "seg" => config.train_seg,
        _ => true,
    }
}

/// Per-parameter gradients of one batch, without updating anything.
pub fn batch_gradients(
    model: &ForecastModel,
    data: &[SceneSequence],
    config: &TrainConfig,
    cache: Option<&FeatureCache>,
    rng: &mut ChaCha8Rng,
    iteration: u64,
) -> Result<(Vec<Tensor>, [f64; 4])> {
    let mut sums = [0.0; 4];
    let mut acc: Option<Vec<Tensor>> = None;
    for _ in 0..config.batch_size {
        let seq_id = rng.gen_range(0..data.len());
        let seq = &data[seq_id];
        let t = rng.gen_range(valid_frames(config, seq.len())?);
        let tape = Tape::new();
        let params = Binder::new(&tape, model.params(), trainable(config, cache.is_some()));
        let input = SequenceInput {
            seq,
            seq_id,
            features: cache.map_or(FeatureSource::Live, FeatureSource::Cached),
        };
        let loss = sample_loss(model, &params, input, config, t, iteration)?;
        let total = loss.total.value().item()?;
        if !total.is_finite() {
            return Err(Error::Numerical {
                iteration,
                detail: format!("loss is {total}"),
            });
        }
        for (s, v) in sums.iter_mut().zip([total, loss.seg, loss.rgb, loss.flow]) {
            *s += v / config.batch_size as f64;
        }
        let mut grads = loss.total.backward()?;
        let g = params.collect(&mut grads);
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    x.add_assign(y)?;
                }
            }
        }
    }
    let mut grads = acc.expect("batch_size >= 1");
    if config.batch_size > 1 {
        for g in &mut grads {
            g.scale_in_place(1.0 / config.batch_size as f64);
        }
    }
    Ok((grads, sums))
}

/// Train `model` in place on `data`.
///
/// On a non-finite loss or gradient the last finite state is written to
/// the checkpoint path (if any) and a numerical error is returned.
pub fn train(
    model: &mut ForecastModel,
    data: &[SceneSequence],
    config: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainSummary> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let mut state = match options.resume.take() {
        Some(c) => {
            if c.velocity.len() != model.params().len() {
                return Err(Error::Version("resume state does not match the model".into()));
            }
            c
        }
        None => Checkpoint::fresh(model.params().clone()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // skip the draws of completed iterations so resumed runs see the same samples
    for _ in 0..state.iteration * config.batch_size as u64 {
        let seq_id = rng.gen_range(0..data.len());
        let _ = rng.gen_range(valid_frames(config, data[seq_id].len())?);
    }
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let start = state.iteration;
    let end = options.stop_at.map_or(config.max_iterations, |s| s.min(config.max_iterations));
    let filter = trainable(config, options.cache.is_some());
    let update: Vec<bool> = model.params().iter().map(|(name, _)| filter(name)).collect();
    while state.iteration < end {
        let it = state.iteration;
        let lr = poly_lr(it, config);
        let step = batch_gradients(model, data, config, options.cache, &mut rng, it).and_then(
            |(mut grads, sums)| {
                clip_global_norm(&mut grads, config.clip_norm);
                let mut params: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
                sgd_step(
                    &mut params,
                    &grads,
                    &mut state.velocity,
                    &update,
                    lr,
                    config.momentum,
                    config.weight_decay,
                    it,
                )?;
                Ok((params, sums))
            },
        );
        let (params, sums) = match step {
            Ok(v) => v,
            Err(e @ Error::Numerical { .. }) => {
                if let Some(path) = &options.checkpoint_path {
                    state.params = model.params().clone();
                    state.save(path)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        for (id, p) in model.params().ids().collect::<Vec<_>>().into_iter().zip(params) {
            model.params_mut().set(id, p)?;
        }
        state.iteration += 1;
        if it == start {
            first_loss = sums[0];
        }
        last_loss = sums[0];
        let done = state.iteration == end;
        if config.log_every > 0 && (it % config.log_every == 0 || done) {
            let line = format!(
                "iter {it} loss {:.6} seg {:.6} rgb {:.6} lr {:.6e}",
                sums[0], sums[1], sums[2], lr
            );
            info!("{line} flow {:.6}", sums[3]);
            if let Some(log) = options.log.as_mut() {
                writeln!(log, "{line}").map_err(|e| Error::io("training log", e))?;
            }
        }
        let periodic = config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0;
        if let Some(path) = &options.checkpoint_path {
            if periodic || done {
                state.params = model.params().clone();
                state.save(path)?;
            }
        }
    }
    state.params = model.params().clone();
    Ok(TrainSummary {
        iterations: state.iteration - start,
        first_loss,
        last_loss,
        checkpoint: state,
    })
}

/// Supervised pretraining of the flow encoder on ground-truth flow.
///
/// Each step draws a sequence, a stride from `pretrain_strides` and a
/// frame pair, and regresses the quarter-scale flow head onto the
/// averaged and rescaled ground-truth sampling field.
pub fn pretrain_flow(
    model: &mut ForecastModel,
    data: &[SceneSequence],
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let mut state = Checkpoint::fresh(model.params().clone());
    let update: Vec<bool> = model.params().iter().map(|(name, _)| param_group(name) == "flow").collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    while state.iteration < config.max_iterations {
        let it = state.iteration;
        let lr = poly_lr(it, config);
        let mut acc: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;
        for _ in 0..config.batch_size {
            let seq = &data[rng.gen_range(0..data.len())];
            let stride = config.pretrain_strides[rng.gen_range(0..config.pretrain_strides.len())];
            if stride >= seq.len() {
                return Err(Error::Usage(format!("stride {stride} too long for {}-frame sequences", seq.len())));
            }
            let a = rng.gen_range(0..seq.len() - stride);
            let tape = Tape::new();
            let params = Binder::new(&tape, model.params(), |n| param_group(n) == "flow");
            let fa = tape.constant(seq.frame_batch(a));
            let fb = tape.constant(seq.frame_batch(a + stride));
            let pred = model.pair_features(&params, fa, fb)?.flow;
            let loss = flow_regression_loss(pred, &seq.sampling_flow(a, stride)?)?;
            let value = loss.value().item()?;
            if !value.is_finite() {
                return Err(Error::Numerical {
                    iteration: it,
                    detail: format!("flow loss is {value}"),
                });
            }
            loss_sum += value / config.batch_size as f64;
            let mut grads = loss.backward()?;
            let g = params.collect(&mut grads);
            match &mut acc {
                None => acc = Some(g),
                Some(x) => {
                    for (x, y) in x.iter_mut().zip(&g) {
                        x.add_assign(y)?;
                    }
                }
            }
        }
        let mut grads = acc.expect("batch_size >= 1");
        for g in &mut grads {
            g.scale_in_place(1.0 / config.batch_size as f64);
        }
        clip_global_norm(&mut grads, config.clip_norm);
        let mut params: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
        sgd_step(&mut params, &grads, &mut state.velocity, &update, lr, config.momentum, config.weight_decay, it)?;
        for (id, p) in model.params().ids().collect::<Vec<_>>().into_iter().zip(params) {
            model.params_mut().set(id, p)?;
        }
        state.iteration += 1;
        if it == 0 {
            first_loss = loss_sum;
        }
        last_loss = loss_sum;
        let done = state.iteration == config.max_iterations;
        if config.log_every > 0 && (it % config.log_every == 0 || done) {
            let line = format!("iter {it} loss {loss_sum:.6} seg 0 rgb 0 lr {lr:.6e}");
            info!("{line}");
            if let Some(log) = log.as_mut() {
                writeln!(log, "{line}").map_err(|e| Error::io("training log", e))?;
            }
        }
    }
    normalize_flow_features(model, data)?;
    state.params = model.params().clone();
    Ok(TrainSummary {
        iterations: state.iteration,
        first_loss,
        last_loss,
        checkpoint: state,
    })
}

/// Rescale the encoder's last layer so its features have unit RMS over the
/// stride-1 pairs of up to eight sequences, dividing the flow head by the
/// same factor. ReLU commutes with positive scaling, so predicted flow is
/// unchanged while the recurrent stage receives inputs of unit scale.
/// Returns the factor applied.
pub fn normalize_flow_features(model: &mut ForecastModel, data: &[SceneSequence]) -> Result<f64> {
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for seq in data.iter().take(8) {
        for a in 0..seq.len().saturating_sub(1) {
            let tape = Tape::new();
            let params = Binder::frozen(&tape, model.params());
            let f = model
                .pair_features(&params, tape.constant(seq.frame_batch(a)), tape.constant(seq.frame_batch(a + 1)))?
                .features
                .value();
            sum_sq += f.sum_sq();
            count += f.len();
        }
    }
    let rms = (sum_sq / count.max(1) as f64).sqrt();
    if !(rms > 0.0 && rms.is_finite()) {
        return Ok(1.0);
    }
    let k = 1.0 / rms;
    let store = model.params_mut();
    for (name, factor) in [
        ("flow.refine2.weight", k),
        ("flow.refine2.bias", k),
        ("flow.head.weight", rms),
    ] {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Version(format!("missing parameter {name}")))?;
        let mut t = store.get(id).clone();
        t.scale_in_place(factor);
        store.set(id, t)?;
    }
    Ok(k)
}

/// Mean endpoint error, in full-resolution pixels, of the encoder's flow
/// head on every pair at `stride` in `data`.
pub fn flow_endpoint_error(model: &ForecastModel, data: &[SceneSequence], stride: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in data {
        for a in 0..seq.len().saturating_sub(stride) {
            let tape = Tape::new();
            let params = Binder::frozen(&tape, model.params());
            let fa = tape.constant(seq.frame_batch(a));
            let fb = tape.constant(seq.frame_batch(a + stride));
            let pred = model.pair_features(&params, fa, fb)?.flow.upsample_bilinear(4, 4.0)?;
            let gt = seq.sampling_flow(a, stride)?;
            total += crate::metrics::endpoint_error(&pred.value(), &gt, None)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Usage(format!("no pairs at stride {stride}")));
    }
    Ok(total / count as f64)
}
