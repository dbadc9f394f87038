//! Dataset-level evaluation of the forecaster and the two baselines.

use crate::error::Result;
use crate::forecast::{
    baseline_copy_last, baseline_warp_last, predict_labels, FeatureCache, FeatureSource, ForecastMode,
    ForecastRequest, SequenceInput, WarpLastFlow,
};
use crate::metrics::{IouCounts, IouReport};
use crate::model::ForecastModel;
use crate::scenes::SceneSequence;
use crate::segmap::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    CopyLast,
    WarpLast(WarpLastFlow),
}

/// What to predict for every sequence: the last frame, `s` frames after
/// the last observed one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    pub s: usize,
    pub mode: ForecastMode,
    pub step_size: usize,
    pub num_pairs: usize,
    pub inpaint: bool,
    pub baseline: Option<Baseline>,
}

impl EvalConfig {
    pub fn request(&self, len: usize) -> Result<ForecastRequest> {
        let mut req = ForecastRequest::last_frame(len, self.s, self.step_size, self.num_pairs)?;
        req.mode = self.mode;
        req.inpaint = self.inpaint;
        Ok(req)
    }
}

/// Prediction for the last frame of `seq`.
pub fn predict_last(
    model: Option<&ForecastModel>,
    seq: &SceneSequence,
    seq_id: usize,
    config: &EvalConfig,
    cache: Option<&FeatureCache>,
) -> Result<LabelMap> {
    let req = config.request(seq.len())?;
    match (config.baseline, model) {
        (Some(Baseline::CopyLast), m) => baseline_copy_last(m, seq, req.t),
        (Some(Baseline::WarpLast(src)), m) => baseline_warp_last(m, seq, req.t, req.s, src),
        (None, Some(m)) => {
            let input = SequenceInput {
                seq,
                seq_id,
                features: cache.map_or(FeatureSource::Live, FeatureSource::Cached),
            };
            req.validate(seq.len())?;
            Ok(predict_labels(m, input, &req)?.0)
        }
        (None, None) => Err(crate::Error::Usage("evaluation without a baseline needs a checkpoint".into())),
    }
}

/// Per-sequence counts, in input order. `seq_offset` keys the feature cache.
pub fn evaluate_sequences(
    model: Option<&ForecastModel>,
    data: &[SceneSequence],
    config: &EvalConfig,
    cache: Option<&FeatureCache>,
    seq_offset: usize,
) -> Result<Vec<IouCounts>> {
    data.iter()
        .enumerate()
        .map(|(k, seq)| {
            let pred = predict_last(model, seq, seq_offset + k, config, cache)?;
            let mut counts = IouCounts::new(seq.spec.num_classes())?;
            counts.accumulate(&pred, seq.labels.last().expect("nonempty sequence"))?;
            Ok(counts)
        })
        .collect()
}

/// Counts accumulated over the whole set before dividing.
pub fn evaluate(
    model: Option<&ForecastModel>,
    data: &[SceneSequence],
    config: &EvalConfig,
    cache: Option<&FeatureCache>,
    seq_offset: usize,
) -> Result<IouReport> {
    let per_seq = evaluate_sequences(model, data, config, cache, seq_offset)?;
    let first = data.first().ok_or_else(|| crate::Error::Usage("empty evaluation set".into()))?;
    let mut total = IouCounts::new(first.spec.num_classes())?;
    for c in &per_seq {
        total.merge(c)?;
    }
    Ok(total.report(&first.spec.moving_classes()))
}
