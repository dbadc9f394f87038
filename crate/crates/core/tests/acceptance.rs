//! Full acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion outside `EXPECTED_FAILURES` fails. Takes tens
//! of minutes on one core.

mod common;

use std::time::Instant;

use common::{grad_check, project, uniform};
use flowcast::ablation::{
    evaluate_variant, fusion_table, horizon_table, lstm_table, mid_term_table, step_table, train_variant, Setup,
    Table, Variant,
};
use flowcast::autodiff::Tape;
use flowcast::checkpoint::Checkpoint;
use flowcast::eval::{evaluate, Baseline, EvalConfig};
use flowcast::flownet::FlowNetConfig;
use flowcast::forecast::{forecast, FeatureCache, FeatureSource, ForecastMode, ForecastRequest, SequenceInput, WarpLastFlow};
use flowcast::loss::{seg_loss, smooth_l1, LossWeights, SmoothL1Mode};
use flowcast::metrics::iou;
use flowcast::model::{param_group, FlowPrediction, ForecastModel, FusionKind, ModelConfig, SegMode};
use flowcast::params::Binder;
use flowcast::scenes::{
    generate, generate_dataset, read_flo, read_pgm, read_ppm, read_sequence, write_flo, write_pgm, write_ppm,
    write_sequence, Dataset, SceneClass, SceneSequence, SceneSpec, ShapeFamily,
};
use flowcast::segmap::{LabelMap, VOID};
use flowcast::train::{
    batch_gradients, pretrain_flow, train, validation_seg_loss, TrainConfig, TrainOptions,
};
use flowcast::warp::{warp, warp_label_map, warp_tensor};
use flowcast::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

/// Criteria known not to hold at this scale. They still run and print
/// FAIL; an unexpected pass is reported as well.
const EXPECTED_FAILURES: &[usize] = &[10];

struct Report {
    failed: usize,
    unexpected: usize,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        let expected = EXPECTED_FAILURES.contains(&id);
        if !ok {
            self.failed += 1;
            self.unexpected += usize::from(!expected);
        }
        let note = match (ok, expected) {
            (false, true) => " [expected failure]",
            (true, true) => " [unexpected pass]",
            _ => "",
        };
        println!(
            "{} {id:>2} {name}: {detail} ({:.1} s){note}",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn off_lattice(rng: &mut ChaCha8Rng, reach: i32) -> f64 {
    rng.gen_range(-reach..=reach) as f64 + rng.gen_range(0.15..0.85)
}

fn warp_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let n = 30;
    for _ in 0..n {
        let c = rng.gen_range(1..=3);
        let h = rng.gen_range(3..=7);
        let w = rng.gen_range(3..=7);
        let features = uniform(&mut rng, &[1, c, h, w], -1.0, 1.0);
        let mut flow = Tensor::zeros(&[1, 2, h, w]);
        for v in flow.data_mut() {
            *v = off_lattice(&mut rng, 2);
        }
        let r = uniform(&mut rng, &[1, c, h, w], -1.0, 1.0);
        worst = worst.max(grad_check(&[features, flow], 1e-6, |_, v| project(warp(v[0], v[1]).unwrap().0, &r)));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst < 1e-4 && secs < 30.0, format!("{n} instances, worst relative error {worst:.2e}")))
}

fn warp_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut checked = 0;
    for _ in 0..20 {
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(2..=9), rng.gen_range(2..=9));
        let x = uniform(&mut rng, &[1, c, h, w], -1.0, 1.0);
        let (same, mask) = warp_tensor(&x, &Tensor::zeros(&[1, 2, h, w])).map_err(err)?;
        if same != x || mask.count() != 0 {
            return Ok((false, "zero flow is not the identity".into()));
        }
        let mut flow = Tensor::zeros(&[1, 2, h, w]);
        let mut offsets = Vec::with_capacity(h * w);
        for p in 0..h * w {
            let (dx, dy) = (rng.gen_range(-3..=3), rng.gen_range(-3..=3));
            flow.plane_mut(0, 0)[p] = dx as f64;
            flow.plane_mut(0, 1)[p] = dy as f64;
            offsets.push((dx, dy));
        }
        let (y, mask) = warp_tensor(&x, &flow).map_err(err)?;
        let labels = LabelMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..5)).collect()).map_err(err)?;
        let warped = warp_label_map(&labels, &flow).map_err(err)?;
        for i in 0..h {
            for j in 0..w {
                let (dx, dy) = offsets[i * w + j];
                let (si, sj) = (i as i64 + dy, j as i64 + dx);
                let inside = si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w;
                if mask.is_set(0, i, j) == inside {
                    return Ok((false, format!("mask wrong at ({i}, {j})")));
                }
                let want_label = if inside { labels.get(si as usize, sj as usize) } else { VOID };
                if warped.get(i, j) != want_label {
                    return Ok((false, format!("label remap wrong at ({i}, {j})")));
                }
                for ch in 0..c {
                    let want = if inside { x.at4(0, ch, si as usize, sj as usize) } else { 0.0 };
                    if y.at4(0, ch, i, j).to_bits() != want.to_bits() {
                        return Ok((false, format!("remap wrong at ({ch}, {i}, {j})")));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok((true, format!("20 identities, {checked} remapped values exact")))
}

fn rigid_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        seed,
        classes: vec![SceneClass::Band, SceneClass::Band, SceneClass::MovingSprite, SceneClass::MovingSprite],
        sprites: 3,
        shape: ShapeFamily::Rectangle,
        velocity: (1.0, 2.0),
        acceleration: (0.0, 0.0),
        ..SceneSpec::default()
    }
}

/// Pixels of frame `t + s` with a source in frame `t`.
fn traced(seq: &SceneSequence, t: usize, s: usize) -> Result<Vec<bool>, String> {
    let (h, w) = (seq.height(), seq.width());
    let mut keep = vec![true; h * w];
    for k in t..t + s {
        let bits = seq.disocclusions[k].bits().iter().map(|&b| f64::from(u8::from(b))).collect();
        let bits = Tensor::from_vec(&[1, 1, h, w], bits).map_err(err)?;
        let carried = if k + 1 < t + s {
            warp_tensor(&bits, &seq.sampling_flow(k + 1, t + s - k - 1).map_err(err)?).map_err(err)?.0
        } else {
            bits
        };
        for (p, v) in carried.data().iter().enumerate() {
            if *v != 0.0 {
                keep[p] = false;
            }
        }
    }
    Ok(keep)
}

fn decomposition() -> Outcome {
    let config = ModelConfig {
        seg: SegMode::Oracle { smoothing: 0.0 },
        num_classes: 4,
        ..ModelConfig::default()
    };
    let model = ForecastModel::new(config, 0).map_err(err)?;
    let mut worst: f64 = 1.0;
    let mut pixels = 0;
    for seed in 0..4 {
        let seq = generate(&rigid_spec(seed)).map_err(err)?;
        for s in [1, 3] {
            let t = seq.len() - 1 - s;
            let tape = Tape::new();
            let params = Binder::frozen(&tape, model.params());
            let frame = tape.constant(seq.frame_batch(t));
            let current = model.segment(&params, frame, Some(&seq.labels[t])).map_err(err)?;
            let gt = tape.constant(seq.sampling_flow(t, s).map_err(err)?);
            let prediction = FlowPrediction {
                quarter: gt,
                full: gt,
                context: gt,
            };
            let (probs, _) = model.fuse(&params, current, &prediction).map_err(err)?;
            let pred = LabelMap::from_probs(&probs.value()).map_err(err)?;
            let mut truth = seq.labels[t + s].clone();
            for (p, keep) in traced(&seq, t, s)?.into_iter().enumerate() {
                if keep {
                    pixels += usize::from(truth.labels()[p] != VOID);
                } else {
                    truth.labels_mut()[p] = VOID;
                }
            }
            let r = iou(&pred, &truth, 4, &[2, 3]).map_err(err)?;
            worst = worst.min(r.mean_iou);
        }
    }
    Ok((worst == 1.0, format!("IoU {worst:.6} over {pixels} traced pixels")))
}

fn losses() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let tape = Tape::new();
    let gt = LabelMap::new(2, 3, vec![0, 1, 2, 3, 1, VOID]).map_err(err)?;
    let onehot = tape.constant(gt.to_one_hot(4, 0.0).map_err(err)?);
    let l = seg_loss(onehot, &gt).map_err(err)?.loss.value().item().map_err(err)?;
    ok &= l == 0.0;
    notes.push(format!("one-hot {l}"));
    let uniform4 = tape.constant(Tensor::full(&[1, 4, 2, 3], 0.25));
    let l = seg_loss(uniform4, &gt).map_err(err)?.loss.value().item().map_err(err)?;
    ok &= (l - 4f64.ln()).abs() <= 1e-6;
    notes.push(format!("uniform {l:.9}"));
    for (d, want) in [(0.5, 0.125), (1.0, 0.5), (2.0, 1.5)] {
        let a = tape.constant(Tensor::full(&[1, 1, 1, 1], d));
        let b = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let v = smooth_l1(a, b, SmoothL1Mode::PerElement).map_err(err)?.value().item().map_err(err)?;
        ok &= v == want;
    }
    notes.push("smooth-l1 exact".into());

    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let logits = uniform(&mut rng, &[1, 4, 3, 5], -2.0, 2.0);
    let mut labels: Vec<u8> = (0..15).map(|_| rng.gen_range(0..4)).collect();
    labels[7] = VOID;
    let gt = LabelMap::new(3, 5, labels).map_err(err)?;
    let e1 = grad_check(&[logits], 1e-6, |_, v| seg_loss(v[0].softmax_channels().unwrap(), &gt).unwrap().loss);
    let a = uniform(&mut rng, &[1, 3, 3, 3], -3.0, 3.0);
    let mut b = a.clone();
    for v in b.data_mut() {
        let d: f64 = if rng.gen_bool(0.5) { rng.gen_range(0.05..0.8) } else { rng.gen_range(1.2..2.5) };
        *v += if rng.gen_bool(0.5) { d } else { -d };
    }
    let mut e2: f64 = 0.0;
    for mode in [SmoothL1Mode::PerElement, SmoothL1Mode::SummedDistance] {
        e2 = e2.max(grad_check(&[a.clone(), b.clone()], 1e-6, |_, v| smooth_l1(v[0], v[1], mode).unwrap()));
    }
    ok &= e1 < 1e-4 && e2 < 1e-4;
    notes.push(format!("gradient errors {e1:.1e} {e2:.1e}"));
    Ok((ok, notes.join(", ")))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let classes = 5u8;
    let random_map = |rng: &mut ChaCha8Rng| {
        let labels = (0..256)
            .map(|_| if rng.gen_bool(0.1) { VOID } else { rng.gen_range(0..classes) })
            .collect();
        LabelMap::new(16, 16, labels).unwrap()
    };
    for _ in 0..10 {
        let (pred, gt) = (random_map(&mut rng), random_map(&mut rng));
        let r = iou(&pred, &gt, classes as usize, &[2, 3]).map_err(err)?;
        for k in 0..classes {
            let (mut inter, mut union) = (0u32, 0u32);
            for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
                if g != VOID {
                    inter += u32::from(p == k && g == k);
                    union += u32::from(p == k || g == k);
                }
            }
            let want = (union > 0).then(|| f64::from(inter) / f64::from(union));
            if r.per_class[k as usize] != want {
                return Ok((false, format!("class {k} differs from pixel counting")));
            }
        }
    }
    let mut gt = LabelMap::filled(4, 4, 0);
    let mut pred = LabelMap::filled(4, 4, 0);
    for i in 1..3 {
        for j in 1..3 {
            gt.set(i, j, 1);
            pred.set(i, j + 1, 1);
        }
    }
    let block = iou(&pred, &gt, 2, &[1]).map_err(err)?.per_class[1];
    Ok((block == Some(1.0 / 3.0), format!("10 random maps exact, shifted block {block:?}")))
}

fn group_norms(model: &ForecastModel, data: &[SceneSequence], config: &TrainConfig) -> Result<Vec<(String, f64)>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (grads, _) = batch_gradients(model, data, config, None, &mut rng, 1).map_err(err)?;
    let mut norms: Vec<(String, f64)> = Vec::new();
    for ((name, _), g) in model.params().iter().zip(&grads) {
        let group = param_group(name).to_string();
        match norms.iter_mut().find(|(n, _)| *n == group) {
            Some((_, v)) => *v += g.sum_sq(),
            None => norms.push((group, g.sum_sq())),
        }
    }
    Ok(norms)
}

fn smoke() -> Outcome {
    let start = Instant::now();
    let data = generate_dataset(&SceneSpec::default(), 4, 16).map_err(err)?;
    let model_config = ModelConfig {
        seg: SegMode::Learned { width: 16 },
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        base_lr: 0.01,
        max_iterations: 500,
        train_seg: true,
        log_every: 0,
        loss_weights: LossWeights::annealed(500),
        ..TrainConfig::default()
    };

    let mut stepped = ForecastModel::new(model_config.clone(), 0).map_err(err)?;
    let options = TrainOptions {
        stop_at: Some(1),
        ..TrainOptions::default()
    };
    train(&mut stepped, &data.train, &config, options).map_err(err)?;
    let norms = group_norms(&stepped, &data.train, &config)?;
    let dead: Vec<&str> = norms.iter().filter(|(_, v)| *v <= 0.0).map(|(n, _)| n.as_str()).collect();

    let mut model = ForecastModel::new(model_config, 0).map_err(err)?;
    let offset = 1 << 20;
    let before = validation_seg_loss(&model, &data.val, &config, None, offset).map_err(err)?;
    train(&mut model, &data.train, &config, TrainOptions::default()).map_err(err)?;
    let after = validation_seg_loss(&model, &data.val, &config, None, offset).map_err(err)?;
    let drop = 1.0 - after / before;
    let secs = start.elapsed().as_secs_f64();
    let groups: Vec<&str> = norms.iter().map(|(n, _)| n.as_str()).collect();
    Ok((
        drop >= 0.30 && dead.is_empty() && secs < 600.0,
        format!(
            "val seg_loss {before:.4} -> {after:.4} ({:.1}% lower), groups with gradient {groups:?}, dead {dead:?}",
            100.0 * drop
        ),
    ))
}

fn eval_config(s: usize, pairs: usize) -> EvalConfig {
    EvalConfig {
        s,
        mode: ForecastMode::SingleStep,
        step_size: 1,
        num_pairs: pairs,
        inpaint: false,
        baseline: None,
    }
}

fn main_model_order(model: &ForecastModel, setup: &Setup<'_>) -> Outcome {
    let ev = eval_config(3, 4);
    let ours = evaluate_variant(setup, model, &ev).map_err(err)?;
    let baseline = |b| evaluate(Some(model), setup.val, &EvalConfig { baseline: Some(b), ..ev }, None, 0);
    let warp_last = baseline(Baseline::WarpLast(WarpLastFlow::Estimated)).map_err(err)?;
    let copy_last = baseline(Baseline::CopyLast).map_err(err)?;
    let (m, w, c) = (ours.mean_iou, warp_last.mean_iou, copy_last.mean_iou);
    let ok = m - w >= 0.02 && w - c >= 0.02 && ours.mean_iou_mo > warp_last.mean_iou_mo;
    Ok((
        ok,
        format!(
            "IoU model {m:.4} warp-last {w:.4} copy-last {c:.4}; IoU-MO model {:.4} warp-last {:.4} copy-last {:.4}",
            ours.mean_iou_mo, warp_last.mean_iou_mo, copy_last.mean_iou_mo
        ),
    ))
}

fn summarize(t: &Table) -> String {
    let rows: Vec<String> = t.rows.iter().map(|(n, r)| format!("{n} {:.4}", r.mean_iou)).collect();
    let mut s = rows.join(", ");
    for (c, ok) in &t.checks {
        if !ok {
            s.push_str(&format!("; violated {c}"));
        }
    }
    for n in &t.notes {
        s.push_str(&format!("; {n}"));
    }
    s
}

fn gap_table(t: Table, hi: &str, others: &[&str], gap: f64) -> Outcome {
    let a = t.iou(hi).ok_or("missing row")?;
    let mut ok = true;
    for o in others {
        ok &= a - t.iou(o).ok_or("missing row")? >= gap;
    }
    Ok((ok, summarize(&t)))
}

fn mid_term(t: Table, model: &ForecastModel, data: &[SceneSequence]) -> Outcome {
    let ran = t.rows.len() == 2 && t.rows.iter().all(|(_, r)| r.mean_iou.is_finite());
    let mut identical = true;
    for (k, seq) in data.iter().enumerate().take(4) {
        let single = ForecastRequest::last_frame(seq.len(), 3, 1, 4).map_err(err)?;
        let ar = ForecastRequest {
            mode: ForecastMode::AutoRegressive { sub_step: 3 },
            ..single
        };
        let run = |req: &ForecastRequest| -> Result<Vec<u64>, String> {
            let input = SequenceInput {
                seq,
                seq_id: k,
                features: FeatureSource::Live,
            };
            let tape = Tape::new();
            let params = Binder::frozen(&tape, model.params());
            let out = forecast(model, &params, input, req).map_err(err)?;
            let v = out.probs.value().data().iter().map(|x| x.to_bits()).collect();
            Ok(v)
        };
        identical &= run(&single)? == run(&ar)?;
    }
    Ok((
        ran && identical,
        format!("{}; one sub-step bit-identical: {identical}", summarize(&t)),
    ))
}

fn inpainting(model: &ForecastModel, setup: &Setup<'_>) -> Outcome {
    let off = evaluate_variant(setup, model, &eval_config(3, 4)).map_err(err)?;
    let on = evaluate_variant(setup, model, &EvalConfig { inpaint: true, ..eval_config(3, 4) }).map_err(err)?;
    let delta = on.mean_iou - off.mean_iou;
    Ok((delta >= 0.0, format!("IoU {:.4} -> {:.4}, delta {delta:+.4}", off.mean_iou, on.mean_iou)))
}

fn determinism() -> Outcome {
    let spec = SceneSpec {
        width: 48,
        height: 32,
        num_frames: 10,
        sprites: 4,
        sprite_size: (3, 5),
        ..SceneSpec::default()
    };
    let data = generate_dataset(&spec, 3, 2).map_err(err)?;
    let model_config = ModelConfig {
        flow: FlowNetConfig {
            width1: 4,
            width2: 6,
            features: 6,
        },
        lstm_hidden: Some(6),
        fusion_width: 6,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        base_lr: 0.01,
        max_iterations: 10,
        unroll_pairs: 2,
        log_every: 0,
        loss_weights: LossWeights::annealed(10),
        ..TrainConfig::default()
    };
    let ev = eval_config(3, 2);
    let run = || -> Result<(ForecastModel, Vec<u8>, String), String> {
        let mut model = ForecastModel::new(model_config.clone(), 0).map_err(err)?;
        let s = train(&mut model, &data.train, &config, TrainOptions::default()).map_err(err)?;
        let report = evaluate(Some(&model), &data.val, &ev, None, 0).map_err(err)?.to_text();
        Ok((model, s.checkpoint.to_bytes().map_err(err)?, report))
    };
    let (model, c1, r1) = run()?;
    let (_, c2, r2) = run()?;
    let same_run = c1 == c2 && r1 == r2;

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("m.fckp");
    Checkpoint::fresh(model.params().clone()).save(&path).map_err(err)?;
    let restored = ForecastModel::from_params(Checkpoint::load(&path).map_err(err)?.params, 6, 0.0).map_err(err)?;
    let probe = |m: &ForecastModel| -> Result<Vec<u64>, String> {
        let tape = Tape::new();
        let params = Binder::frozen(&tape, m.params());
        let input = SequenceInput {
            seq: &data.val[0],
            seq_id: 0,
            features: FeatureSource::Live,
        };
        let out = forecast(m, &params, input, &ev.request(10).map_err(err)?).map_err(err)?;
        let mut v: Vec<u64> = out.probs.value().data().iter().map(|x| x.to_bits()).collect();
        v.extend(out.flows[0].full.value().data().iter().map(|x| x.to_bits()));
        Ok(v)
    };
    let forward = probe(&model)? == probe(&restored)?;

    let seq = &data.val[1];
    let seq_dir = dir.path().join("seq");
    write_sequence(seq, &seq_dir).map_err(err)?;
    let mut files = read_sequence(&seq_dir).map_err(err)? == *seq;
    let mut rng = ChaCha8Rng::seed_from_u64(114);
    let flow = Tensor::from_vec(&[1, 2, 5, 7], (0..70).map(|_| f64::from(rng.gen_range(-50.0f32..50.0))).collect())
        .map_err(err)?;
    write_flo(&dir.path().join("x.flo"), &flow).map_err(err)?;
    files &= read_flo(&dir.path().join("x.flo")).map_err(err)? == flow;
    let rgb = Tensor::from_vec(&[3, 5, 7], (0..105).map(|_| f64::from(rng.gen_range(0u8..=255)) / 255.0).collect())
        .map_err(err)?;
    write_ppm(&dir.path().join("x.ppm"), &rgb).map_err(err)?;
    files &= read_ppm(&dir.path().join("x.ppm")).map_err(err)? == rgb;
    let labels = LabelMap::new(5, 7, (0..35).map(|_| rng.gen()).collect()).map_err(err)?;
    write_pgm(&dir.path().join("x.pgm"), &labels).map_err(err)?;
    files &= read_pgm(&dir.path().join("x.pgm")).map_err(err)? == labels;

    Ok((
        same_run && forward && files,
        format!("identical runs: {same_run}, checkpoint forward: {forward}, file round-trips: {files}"),
    ))
}

fn main() {
    let total = Instant::now();
    let mut report = Report { failed: 0, unexpected: 0 };

    report.run(1, "warp gradients", warp_gradients);
    report.run(2, "warp oracles", warp_oracles);
    report.run(3, "oracle decomposition", decomposition);
    report.run(4, "loss suite", losses);
    report.run(5, "metrics oracle", metrics_oracle);
    report.run(6, "end-to-end descent", smoke);

    // shared data and frozen encoder for the trained-model criteria
    let start = Instant::now();
    let data: Dataset = generate_dataset(&SceneSpec::default(), 64, 16).expect("dataset");
    let mut encoder = ForecastModel::new(ModelConfig::default(), 0).expect("model");
    let pre = TrainConfig {
        base_lr: 0.1,
        max_iterations: 4000,
        log_every: 0,
        ..TrainConfig::default()
    };
    pretrain_flow(&mut encoder, &data.train, &pre, None).expect("pretraining");
    let flow_params = encoder.params().clone();
    let cache = FeatureCache::new();
    let setup = Setup::new(&data.train, &data.val, &flow_params, &cache);
    println!("     flow encoder pretrained ({:.1} s)", start.elapsed().as_secs_f64());

    let model_config = ModelConfig {
        seg: SegMode::Oracle { smoothing: 0.1 },
        ..ModelConfig::default()
    };
    let budget = |it: u64| TrainConfig {
        base_lr: 0.01,
        max_iterations: it,
        unroll_pairs: 4,
        flow_supervision: 1.0,
        log_every: 0,
        loss_weights: LossWeights::annealed(it),
        ..TrainConfig::default()
    };
    let base = Variant::new("base", model_config.clone(), budget(1500));
    // step sizes 1 and 3 need a window divisible by 3
    let wide = Variant::new("wide", model_config.clone(), TrainConfig { unroll_pairs: 6, ..budget(1500) });
    let main_variant = Variant::new("main", model_config, budget(5000));

    let start = Instant::now();
    let main_model = train_variant(&setup, &main_variant, 0).expect("main model");
    println!("     main model trained ({:.1} s)", start.elapsed().as_secs_f64());

    report.run(7, "forecast beats baselines", || main_model_order(&main_model, &setup));
    report.run(8, "fusion by warping", || {
        let t = fusion_table(&setup, &base, 0).map_err(err)?;
        gap_table(t, &FusionKind::Warp.to_string(), &["concat", "add"], 0.02)
    });
    report.run(9, "recurrent aggregation", || {
        gap_table(lstm_table(&setup, &base, 0).map_err(err)?, "lstm", &["no-lstm"], 0.01)
    });
    report.run(10, "step size", || {
        let t = step_table(&setup, &wide, 0).map_err(err)?;
        Ok((t.passed() && t.rows.len() == 3, summarize(&t)))
    });
    report.run(11, "mid-term modes", || {
        let t = mid_term_table(&setup, &wide, 3, 0).map_err(err)?;
        mid_term(t, &main_model, &data.val)
    });
    report.run(12, "horizon degradation", || {
        let t = horizon_table(&setup, &base, &[1, 3, 9], 0).map_err(err)?;
        Ok((t.passed(), summarize(&t)))
    });
    report.run(13, "inpainting", || inpainting(&main_model, &setup));
    report.run(14, "determinism and persistence", determinism);

    println!(
        "{} of 14 criteria passed, {} unexpected failures ({:.0} s)",
        14 - report.failed,
        report.unexpected,
        total.elapsed().as_secs_f64()
    );
    if report.unexpected > 0 {
        std::process::exit(1);
    }
}
