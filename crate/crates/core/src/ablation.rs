//! Variant grids that share one pretrained flow encoder and compare
//! forecast IoU under equal training budgets.

use std::cell::RefCell;
use std::fmt::Write as _;

use crate::error::Result;
use crate::eval::{evaluate, EvalConfig};
use crate::forecast::{FeatureCache, ForecastMode};
use crate::metrics::IouReport;
use crate::model::{FusionKind, ForecastModel, ModelConfig};
use crate::params::ParamStore;
use crate::scenes::SceneSequence;
use crate::train::{train, TrainConfig, TrainOptions};

/// Cache keys of validation sequences start here, so that training and
/// validation features never collide.
pub const VAL_ID_OFFSET: usize = 1 << 20;

/// Data and frozen encoder shared by every variant of a grid.
pub struct Setup<'a> {
    pub train: &'a [SceneSequence],
    pub val: &'a [SceneSequence],
    /// Pretrained flow encoder parameters.
    pub flow_params: &'a ParamStore,
    /// Features of the frozen encoder; must have been filled (if at all)
    /// by a model carrying `flow_params`.
    pub cache: &'a FeatureCache,
    /// Reports of finished runs, so rows shared between tables train once.
    results: RefCell<Vec<(String, IouReport)>>,
}

impl<'a> Setup<'a> {
    pub fn new(
        train: &'a [SceneSequence],
        val: &'a [SceneSequence],
        flow_params: &'a ParamStore,
        cache: &'a FeatureCache,
    ) -> Self {
        Setup {
            train,
            val,
            flow_params,
            cache,
            results: RefCell::new(Vec::new()),
        }
    }

    fn recall(&self, key: &str) -> Option<IouReport> {
        let results = self.results.borrow();
        results.iter().find(|(k, _)| k == key).map(|(_, r)| r.clone())
    }

    fn remember(&self, key: String, report: &IouReport) {
        self.results.borrow_mut().push((key, report.clone()));
    }
}

fn run_key(model: &ModelConfig, train: &TrainConfig, eval: &EvalConfig, seed: u64) -> String {
    format!("{model:?}|{train:?}|{eval:?}|{seed}")
}

/// Train a variant and evaluate it under `eval`, reusing an earlier
/// identical run.
fn report_for(setup: &Setup<'_>, variant: &Variant, eval: &EvalConfig, seed: u64) -> Result<IouReport> {
    let key = run_key(&variant.model, &variant.train, eval, seed);
    if let Some(r) = setup.recall(&key) {
        return Ok(r);
    }
    let model = train_variant(setup, variant, seed)?;
    let report = evaluate_variant(setup, &model, eval)?;
    setup.remember(key, &report);
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Variant {
    /// Variant whose evaluation mirrors its training setup.
    pub fn new(name: &str, model: ModelConfig, train: TrainConfig) -> Self {
        let eval = EvalConfig {
            s: train.future_jump,
            mode: ForecastMode::SingleStep,
            step_size: train.step_size,
            num_pairs: train.unroll_pairs,
            inpaint: false,
            baseline: None,
        };
        Variant {
            name: name.to_string(),
            model,
            train,
            eval,
        }
    }
}

/// Train a variant from `seed` on top of the shared encoder.
pub fn train_variant(setup: &Setup<'_>, variant: &Variant, seed: u64) -> Result<ForecastModel> {
    let mut model = ForecastModel::new(variant.model.clone(), seed)?;
    model.load_flow_params(setup.flow_params)?;
    let options = TrainOptions {
        cache: Some(setup.cache),
        ..TrainOptions::default()
    };
    train(&mut model, setup.train, &variant.train, options)?;
    Ok(model)
}

pub fn evaluate_variant(setup: &Setup<'_>, model: &ForecastModel, eval: &EvalConfig) -> Result<IouReport> {
    evaluate(Some(model), setup.val, eval, Some(setup.cache), VAL_ID_OFFSET)
}

/// One comparison: rows of results and named ordering checks.
#[derive(Clone, Debug)]
pub struct Table {
    pub title: String,
    pub rows: Vec<(String, IouReport)>,
    pub checks: Vec<(String, bool)>,
    pub notes: Vec<String>,
}

impl Table {
    pub fn new(title: &str) -> Self {
        Table {
            title: title.to_string(),
            rows: Vec::new(),
            checks: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn iou(&self, row: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == row).map(|(_, r)| r.mean_iou)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\nvariant iou iou_mo\n", self.title);
        for (name, r) in &self.rows {
            let _ = writeln!(s, "{name} {:.6} {:.6}", r.mean_iou, r.mean_iou_mo);
        }
        for (check, ok) in &self.checks {
            let _ = writeln!(s, "{} {check}", if *ok { "PASS" } else { "FAIL" });
        }
        for note in &self.notes {
            let _ = writeln!(s, "NOTE {note}");
        }
        s
    }
}

fn run_rows(setup: &Setup<'_>, title: &str, variants: &[Variant], seed: u64) -> Result<Table> {
    let mut table = Table::new(title);
    for v in variants {
        table.rows.push((v.name.clone(), report_for(setup, v, &v.eval, seed)?));
    }
    Ok(table)
}

fn check_order(table: &mut Table, hi: &str, lo: &str, strict: bool) {
    if let (Some(a), Some(b)) = (table.iou(hi), table.iou(lo)) {
        let (ok, op) = if strict { (a > b, ">") } else { (a >= b, ">=") };
        table.checks.push((format!("{hi} {op} {lo}"), ok));
    }
}

/// Warp against concatenation and addition fusion.
pub fn fusion_table(setup: &Setup<'_>, base: &Variant, seed: u64) -> Result<Table> {
    let variants: Vec<Variant> = [FusionKind::Warp, FusionKind::Concat, FusionKind::Add]
        .into_iter()
        .map(|fusion| Variant {
            name: fusion.to_string(),
            model: ModelConfig { fusion, ..base.model.clone() },
            ..base.clone()
        })
        .collect();
    let mut t = run_rows(setup, "fusion", &variants, seed)?;
    check_order(&mut t, "warp", "concat", true);
    check_order(&mut t, "warp", "add", true);
    Ok(t)
}

/// Recurrent aggregation against the last pair's features alone.
pub fn lstm_table(setup: &Setup<'_>, base: &Variant, seed: u64) -> Result<Table> {
    let hidden = base.model.lstm_hidden.or(ModelConfig::default().lstm_hidden);
    let variants = [
        Variant {
            name: "lstm".into(),
            model: ModelConfig { lstm_hidden: hidden, ..base.model.clone() },
            ..base.clone()
        },
        Variant {
            name: "no-lstm".into(),
            model: ModelConfig { lstm_hidden: None, ..base.model.clone() },
            ..base.clone()
        },
    ];
    let mut t = run_rows(setup, "recurrence", &variants, seed)?;
    check_order(&mut t, "lstm", "no-lstm", true);
    Ok(t)
}

fn with_window(base: &Variant, name: String, step_size: usize, pairs: usize) -> Variant {
    let train = TrainConfig {
        step_size,
        unroll_pairs: pairs,
        ..base.train.clone()
    };
    Variant::new(&name, base.model.clone(), train)
}

/// Number of input pairs at the base step size: 1, half and all of the
/// base window.
pub fn time_table(setup: &Setup<'_>, base: &Variant, seed: u64) -> Result<Table> {
    let n = base.train.unroll_pairs;
    let mut counts = vec![1, n.div_ceil(2), n];
    counts.dedup();
    let variants: Vec<Variant> = counts
        .iter()
        .map(|&p| with_window(base, format!("pairs-{p}"), base.train.step_size, p))
        .collect();
    let mut t = run_rows(setup, "time", &variants, seed)?;
    let last = format!("pairs-{n}");
    check_order(&mut t, &last, "pairs-1", false);
    Ok(t)
}

/// Fixed time span covered at step sizes 1, 3 and the whole span.
pub fn step_table(setup: &Setup<'_>, base: &Variant, seed: u64) -> Result<Table> {
    let span = base.train.unroll_pairs * base.train.step_size;
    let mut steps = vec![1];
    if span % 3 == 0 && span > 3 {
        steps.push(3);
    }
    if span > 1 {
        steps.push(span);
    }
    let variants: Vec<Variant> = steps
        .iter()
        .map(|&k| with_window(base, format!("step-{k}"), k, span / k))
        .collect();
    let mut t = run_rows(setup, "step size", &variants, seed)?;
    for w in variants.windows(2) {
        check_order(&mut t, &w[0].name, &w[1].name, false);
    }
    Ok(t)
}

/// Mid-term forecasting at `factor` times the base jump: one model trained
/// for the long jump against the base-jump model applied repeatedly.
/// Both use the base jump as step size so that every input frame after
/// the last observed one is a prediction.
pub fn mid_term_table(setup: &Setup<'_>, base: &Variant, factor: usize, seed: u64) -> Result<Table> {
    let s = base.train.future_jump;
    let span = base.train.unroll_pairs * base.train.step_size;
    let pairs = (span / s).max(1);
    let short = with_window(base, "short".into(), s, pairs);
    let long_train = TrainConfig {
        future_jump: s * factor,
        ..short.train.clone()
    };
    let long = Variant::new("single-step", base.model.clone(), long_train);
    let mut table = Table::new("mid-term");
    table
        .rows
        .push(("single-step".into(), report_for(setup, &long, &long.eval, seed)?));
    let ar = EvalConfig {
        mode: ForecastMode::AutoRegressive { sub_step: s },
        ..long.eval
    };
    table
        .rows
        .push(("auto-regressive".into(), report_for(setup, &short, &ar, seed)?));
    let (a, b) = (table.rows[0].1.mean_iou, table.rows[1].1.mean_iou);
    table
        .notes
        .push(format!("|single-step - auto-regressive| = {:.6}", (a - b).abs()));
    Ok(table)
}

/// The base variant retrained for each future jump in `jumps`, which
/// should be increasing; IoU should not rise with the horizon.
pub fn horizon_table(setup: &Setup<'_>, base: &Variant, jumps: &[usize], seed: u64) -> Result<Table> {
    let variants: Vec<Variant> = jumps
        .iter()
        .map(|&s| {
            let train = TrainConfig {
                future_jump: s,
                ..base.train.clone()
            };
            Variant::new(&format!("s-{s}"), base.model.clone(), train)
        })
        .collect();
    let mut t = run_rows(setup, "horizon", &variants, seed)?;
    for w in variants.windows(2) {
        check_order(&mut t, &w[0].name, &w[1].name, false);
    }
    Ok(t)
}
