use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use flowcast::ablation::{self, Setup, Variant, VAL_ID_OFFSET};
use flowcast::checkpoint::Checkpoint;
use flowcast::eval::{evaluate_sequences, Baseline, EvalConfig};
use flowcast::forecast::{
    predict_labels, FeatureCache, FeatureSource, ForecastMode, ForecastRequest, SequenceInput, WarpLastFlow,
};
use flowcast::metrics::IouCounts;
use flowcast::model::ForecastModel;
use flowcast::scenes::{
    generate_dataset, read_dataset, read_sequence, write_dataset, write_flo, write_pgm, write_ppm, SceneSequence,
};
use flowcast::segmap::{LabelMap, VOID};
use flowcast::train::{flow_endpoint_error, pretrain_flow, train, TrainOptions};
use flowcast::{Error, Result, Tensor};

mod config;

use config::{io_err, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "flowcast", version, about = "Semantic forecasting by warping segmentations along predicted flow")]
struct Cli {
    /// Run configuration of key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Serialize all work. Runs are single-threaded already, so this only
    /// records the request in the echoed configuration.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train and validation sequences.
    GenData,
    /// Supervised pretraining of the flow encoder on ground-truth flow.
    PretrainFlow(DataArgs),
    /// End-to-end training of the forecaster.
    Train(TrainArgs),
    /// IoU of forecasts or baselines on the validation sequences.
    Eval(EvalArgs),
    /// Equal-budget comparison grids over fusion, recurrence, time, step
    /// size and mid-term mode.
    Ablate(AblateArgs),
    /// Forecast one sequence and write labels, flow and a visualization.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset root; defaults to the configured data_dir.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Initialise the flow encoder from this checkpoint.
    #[arg(long)]
    flow_checkpoint: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Single,
    Auto,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum BaselineArg {
    CopyLast,
    /// Extrapolate the flow encoder's estimate over the last s frames.
    WarpLast,
    /// Extrapolate the ground-truth flow over the last s frames.
    WarpLastGt,
}

#[derive(Args, Debug, Clone)]
struct ForecastArgs {
    #[arg(long, value_enum, default_value = "single")]
    mode: ModeArg,
    /// Future jump; defaults to future_jump.
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    step_size: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    /// Auto-regressive sub-step; defaults to half the jump when even.
    #[arg(long)]
    sub_step: Option<usize>,
    /// Copy the current segmentation where the warp has no source.
    #[arg(long)]
    inpaint: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    forecast: ForecastArgs,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Shared flow encoder; pretrained in-process when absent.
    #[arg(long)]
    flow_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of one sequence.
    #[arg(long)]
    sequence: PathBuf,
    /// Last observed frame; defaults to the last frame that leaves room
    /// for the jump.
    #[arg(long)]
    t: Option<usize>,
    #[command(flatten)]
    forecast: ForecastArgs,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Numerical { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::PretrainFlow(a) => cmd_pretrain(&cfg, &data_dir(&cfg, &a), out),
        Command::Train(a) => cmd_train(&cfg, &a, out),
        Command::Eval(a) => cmd_eval(&cfg, &a, out),
        Command::Ablate(a) => cmd_ablate(&cfg, &a, out),
        Command::Predict(a) => cmd_predict(&cfg, &a, out),
    }
}

fn data_dir(cfg: &RunConfig, a: &DataArgs) -> PathBuf {
    a.data.clone().unwrap_or_else(|| cfg.data_dir.clone())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn open_log(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| io_err(path, e))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.scene.validate()?;
    let ds = generate_dataset(&cfg.scene, cfg.train_sequences, cfg.val_sequences)?;
    write_dataset(&ds, out)?;
    cfg.echo(out)?;
    info!("wrote {} train and {} val sequences to {}", ds.train.len(), ds.val.len(), out.display());
    Ok(())
}

fn new_model(cfg: &RunConfig, flow_checkpoint: Option<&Path>) -> Result<ForecastModel> {
    let mut model = ForecastModel::new(cfg.model_config()?, cfg.seed)?;
    let path = flow_checkpoint.or((!cfg.flow_checkpoint.as_os_str().is_empty()).then_some(cfg.flow_checkpoint.as_path()));
    if let Some(p) = path {
        model.load_flow_params(&Checkpoint::load(p)?.params)?;
    }
    Ok(model)
}

fn load_model(path: &Path, cfg: &RunConfig, num_classes: usize) -> Result<ForecastModel> {
    ForecastModel::from_params(Checkpoint::load(path)?.params, num_classes, cfg.oracle_smoothing)
}

fn cmd_pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = read_dataset(data)?;
    cfg.echo(out)?;
    let mut model = new_model(cfg, None)?;
    let mut log = open_log(&out.join("pretrain.log"))?;
    let summary = pretrain_flow(&mut model, &ds.train, &cfg.pretrain_config(), Some(&mut log))?;
    summary.checkpoint.save(&out.join("flow.fckp"))?;
    let mut report = String::new();
    for &k in &cfg.pretrain_strides {
        let epe = flow_endpoint_error(&model, &ds.val, k)?;
        report.push_str(&format!("stride {k} epe {epe:.6}\n"));
    }
    write_text(&out.join("flow_eval.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs, out: &Path) -> Result<()> {
    let ds = read_dataset(&data_dir(cfg, &a.data))?;
    cfg.echo(out)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut model = match &resume {
        Some(c) => {
            let m = ForecastModel::from_params(c.params.clone(), cfg.scene.num_classes(), cfg.oracle_smoothing)?;
            if m.config() != &cfg.model_config()? {
                return Err(Error::Version("resume checkpoint does not match the configured model".into()));
            }
            m
        }
        None => new_model(cfg, a.flow_checkpoint.as_deref())?,
    };
    let tc = cfg.train_config();
    let cache = FeatureCache::new();
    let mut log = if resume.is_some() {
        fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(out.join("train.log"))
            .map_err(|e| io_err(&out.join("train.log"), e))?
    } else {
        open_log(&out.join("train.log"))?
    };
    let options = TrainOptions {
        log: Some(&mut log),
        checkpoint_path: Some(out.join("model.fckp")),
        resume,
        cache: cfg.cache_features.then_some(&cache),
        stop_at: None,
    };
    let summary = train(&mut model, &ds.train, &tc, options)?;
    log.flush().map_err(|e| io_err(&out.join("train.log"), e))?;
    println!(
        "trained {} iterations, loss {:.6} -> {:.6}",
        summary.iterations, summary.first_loss, summary.last_loss
    );
    Ok(())
}

fn eval_config(cfg: &RunConfig, f: &ForecastArgs, baseline: Option<Baseline>) -> EvalConfig {
    let s = f.s.unwrap_or(cfg.future_jump);
    let mode = match f.mode {
        ModeArg::Single => ForecastMode::SingleStep,
        ModeArg::Auto => ForecastMode::AutoRegressive {
            sub_step: f
                .sub_step
                .or((cfg.sub_step > 0).then_some(cfg.sub_step))
                .unwrap_or(if s % 2 == 0 { s / 2 } else { s }),
        },
    };
    EvalConfig {
        s,
        mode,
        step_size: f.step_size.unwrap_or(cfg.step_size),
        num_pairs: f.pairs.unwrap_or(cfg.unroll_pairs),
        inpaint: f.inpaint,
        baseline,
    }
}

fn config_tag(e: &EvalConfig) -> String {
    let what = match e.baseline {
        Some(Baseline::CopyLast) => "copy-last".to_string(),
        Some(Baseline::WarpLast(WarpLastFlow::Estimated)) => "warp-last".to_string(),
        Some(Baseline::WarpLast(WarpLastFlow::GroundTruth)) => "warp-last-gt".to_string(),
        None => match e.mode {
            ForecastMode::SingleStep => format!("single_step{}_pairs{}", e.step_size, e.num_pairs),
            ForecastMode::AutoRegressive { sub_step } => {
                format!("auto{sub_step}_step{}_pairs{}", e.step_size, e.num_pairs)
            }
        },
    };
    format!("s{}_{what}{}", e.s, if e.inpaint { "_inpaint" } else { "" })
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs, out: &Path) -> Result<()> {
    let ds = read_dataset(&data_dir(cfg, &a.data))?;
    let first = ds
        .val
        .first()
        .ok_or_else(|| Error::Usage("dataset has no validation sequences".into()))?;
    let num_classes = first.spec.num_classes();
    let baseline = a.baseline.map(|b| match b {
        BaselineArg::CopyLast => Baseline::CopyLast,
        BaselineArg::WarpLast => Baseline::WarpLast(WarpLastFlow::Estimated),
        BaselineArg::WarpLastGt => Baseline::WarpLast(WarpLastFlow::GroundTruth),
    });
    let model = match &a.checkpoint {
        Some(p) => Some(load_model(p, cfg, num_classes)?),
        None if matches!(baseline, Some(Baseline::CopyLast | Baseline::WarpLast(WarpLastFlow::GroundTruth))) => None,
        None => return Err(Error::Usage("this evaluation needs --checkpoint".into())),
    };
    let ec = eval_config(cfg, &a.forecast, baseline);
    cfg.echo(out)?;
    let per_seq = evaluate_sequences(model.as_ref(), &ds.val, &ec, None, VAL_ID_OFFSET)?;
    let moving = first.spec.moving_classes();
    let mut total = IouCounts::new(num_classes)?;
    let mut lines = String::new();
    for (k, c) in per_seq.iter().enumerate() {
        total.merge(c)?;
        let r = c.report(&moving);
        lines.push_str(&format!("val/seq_{k:04} {:.6} {:.6}\n", r.mean_iou, r.mean_iou_mo));
    }
    let tag = config_tag(&ec);
    let report = total.report(&moving).to_text();
    write_text(&out.join(format!("report_{tag}.txt")), &report)?;
    write_text(&out.join(format!("sequences_{tag}.txt")), &lines)?;
    print!("{report}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, a: &AblateArgs, out: &Path) -> Result<()> {
    let ds = read_dataset(&data_dir(cfg, &a.data))?;
    cfg.echo(out)?;
    let flow_params = match a.flow_checkpoint.as_deref().or(
        (!cfg.flow_checkpoint.as_os_str().is_empty()).then_some(cfg.flow_checkpoint.as_path()),
    ) {
        Some(p) => Checkpoint::load(p)?.params,
        None => {
            let mut model = new_model(cfg, None)?;
            let mut log = open_log(&out.join("pretrain.log"))?;
            let s = pretrain_flow(&mut model, &ds.train, &cfg.pretrain_config(), Some(&mut log))?;
            s.checkpoint.save(&out.join("flow.fckp"))?;
            s.checkpoint.params
        }
    };
    let cache = FeatureCache::new();
    let setup = Setup::new(&ds.train, &ds.val, &flow_params, &cache);
    let base = Variant::new("base", cfg.model_config()?, cfg.train_config());
    let tables = [
        ("fusion", ablation::fusion_table(&setup, &base, cfg.seed)?),
        ("recurrence", ablation::lstm_table(&setup, &base, cfg.seed)?),
        ("time", ablation::time_table(&setup, &base, cfg.seed)?),
        ("step_size", ablation::step_table(&setup, &base, cfg.seed)?),
        ("mid_term", ablation::mid_term_table(&setup, &base, cfg.mid_term_factor, cfg.seed)?),
    ];
    for (name, t) in &tables {
        let text = t.to_text();
        write_text(&out.join(format!("table_{name}.txt")), &text)?;
        println!("{text}");
    }
    Ok(())
}

fn class_color(label: u8) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.5, 0.25, 0.5],
        [0.27, 0.27, 0.27],
        [0.86, 0.08, 0.24],
        [0.0, 0.0, 0.56],
        [0.42, 0.56, 0.14],
        [0.98, 0.67, 0.12],
        [0.27, 0.51, 0.71],
        [0.6, 0.98, 0.6],
    ];
    if label == VOID {
        [0.0; 3]
    } else {
        PALETTE[usize::from(label) % PALETTE.len()]
    }
}

/// Current frame, forecast labels and ground-truth target side by side.
fn visualization(frame: &Tensor, pred: &LabelMap, target: &LabelMap) -> Result<Tensor> {
    let (h, w) = (pred.height(), pred.width());
    let mut out = Tensor::zeros(&[3, h, 3 * w]);
    let data = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            for c in 0..3 {
                let row = c * h * 3 * w + i * 3 * w;
                data[row + j] = frame.data()[c * h * w + p];
                data[row + w + j] = class_color(pred.get(i, j))[c];
                data[row + 2 * w + j] = class_color(target.get(i, j))[c];
            }
        }
    }
    Ok(out)
}

fn cmd_predict(cfg: &RunConfig, a: &PredictArgs, out: &Path) -> Result<()> {
    let seq: SceneSequence = read_sequence(&a.sequence)?;
    let model = load_model(&a.checkpoint, cfg, seq.spec.num_classes())?;
    let ec = eval_config(cfg, &a.forecast, None);
    let t = match a.t {
        Some(t) => t,
        None => ec.request(seq.len())?.t,
    };
    let req = ForecastRequest {
        t,
        s: ec.s,
        mode: ec.mode,
        step_size: ec.step_size,
        num_pairs: ec.num_pairs,
        inpaint: ec.inpaint,
    };
    let input = SequenceInput {
        seq: &seq,
        seq_id: 0,
        features: FeatureSource::Live,
    };
    let (labels, flow) = predict_labels(&model, input, &req)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    cfg.echo(out)?;
    write_pgm(&out.join("prediction.pgm"), &labels)?;
    write_flo(&out.join("flow.flo"), &flow)?;
    let frame = seq.frames[t].clone();
    let vis = visualization(&frame, &labels, &seq.labels[t + req.s])?;
    write_ppm(&out.join("visualization.ppm"), &vis)?;
    println!("predicted frame {} from frame {t}", t + req.s);
    Ok(())
}
