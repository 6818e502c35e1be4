//! `fxrn` — train, quantize, analyze, and budget the two gesture-recognition
//! network presets from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fxrn_core::gesturedata::{
    load_accel_dataset, load_image_dataset, stratified_split, synth_accel, synth_video,
    write_manifest, DatasetSplit,
};
use fxrn_core::modelstore::{
    cost_report, load_float_model, load_packed, multiplication_count, packed_payload_bytes,
    save_float_model, write_packed, PACKED_MAGIC,
};
use fxrn_core::netcore::fit::fit_allocation;
use fxrn_core::netcore::{preset, GroupRef, InputShape, MasterModel, Mode, NetworkGraph};
use fxrn_core::sensitivity::{
    direct_sensitivity, escalate_bits, full_quantization, retrain_sensitivity, run_sweep,
    trace_to_csv, BitAllocation, RowKind, SensitivityReport, SensitivityRow,
};
use fxrn_core::trainer::{curve_to_csv, evaluate, train_float};
use fxrn_core::{Error, Result};

use config::{parse_bits_list, parse_config_file, RunConfig};

#[derive(Parser)]
#[command(
    name = "fxrn",
    about = "Fixed-point gesture-network toolkit: train, quantize, analyze sensitivity, pack, and budget",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a float model and write it with its learning curve.
    Train(CommonArgs),
    /// Per-group quantization sensitivity tables (direct and retrained).
    Sensitivity(CommonArgs),
    /// Quantize per an allocation, retrain, pack, and report costs.
    Quantize(CommonArgs),
    /// Print the test miss rate of a model file.
    Eval(CommonArgs),
    /// Fit quantizers and pack without retraining.
    Pack(CommonArgs),
    /// Memory and multiplication budget report.
    Report(CommonArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Flat key=value config file; CLI flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network preset: cambridge-cnn-lstm or smartwatch-lstm-<units>.
    #[arg(long)]
    preset: Option<String>,
    /// Dataset root directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate the seeded synthetic dataset for the preset's modality.
    #[arg(long)]
    synthetic: bool,
    /// Model file (.json float model or .fxrn packed model).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default fxrn-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated bit-widths, e.g. 2 or 2,3,4.
    #[arg(long)]
    bits: Option<String>,
    /// Per-group allocation, e.g. "w:In-L1=2,w:L1=2,w:L1-Out=2,s:In=2,s:L1=4".
    #[arg(long)]
    alloc: Option<String>,
    /// Restrict sensitivity to one group (w:NAME or s:NAME).
    #[arg(long)]
    group: Option<String>,
    /// Greedily raise bit-widths until --target-miss is met.
    #[arg(long)]
    escalate: bool,
    #[arg(long)]
    target_miss: Option<f64>,
    #[arg(long)]
    max_bits: Option<u8>,
    /// Evaluation mode: float or quantized (default: quantized when the
    /// model carries specs).
    #[arg(long)]
    mode: Option<String>,
    /// Frame rate in Hz for cost reports (default 30 image / 10 accel).
    #[arg(long)]
    rate: Option<u32>,
    /// Retraining epochs for quantize and sensitivity runs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Synthetic samples per class (default 40 accel / 5 image).
    #[arg(long)]
    per_class: Option<usize>,
    /// Synthetic noise sigma (default 0.05 accel / 0.02 image).
    #[arg(long)]
    noise: Option<f64>,
    /// Synthetic video frames per sequence.
    #[arg(long)]
    frames: Option<usize>,
    /// Skip the retrained column in sensitivity tables.
    #[arg(long)]
    no_retrain: bool,
    /// Force the joint-quantization column in sensitivity tables.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    final_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// adadelta or nesterov.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let map = parse_config_file(path)?;
        cfg.apply_file(&map)?;
    }
    if let Some(v) = &args.preset {
        cfg.preset = Some(v.clone());
    }
    if let Some(v) = &args.data {
        cfg.data = Some(v.clone());
    }
    if args.synthetic {
        cfg.synthetic = true;
    }
    if let Some(v) = &args.model {
        cfg.model = Some(v.clone());
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &args.bits {
        cfg.bits = parse_bits_list(v)?;
    }
    if let Some(v) = &args.alloc {
        cfg.alloc = Some(v.clone());
    }
    if let Some(v) = &args.group {
        cfg.group = Some(v.clone());
    }
    if args.escalate {
        cfg.escalate = true;
    }
    if let Some(v) = args.target_miss {
        cfg.target_miss = Some(v);
    }
    if let Some(v) = args.max_bits {
        cfg.max_bits = v;
    }
    if let Some(v) = &args.mode {
        cfg.mode = Some(v.clone());
    }
    if let Some(v) = args.rate {
        cfg.rate = Some(v);
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.per_class {
        cfg.per_class = Some(v);
    }
    if let Some(v) = args.noise {
        cfg.noise = Some(v);
    }
    if let Some(v) = args.frames {
        cfg.frames = v;
    }
    if args.no_retrain {
        cfg.retrain = false;
    }
    if args.all {
        cfg.all = Some(true);
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.final_lr {
        cfg.final_lr = v;
    }
    if let Some(v) = args.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = &args.optimizer {
        cfg.optimizer = v.clone();
    }
    if let Some(v) = args.rho {
        cfg.rho = v;
    }
    if let Some(v) = args.eps {
        cfg.eps = v;
    }
    if let Some(v) = args.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.patience {
        cfg.patience = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    Ok(cfg)
}

fn is_image(graph: &NetworkGraph) -> bool {
    matches!(graph.input_shape, InputShape::Image { .. })
}

/// Loads or synthesizes the dataset matching the graph modality and splits
/// it 60/20/20. Returns the split and a dataset id for reports.
fn dataset_for(graph: &NetworkGraph, cfg: &RunConfig) -> Result<(DatasetSplit, String)> {
    let (samples, id) = if let Some(dir) = &cfg.data {
        let samples = if is_image(graph) {
            load_image_dataset(dir, 32)?
        } else {
            load_accel_dataset(dir, None)?
        };
        (samples, dir.display().to_string())
    } else if cfg.synthetic {
        if is_image(graph) {
            let per_class = cfg.per_class.unwrap_or(5);
            let noise = cfg.noise.unwrap_or(0.02);
            let samples = synth_video(per_class, cfg.frames, noise, cfg.seed);
            (samples, format!("synth-video(per_class={per_class},noise={noise},seed={})", cfg.seed))
        } else {
            let per_class = cfg.per_class.unwrap_or(40);
            let noise = cfg.noise.unwrap_or(0.05);
            let samples = synth_accel(8, per_class, (24, 32), noise, cfg.seed);
            (samples, format!("synth-accel(per_class={per_class},noise={noise},seed={})", cfg.seed))
        }
    } else {
        return Err(Error::InvalidArg("need --data DIR or --synthetic".into()));
    };
    let split = stratified_split(samples, [0.6, 0.2, 0.2], cfg.seed)?;
    Ok((split, id))
}

/// Sniffs the model format from the file header.
fn load_model(path: &Path) -> Result<MasterModel> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(PACKED_MAGIC) {
        load_packed(&bytes)
    } else {
        let _ = &bytes;
        load_float_model(path)
    }
}

fn require_model(cfg: &RunConfig) -> Result<MasterModel> {
    let path = cfg
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("need --model FILE".into()))?;
    load_model(path)
}

fn default_rate(graph: &NetworkGraph) -> u32 {
    if is_image(graph) {
        30
    } else {
        10
    }
}

fn allocation_for(cfg: &RunConfig, graph: &NetworkGraph) -> Result<BitAllocation> {
    let alloc = match &cfg.alloc {
        Some(text) => BitAllocation::parse(text)?,
        None => BitAllocation::uniform(graph, cfg.bits[0]),
    };
    alloc.validate_complete(graph)?;
    Ok(alloc)
}

fn write_out(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, content)?;
    Ok(path)
}

fn eval_mode(cfg: &RunConfig, model: &MasterModel) -> Result<Mode> {
    match cfg.mode.as_deref() {
        Some("float") => Ok(Mode::Float),
        Some("quantized") => Ok(Mode::Quantized { strict: false }),
        Some(other) => Err(Error::InvalidArg(format!("mode must be float or quantized, got '{other}'"))),
        None => {
            if model.weight_specs.is_empty() && model.signal_specs.is_empty() {
                Ok(Mode::Float)
            } else {
                Ok(Mode::Quantized { strict: false })
            }
        }
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let preset_name = cfg
        .preset
        .as_ref()
        .ok_or_else(|| Error::InvalidArg("need --preset".into()))?;
    let graph = preset(preset_name)?;
    let (split, dataset_id) = dataset_for(&graph, cfg)?;
    let mut model = MasterModel::new(graph, cfg.seed)?;
    let train_cfg = cfg.train_config()?;
    let outcome = train_float(&mut model, &split, &train_cfg)?;
    let test_miss = evaluate(&model, &split.test, Mode::Float)?;

    let out = &cfg.out;
    fs::create_dir_all(out)?;
    let model_path = out.join("model.json");
    save_float_model(&model, &model_path)?;
    write_out(out, "curve.csv", &curve_to_csv(&outcome.curve))?;
    let all_samples: Vec<_> = split
        .train
        .iter()
        .chain(&split.valid)
        .chain(&split.test)
        .cloned()
        .collect();
    write_manifest(&all_samples, &out.join("data-manifest.txt"))?;
    write_out(out, "train-manifest.txt", &cfg.manifest("train"))?;

    println!("dataset: {dataset_id} ({} train / {} valid / {} test)", split.train.len(), split.valid.len(), split.test.len());
    println!(
        "best valid miss: {}",
        outcome.best_valid_miss.map(|m| format!("{m:.2}%")).unwrap_or_else(|| "n/a".into())
    );
    println!("float test miss: {test_miss:.2}%");
    println!("model: {}", model_path.display());
    Ok(())
}

fn cmd_sensitivity(cfg: &RunConfig) -> Result<()> {
    let model = require_model(cfg)?;
    let (split, dataset_id) = dataset_for(&model.graph, cfg)?;
    let train_cfg = cfg.train_config()?;
    let include_all = cfg.all.unwrap_or_else(|| is_image(&model.graph));

    let report = if let Some(group_text) = &cfg.group {
        let group: GroupRef = group_text.parse()?;
        let baseline = evaluate(&model, &split.test, Mode::Float)?;
        let mut rows = Vec::new();
        for &bits in &cfg.bits {
            let direct = direct_sensitivity(&model, &group, bits, &split, train_cfg.seed)?;
            let retrained = if cfg.retrain {
                Some(retrain_sensitivity(&model, &group, bits, &split, &train_cfg, cfg.epochs)?)
            } else {
                None
            };
            rows.push(SensitivityRow {
                kind: match group {
                    GroupRef { scope: fxrn_core::netcore::GroupScope::Weight, .. } => RowKind::Weight,
                    _ => RowKind::Signal,
                },
                group: group.name.clone(),
                bits,
                direct_miss: direct,
                retrained_miss: retrained,
            });
        }
        SensitivityReport { baseline_float_miss: baseline, seed: train_cfg.seed, dataset_id, rows }
    } else {
        run_sweep(
            &model,
            &split,
            &cfg.bits,
            &train_cfg,
            cfg.retrain,
            cfg.epochs,
            include_all,
            &dataset_id,
        )?
    };

    let out = &cfg.out;
    write_out(out, "sensitivity.csv", &report.to_csv())?;
    write_out(out, "sensitivity.txt", &report.to_text())?;
    write_out(out, "sensitivity-manifest.txt", &cfg.manifest("sensitivity"))?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_quantize(cfg: &RunConfig) -> Result<()> {
    let model = require_model(cfg)?;
    let (split, dataset_id) = dataset_for(&model.graph, cfg)?;
    let train_cfg = cfg.train_config()?;
    let rate = cfg.rate.unwrap_or_else(|| default_rate(&model.graph));

    let mut alloc = allocation_for(cfg, &model.graph)?;
    let mut trace_csv = None;
    if cfg.escalate {
        let target = cfg
            .target_miss
            .ok_or_else(|| Error::InvalidArg("--escalate needs --target-miss".into()))?;
        let outcome = escalate_bits(&model, &alloc, &split, target, cfg.max_bits, train_cfg.seed)?;
        if !outcome.reached {
            eprintln!(
                "warning: target miss {target}% not reached within {} bits (best direct {:.2}%)",
                cfg.max_bits, outcome.final_miss
            );
        }
        trace_csv = Some(trace_to_csv(&outcome.trace));
        alloc = outcome.allocation;
    }

    let outcome = full_quantization(&model, &alloc, &split, &train_cfg, cfg.epochs, rate)?;
    let payload = packed_payload_bytes(&outcome.model)?;
    let savings = outcome.cost.savings_percent().unwrap_or(0.0);

    let out = &cfg.out;
    fs::create_dir_all(out)?;
    let packed_path = out.join("model.fxrn");
    fs::write(&packed_path, &outcome.packed)?;
    // The retrained full-precision master, specs attached, for comparison
    // against the packed view.
    save_float_model(&outcome.model, &out.join("model-master.json"))?;
    write_out(out, "cost.csv", &outcome.cost.to_csv())?;
    write_out(out, "cost.txt", &outcome.cost.to_text())?;
    if let Some(trace) = trace_csv {
        write_out(out, "escalation-trace.csv", &trace)?;
    }
    let summary = format!(
        "dataset = {dataset_id}\nallocation = {alloc}\ndirect_test_miss = {:.2}\nretrained_test_miss = {:.2}\n\
         packed_file_bytes = {}\npacked_payload_bytes = {payload}\nfloat_weight_bytes = {}\nmemory_saved_percent = {savings:.2}\n",
        outcome.direct_test_miss,
        outcome.test_miss,
        outcome.packed.len(),
        outcome.cost.float_weight_bytes,
    );
    write_out(out, "summary.txt", &summary)?;
    write_out(out, "quantize-manifest.txt", &cfg.manifest("quantize"))?;

    print!("{summary}");
    println!("packed model: {}", packed_path.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let model = require_model(cfg)?;
    let (split, _) = dataset_for(&model.graph, cfg)?;
    let mode = eval_mode(cfg, &model)?;
    let miss = evaluate(&model, &split.test, mode)?;
    write_out(&cfg.out, "eval-manifest.txt", &cfg.manifest("eval"))?;
    println!("{miss:.2}");
    Ok(())
}

fn cmd_pack(cfg: &RunConfig) -> Result<()> {
    let mut model = require_model(cfg)?;
    let (split, _) = dataset_for(&model.graph, cfg)?;
    let alloc = allocation_for(cfg, &model.graph)?;
    model.clear_specs();
    fit_allocation(&mut model, &alloc, &split.train, cfg.seed)?;
    let out = &cfg.out;
    fs::create_dir_all(out)?;
    let path = out.join("model.fxrn");
    write_packed(&model, &path)?;
    write_out(out, "pack-manifest.txt", &cfg.manifest("pack"))?;
    println!("packed payload: {} bytes", packed_payload_bytes(&model)?);
    println!("packed model: {}", path.display());
    Ok(())
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let (report, label) = if let Some(path) = &cfg.model {
        let model = load_model(path)?;
        let rate = cfg.rate.unwrap_or_else(|| default_rate(&model.graph));
        (cost_report(&model, rate)?, path.display().to_string())
    } else if let Some(name) = &cfg.preset {
        let graph = preset(name)?;
        let rate = cfg.rate.unwrap_or_else(|| default_rate(&graph));
        (multiplication_count(&graph, rate)?, name.clone())
    } else {
        return Err(Error::InvalidArg("need --preset or --model".into()));
    };
    let out = &cfg.out;
    write_out(out, "cost.csv", &report.to_csv())?;
    write_out(out, "cost.txt", &report.to_text())?;
    write_out(out, "report-manifest.txt", &cfg.manifest("report"))?;
    let _ = label;
    print!("{}", report.to_text());
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArg(_) | Error::UnknownGroup(_) | Error::MissingSpec(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Format(_) | Error::Shape(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(&resolve(args)?),
        Command::Sensitivity(args) => cmd_sensitivity(&resolve(args)?),
        Command::Quantize(args) => cmd_quantize(&resolve(args)?),
        Command::Eval(args) => cmd_eval(&resolve(args)?),
        Command::Pack(args) => cmd_pack(&resolve(args)?),
        Command::Report(args) => cmd_report(&resolve(args)?),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
