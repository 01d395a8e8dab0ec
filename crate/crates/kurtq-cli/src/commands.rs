//! Implementations of the `kurtq` subcommands.

use std::path::{Path, PathBuf};

use kurtq_core::kure;
use kurtq_core::pipeline::{ab_experiment, histogram, run_pipeline, Stage};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{resolve_seed, CliConfig};
use crate::export;
use crate::CliError;

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub stages: Option<String>,
    pub seed: Option<u64>,
    pub record: Option<PathBuf>,
}

fn parse_stages(spec: Option<&str>) -> Result<Vec<Stage>, CliError> {
    match spec {
        None => Ok(vec![
            Stage::Finetune,
            Stage::QatFinetune,
            Stage::Quantize,
            Stage::Evaluate,
        ]),
        Some(s) => s
            .split(',')
            .map(|part| {
                let part = part.trim();
                Stage::parse(part).ok_or_else(|| {
                    CliError::Config(format!(
                        "unknown stage '{part}' (expected finetune, qat_finetune, quantize, evaluate)"
                    ))
                })
            })
            .collect(),
    }
}

fn record_path(args: &TrainArgs) -> PathBuf {
    match &args.record {
        Some(p) => p.clone(),
        None => args.out.with_extension("run.json"),
    }
}

fn hist_csv_path(record: &Path, tensor: &str, step: usize) -> PathBuf {
    let stem = record
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("run");
    let sanitized = tensor.replace('.', "_");
    record.with_file_name(format!("{stem}.hist.{sanitized}.{step}.csv"))
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = CliConfig::load(&args.config)?;
    cfg.train.seed = resolve_seed(args.seed, cfg.train.seed)?;
    let stages = parse_stages(args.stages.as_deref())?;

    let trains = stages
        .iter()
        .any(|s| matches!(s, Stage::Finetune | Stage::QatFinetune));
    if !trains && !cfg.init_is_checkpoint() {
        return Err(CliError::Config(
            "requested stages skip training; set init.kind = \"checkpoint\" to supply a model"
                .to_string(),
        ));
    }

    let experiment = cfg.into_experiment()?;
    let result = run_pipeline(&experiment, &stages)?;

    let ckpt = Checkpoint::from_model(&result.params, &result.qat.act_absmax());
    checkpoint::save(&args.out, &ckpt)?;

    let record = record_path(args);
    export::write_json(&record, &result.record)?;
    for snap in &result.record.histograms {
        let path = hist_csv_path(&record, &snap.tensor, snap.step);
        export::write_text(&path, &export::histogram_csv(&snap.bins))?;
    }

    println!(
        "ran stages [{}] over {} step(s)",
        result.record.stages.join(", "),
        result.record.task_loss.len()
    );
    if let Some(acc) = result.record.final_fp32_accuracy {
        println!("fp32 accuracy: {acc:.4}");
    }
    if let Some(acc) = result.record.final_int8_accuracy {
        println!("int8 accuracy: {acc:.4}");
    }
    println!("checkpoint: {}", args.out.display());
    println!("run record: {}", record.display());
    Ok(())
}

pub struct QuantizeArgs {
    pub input: PathBuf,
    pub out: PathBuf,
}

pub fn cmd_quantize(args: &QuantizeArgs) -> Result<(), CliError> {
    let ckpt = checkpoint::load(&args.input)?;
    if ckpt.is_quantized() {
        return Err(CliError::Config(format!(
            "{} is already quantized",
            args.input.display()
        )));
    }
    let quantized = ckpt.quantize();
    checkpoint::save(&args.out, &quantized)?;
    println!(
        "quantized {} tensor(s): {} -> {}",
        quantized.entries.len(),
        args.input.display(),
        args.out.display()
    );
    Ok(())
}

pub struct InspectArgs {
    pub input: PathBuf,
    pub threshold: f32,
    pub csv: Option<PathBuf>,
    pub hist: Option<(String, PathBuf)>,
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<(), CliError> {
    let ckpt = checkpoint::load(&args.input)?;
    let (params, _) = ckpt.into_model();
    let defaults = kurtq_core::pipeline::TrainConfig::default();
    let report = kure::kurtosis_report(
        &params,
        args.threshold,
        &[],
        defaults.lambda,
        defaults.kure_mode,
        defaults.kure_target,
    );

    let csv = export::report_csv(&report);
    match &args.csv {
        Some(path) => {
            export::write_text(path, &csv)?;
            println!(
                "{} tensor(s), {} excluded at threshold {}; report: {}",
                report.entries.len(),
                report.excluded_count(),
                args.threshold,
                path.display()
            );
        }
        None => print!("{csv}"),
    }

    if let Some((tensor, path)) = &args.hist {
        let t = params.get(tensor).map_err(|_| {
            let mut names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
            names.sort_unstable();
            CliError::Config(format!(
                "unknown tensor '{tensor}'; valid names: {}",
                names.join(", ")
            ))
        })?;
        export::write_text(path, &export::histogram_csv(&histogram(t, 64)))?;
    }
    Ok(())
}

pub struct AbArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn cmd_ab(args: &AbArgs) -> Result<(), CliError> {
    let mut cfg = CliConfig::load(&args.config)?;
    cfg.train.seed = resolve_seed(args.seed, cfg.train.seed)?;
    let experiment = cfg.into_experiment()?;
    let ab = ab_experiment(&experiment)?;

    println!("arm,fp32_acc,int8_acc,gap");
    println!(
        "{},{:.4},{:.4},{:+.4}",
        ab.kure_arm.name, ab.kure_arm.fp32_accuracy, ab.kure_arm.int8_accuracy, ab.int8_gap
    );
    println!(
        "{},{:.4},{:.4},{:+.4}",
        ab.baseline_arm.name, ab.baseline_arm.fp32_accuracy, ab.baseline_arm.int8_accuracy, 0.0
    );

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("ab.json"));
    export::write_json(&out, &ab)?;
    println!("record: {}", out.display());
    Ok(())
}
