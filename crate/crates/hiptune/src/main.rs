//! Command-line entrypoint: dataset generation, protocol splits, two-stage
//! training, evaluation and report formatting.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use hiptune::checkpoint::{load_checkpoint, save_checkpoint};
use hiptune::config::RunConfig;
use hiptune::dataset::{generate_dataset, DatasetConfig, SampleStore};
use hiptune::error::{Error, Result};
use hiptune::evaluation::{
    evaluate_comparator, format_reports, make_protocol_split, Comparator, ComparatorReport,
    ProtocolId, ProtocolSplit, ReportFormat, ThresholdPolicy,
};
use hiptune::manifest::{load_manifest, save_manifest, Manifest};
use hiptune::model::Model;
use hiptune::taxonomy::{build_taxonomy, AttackTaxonomy};
use hiptune::training::{
    pretrain_encoder, train_coop, train_stage1, train_stage2, LoadedData, TrainReport,
};

#[derive(Parser)]
#[command(name = "hiptune", version, about = "Unified face-attack detection via hierarchical prompt tuning on synthetic taxonomy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (taxonomy, manifest, sample store).
    Generate {
        #[arg(long, default_value_t = 10)]
        identities: usize,
        /// Frames per attack method (and live captures per identity).
        #[arg(long, default_value_t = 1)]
        frames: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Noise-floor standard deviation.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Signature amplitude multiplier (0 erases class structure).
        #[arg(long, default_value_t = 1.0)]
        strength: f64,
        /// Also write 8-bit PNGs next to the tensor files.
        #[arg(long)]
        export_png: bool,
    },
    /// Build a protocol split over a generated dataset.
    Split {
        /// Dataset directory from `generate`.
        #[arg(long)]
        data: PathBuf,
        /// One of: p1, p2, p3.1, p3.2.
        #[arg(long)]
        protocol: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output split file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a comparator per the run configuration.
    Train {
        /// One of: 1, 2, all.
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a trained checkpoint on a split's test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// One of: hiptune, clip-v, coop-unified, coop-specific.
        #[arg(long)]
        comparator: String,
        /// Dataset directory from `generate`.
        #[arg(long)]
        data: PathBuf,
        /// `fixed` (liveness threshold 0.5) or `dev-eer`.
        #[arg(long, default_value = "fixed")]
        threshold_policy: String,
        /// Write the report as JSON here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render stored evaluation reports as a table.
    Report {
        /// One of: text, csv, json.
        #[arg(long, default_value = "text")]
        format: String,
        /// Report JSON files produced by `eval`.
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            identities,
            frames,
            size,
            seed,
            out,
            noise,
            strength,
            export_png,
        } => cmd_generate(identities, frames, size, seed, &out, noise, strength, export_png),
        Command::Split {
            data,
            protocol,
            seed,
            out,
        } => cmd_split(&data, &protocol, seed, &out),
        Command::Train { stage, config } => cmd_train(&stage, &config),
        Command::Eval {
            checkpoint,
            split,
            comparator,
            data,
            threshold_policy,
            out,
        } => cmd_eval(&checkpoint, &split, &comparator, &data, &threshold_policy, out.as_deref()),
        Command::Report { format, inputs } => cmd_report(&format, &inputs),
    }
}

fn load_data_dir(dir: &Path) -> Result<(AttackTaxonomy, Manifest, SampleStore)> {
    let tax_path = dir.join("taxonomy.json");
    let text = std::fs::read_to_string(&tax_path)
        .map_err(|e| Error::Config(format!("{}: {e}", tax_path.display())))?;
    let taxonomy: AttackTaxonomy =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("taxonomy parse: {e}")))?;
    let manifest = load_manifest(&dir.join("manifest.txt"))?;
    manifest.validate(&taxonomy)?;
    let store = SampleStore::load(dir, &manifest)?;
    Ok((taxonomy, manifest, store))
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    identities: usize,
    frames: usize,
    size: usize,
    seed: u64,
    out: &Path,
    noise: f64,
    strength: f64,
    export_png: bool,
) -> Result<()> {
    let taxonomy = build_taxonomy();
    let cfg = DatasetConfig {
        n_identities: identities,
        frames_per_method: frames,
        image_size: size,
        seed,
        noise_level: noise,
        signature_strength: strength,
    };
    let (manifest, store) = generate_dataset(&taxonomy, &cfg)?;
    std::fs::create_dir_all(out)?;
    let tax_json = serde_json::to_string_pretty(&taxonomy)
        .map_err(|e| Error::Config(format!("taxonomy serialization: {e}")))?;
    std::fs::write(out.join("taxonomy.json"), tax_json)?;
    save_manifest(&manifest, &out.join("manifest.txt"))?;
    store.save(out, &manifest)?;
    if export_png {
        store.export_png(out, &manifest)?;
    }
    println!(
        "generated {} records ({} identities x {} methods x {} frames + lives) in {}",
        manifest.records.len(),
        identities,
        taxonomy.n_methods(),
        frames,
        out.display()
    );
    Ok(())
}

fn cmd_split(data: &Path, protocol: &str, seed: u64, out: &Path) -> Result<()> {
    let (_, manifest, _) = {
        // The split only needs the manifest; skip decoding every tensor.
        let tax_path = data.join("taxonomy.json");
        let text = std::fs::read_to_string(&tax_path)
            .map_err(|e| Error::Config(format!("{}: {e}", tax_path.display())))?;
        let taxonomy: AttackTaxonomy = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("taxonomy parse: {e}")))?;
        let manifest = load_manifest(&data.join("manifest.txt"))?;
        manifest.validate(&taxonomy)?;
        (taxonomy, manifest, ())
    };
    let protocol: ProtocolId = protocol.parse()?;
    let split = make_protocol_split(&manifest, protocol, seed)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    split.save(out)?;
    println!(
        "{} split: {} train / {} val / {} test -> {}",
        protocol,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(stage: &str, config: &Path) -> Result<()> {
    if !["1", "2", "all"].contains(&stage) {
        return Err(Error::Config(format!(
            "stage must be 1, 2 or all, got {stage}"
        )));
    }
    let cfg = RunConfig::load(config)?;
    let (taxonomy, manifest, store) = load_data_dir(&cfg.data.dir)?;
    let data = LoadedData::new(manifest, &store);
    let train_indices: Vec<usize> = match &cfg.data.split {
        Some(path) => {
            let split = ProtocolSplit::load(path)?;
            split.validate(&data.manifest)?;
            split.train
        }
        None => (0..data.manifest.records.len()).collect(),
    };
    if train_indices.is_empty() {
        return Err(Error::Config("no training records".into()));
    }
    let loss = cfg.loss_config();
    let seed = cfg.training.seed;
    let comparator = cfg.comparator()?;

    let ckpt = &cfg.output.checkpoint;
    let mut model = if ckpt.exists() && stage != "all" {
        println!("resuming from {}", ckpt.display());
        load_checkpoint(taxonomy, ckpt)?
    } else {
        Model::new(taxonomy, cfg.model_config(), seed)?
    };

    let mut reports: Vec<TrainReport> = Vec::new();
    if !model.encoder.frozen {
        println!(
            "pretraining encoder substitute: {} epochs at lr {}",
            loss.pretrain_epochs, loss.pretrain_lr
        );
        reports.push(pretrain_encoder(&mut model, &data, &train_indices, &loss, seed)?);
    }
    match comparator {
        Comparator::Hiptune => {
            if stage == "1" || stage == "all" {
                println!("stage 1: supervised prompt training ({} epochs)", loss.stage1_epochs);
                reports.push(train_stage1(&mut model, &data, &train_indices, &loss, seed)?);
            }
            if stage == "2" || stage == "all" {
                println!("stage 2: gate and integration training ({} epochs)", loss.stage2_epochs);
                reports.push(train_stage2(&mut model, &data, &train_indices, &loss, seed)?);
            }
        }
        Comparator::CoopUnified => {
            println!("training flat-context baseline (unified)");
            reports.push(train_coop(&mut model, false, &data, &train_indices, &loss, seed)?);
        }
        Comparator::CoopSpecific => {
            println!("training flat-context baseline (class-specific)");
            reports.push(train_coop(&mut model, true, &data, &train_indices, &loss, seed)?);
        }
        Comparator::ClipV => {
            println!("zero-shot comparator: nothing to train beyond the pretrained encoder");
        }
    }

    save_checkpoint(&model, ckpt)?;
    let trace: String = reports.iter().map(|r| r.trace_text()).collect();
    if let Some(parent) = cfg.output.loss_trace.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&cfg.output.loss_trace, trace)?;
    println!(
        "saved checkpoint to {} and loss trace to {}",
        ckpt.display(),
        cfg.output.loss_trace.display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    split_path: &Path,
    comparator: &str,
    data_dir: &Path,
    threshold_policy: &str,
    out: Option<&Path>,
) -> Result<()> {
    let comparator: Comparator = comparator.parse()?;
    let policy = match threshold_policy {
        "fixed" => ThresholdPolicy::Fixed(0.5),
        "dev-eer" => ThresholdPolicy::DevEer,
        other => {
            return Err(Error::Config(format!(
                "threshold policy must be fixed or dev-eer, got {other}"
            )))
        }
    };
    let (taxonomy, manifest, store) = load_data_dir(data_dir)?;
    let data = LoadedData::new(manifest, &store);
    let split = ProtocolSplit::load(split_path)?;
    split.validate(&data.manifest)?;
    let model = load_checkpoint(taxonomy, checkpoint)?;
    let report = evaluate_comparator(&model, comparator, &data, &split, policy)?;
    print!("{}", format_reports(std::slice::from_ref(&report), ReportFormat::Text)?);
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let json = format_reports(std::slice::from_ref(&report), ReportFormat::Json)?;
        std::fs::write(path, json)?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_report(format: &str, inputs: &[PathBuf]) -> Result<()> {
    let format: ReportFormat = format.parse()?;
    if inputs.is_empty() {
        return Err(Error::Config("no report files given".into()));
    }
    let mut reports: Vec<ComparatorReport> = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let parsed: Vec<ComparatorReport> = serde_json::from_str(&text)
            .or_else(|_| serde_json::from_str::<ComparatorReport>(&text).map(|r| vec![r]))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        reports.extend(parsed);
    }
    print!("{}", format_reports(&reports, format)?);
    Ok(())
}
