//! `evseg`: phantom generation, per-channel training, prediction, fusion,
//! evaluation, lesion analysis and rendering from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evseg_core::ensemble::{fuse, Criterion, SubnetOutputs};
use evseg_core::eval::{
    ood_report, region_metrics, render_heatmap, render_labels, Axis, MetricsOptions,
};
use evseg_core::evidential::{EvidenceField, SubnetId};
use evseg_core::format::{load_labelmap, load_volume, save_labelmap, save_volume, sniff, FileKind};
use evseg_core::kv::KvFile;
use evseg_core::phantom::PhantomSpec;
use evseg_core::pipeline::{
    build_dataset, load_split, run_e2e, save_dataset, unix_now, PipelineConfig, RunManifest,
};
use evseg_core::subnet::{load_checkpoint, predict_subnet, save_checkpoint, train, InputChannel};
use evseg_core::{Error, Mask, Result};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure
  2  usage error (bad flags or values)
  3  I/O error (missing or unwritable file)
  4  malformed file or configuration
  5  shape or dimension mismatch
  6  domain error (invalid values, degenerate protocol, empty data)";

#[derive(Parser, Debug)]
#[command(name = "evseg", version, about = "Evidential multi-channel segmentation of diffusion phantoms", after_help = EXIT_CODES)]
struct Cli {
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 1 gives the single-threaded mode.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Out {
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate, simulate and split a phantom dataset.
    Phantom {
        /// Pipeline config or bare phantom spec; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Train the subnetwork for one input channel.
    Train {
        /// Dataset directory written by `phantom`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        channel: InputChannel,
        /// Pipeline config supplying `train.*` and `subnet.*`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; the training log goes next to it.
        #[command(flatten)]
        out: Out,
    },
    /// Run one subnetwork over a parameter volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Five-channel parameter volume.
        #[arg(long)]
        volume: PathBuf,
        /// Input channel; defaults to the checkpoint's subnet id.
        #[arg(long)]
        channel: Option<InputChannel>,
        #[command(flatten)]
        out: Out,
    },
    /// Fuse the outputs of several `predict` runs.
    Fuse {
        /// Directories written by `predict`.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "evidence")]
        criterion: Criterion,
        #[command(flatten)]
        out: Out,
    },
    /// Overlap metrics of a predicted labelmap.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Count the background region in the means.
        #[arg(long)]
        include_background: bool,
        /// Weight region means by ground-truth voxel count.
        #[arg(long)]
        voxel_weighted: bool,
        #[command(flatten)]
        out: Out,
    },
    /// Lesion-versus-normal-tissue statistics of an uncertainty map.
    Ood {
        #[arg(long)]
        uncertainty: PathBuf,
        /// Labelmap whose nonzero voxels form the lesion.
        #[arg(long)]
        lesion: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Render one slice of a volume (PGM) or labelmap (PPM).
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "z")]
        axis: Axis,
        #[arg(long)]
        index: usize,
        /// Volume channel to render.
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[command(flatten)]
        out: Out,
    },
    /// Full pipeline with a run manifest.
    E2e {
        /// Pipeline config or a previous run's manifest; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Truncated { .. }
        | Error::LabelOutOfRange { .. }
        | Error::Format(_)
        | Error::Config(_) => 4,
        Error::Shape(_) => 5,
        Error::NonFinite { .. }
        | Error::Domain(_)
        | Error::Protocol(_)
        | Error::EmptyDataset(_)
        | Error::OutOfBounds(_) => 6,
        #[allow(unreachable_patterns)]
        _ => 1,
    }
}

/// Accepts a pipeline config, a run manifest or a bare phantom spec.
fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        None => PipelineConfig::default(),
        Some(p) => {
            let file = KvFile::load(p)?;
            if file.get_raw("regions").is_some() || file.get_raw("dims").is_some() {
                let r = file.reader();
                let spec = PhantomSpec::from_kv(&r)?;
                r.finish()?;
                PipelineConfig {
                    phantom: spec,
                    ..PipelineConfig::default()
                }
            } else {
                PipelineConfig::from_kv(&file).map_err(|e| {
                    if let Error::Config(m) = e {
                        Error::config(format!("{}: {m}", p.display()))
                    } else {
                        e
                    }
                })?
            }
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { config, out } => {
            let started = unix_now();
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let dataset = build_dataset(&cfg)?;
            let artifacts = save_dataset(&dataset, &out.out)?;
            let manifest = RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                threads: rayon::current_num_threads(),
                started_unix: started,
                finished_unix: unix_now(),
                config: cfg,
                artifacts,
            };
            write_text(&out.out.join("manifest.kv"), &manifest.to_kv().to_text())?;
            println!(
                "wrote {} train, {} validation, {} test phantoms to {}",
                dataset.train.len(),
                dataset.validation.len(),
                dataset.test.len(),
                out.out.display()
            );
        }
        Command::Train {
            data,
            channel,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let strip =
                |v: Vec<(String, _, _)>| v.into_iter().map(|(_, p, l)| (p, l)).collect::<Vec<_>>();
            let tr = strip(load_split(&data, "train")?);
            let va = strip(load_split(&data, "validation")?);
            let (net, record) = train(
                &tr,
                &va,
                channel,
                &cfg.subnet_config(channel),
                &cfg.train_config(channel),
            )?;
            if let Some(dir) = out.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            save_checkpoint(&net, &out.out)?;
            write_text(&with_suffix(&out.out, ".training.kv"), &record.to_kv(true))?;
            if let (Some(a), Some(b)) = (record.epochs.first(), record.epochs.last()) {
                println!(
                    "{channel}: total loss {:.4} -> {:.4} over {} epochs",
                    a.train.total,
                    b.train.total,
                    record.len()
                );
            }
        }
        Command::Predict {
            checkpoint,
            volume,
            channel,
            out,
        } => {
            let net = load_checkpoint(&checkpoint)?;
            let channel = match channel {
                Some(c) => c,
                None => net.subnet_id().as_str().parse()?,
            };
            let params = load_volume(&volume)?;
            let pred = predict_subnet(&net, &params, channel)?;
            create_dir(&out.out)?;
            save_volume(pred.evidence.volume(), out.out.join("evidence.evol"))?;
            save_labelmap(&pred.labels, out.out.join("labels.elbl"))?;
            save_volume(&pred.uncertainty, out.out.join("uncertainty.evol"))?;
            write_text(
                &out.out.join("subnet.kv"),
                &format!("id = {}\n", net.subnet_id().as_str()),
            )?;
        }
        Command::Fuse {
            inputs,
            criterion,
            out,
        } => {
            let mut members = Vec::with_capacity(inputs.len());
            let mut names = None;
            for dir in &inputs {
                let meta = KvFile::load(dir.join("subnet.kv"))?;
                let r = meta.reader();
                let id: String = r.require("id")?;
                r.finish()?;
                let evidence = load_volume(dir.join("evidence.evol"))?;
                if names.is_none() {
                    names = Some(load_labelmap(dir.join("labels.elbl"))?.names().to_vec());
                }
                members.push(EvidenceField::new(evidence, SubnetId::new(id))?);
            }
            let mut outs = SubnetOutputs::new(members)?;
            if let Some(n) = names {
                outs = outs.with_class_names(n)?;
            }
            let fused = fuse(&outs, criterion)?;
            create_dir(&out.out)?;
            save_labelmap(&fused.labelmap, out.out.join("labels.elbl"))?;
            save_volume(
                &fused.uncertainty.cast::<f32>()?,
                out.out.join("uncertainty.evol"),
            )?;
            if let Some(chosen) = &fused.chosen_subnet {
                save_labelmap(chosen, out.out.join("chosen_subnet.elbl"))?;
            }
        }
        Command::Eval {
            pred,
            gt,
            include_background,
            voxel_weighted,
            out,
        } => {
            let options = MetricsOptions {
                include_background,
                voxel_weighted,
            };
            let report = region_metrics(&load_labelmap(&pred)?, &load_labelmap(&gt)?, options)?;
            write_text(&out.out, &report.to_kv().to_text())?;
            println!("mean_dice = {:.6}", report.mean_dice);
        }
        Command::Ood {
            uncertainty,
            lesion,
            gt,
            out,
        } => {
            let u = load_volume(&uncertainty)?;
            let mask = Mask::from_labelmap(&load_labelmap(&lesion)?);
            let report = ood_report(&u, &mask, &load_labelmap(&gt)?)?;
            write_text(&out.out, &report.to_kv().to_text())?;
            println!(
                "contrast_ratio = {:.6}\nauroc = {:.6}",
                report.contrast_ratio, report.auroc
            );
        }
        Command::Render {
            input,
            axis,
            index,
            channel,
            out,
        } => {
            if let Some(dir) = out.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            match sniff(&input)? {
                FileKind::Volume => {
                    render_heatmap(&load_volume(&input)?, channel, axis, index, &out.out)?
                }
                FileKind::LabelMap => {
                    render_labels(&load_labelmap(&input)?, axis, index, &out.out)?
                }
            }
        }
        Command::E2e { config, out } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let summary = run_e2e(&cfg, &out.out)?;
            print!("{}", summary.to_kv().to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
