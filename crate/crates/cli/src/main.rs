//! `mindloop`: command-line driver for the two-stage reconstruction pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mindloop_core::aligner::Ablation;
use mindloop_core::checkpoint::Checkpoint;
use mindloop_core::dataset::{synthesize, Dataset};
use mindloop_core::encoders::LatentAutoencoder;
use mindloop_core::pipeline::{
    self, experiment_from_models, export_roi_weights, read_reconstructions, run_experiment, write_reconstructions,
    write_roi_weights, AblationSection, DecoderSet, Experiment, ExperimentConfig, ReconstructionMeta, RoiChoice,
    AUTOENCODER_FILE,
};

#[derive(Parser, Debug)]
#[command(name = "mindloop", version, about = "Toy two-stage brain-to-image reconstruction")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML experiment config; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set decoder.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the toy dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the latent autoencoder.
    TrainAe {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional noise predictor.
    TrainDenoiser {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long = "T", value_name = "STEPS")]
        timesteps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the c, z and structural decoders and the top-k selector.
    FitDecoders {
        #[arg(long)]
        dataset: PathBuf,
        /// Autoencoder checkpoint; defaults to OUT/autoencoder.ckpt.
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        voxels_per_target: Option<usize>,
        #[arg(long)]
        k_percent: Option<f64>,
        #[arg(long)]
        roi: Option<RoiChoice>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct the test split.
    Reconstruct {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Decoded)]
        mode: Mode,
        #[arg(long, default_value = "none")]
        ablate: Ablation,
        /// Must match the decoders in MODELS; defaults to theirs.
        #[arg(long)]
        roi: Option<RoiChoice>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a reconstruction directory.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage in order, artifacts and manifest under OUT.
    Run {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse stages whose inputs match the previous run in OUT.
        #[arg(long)]
        resume: bool,
    },
    /// Validation-set metrics across top-k percentages.
    KSweep {
        /// Defaults to the configured dataset (synthesized when unset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory with autoencoder.ckpt and denoiser.ckpt; trained when unset.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "5,10,25,50,75")]
        ks: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-voxel mean |weight| of each decoder.
    ExportWeights {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Decoded,
    UpperBound,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::TrainAe { .. } => "train-ae",
            Command::TrainDenoiser { .. } => "train-denoiser",
            Command::FitDecoders { .. } => "fit-decoders",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Evaluate { .. } => "evaluate",
            Command::Run { .. } => "run",
            Command::KSweep { .. } => "k-sweep",
            Command::ExportWeights { .. } => "export-weights",
        }
    }
}

fn load_config(g: &Global) -> anyhow::Result<ExperimentConfig> {
    let base = match &g.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    };
    Ok(with_overrides(base, &g.overrides)?)
}

fn with_overrides(base: mindloop_core::Result<ExperimentConfig>, overrides: &[String]) -> mindloop_core::Result<ExperimentConfig> {
    let build = || {
        let mut cfg = base?;
        for o in overrides {
            cfg.set(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    };
    build().map_err(|e: mindloop_core::Error| e.in_stage("config"))
}

fn load_models(cfg: &ExperimentConfig, ds: Dataset, models: &Path) -> anyhow::Result<Experiment> {
    experiment_from_models(cfg, ds, models).with_context(|| format!("loading models from {}", models.display()))
}

fn load_ae(path: &Path) -> anyhow::Result<LatentAutoencoder> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(LatentAutoencoder::from_checkpoint(ck, path)?)
}

fn parent_dir(path: &Path) -> anyhow::Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &pipeline::Report) -> anyhow::Result<()> {
    parent_dir(path)?;
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn execute(global: &Global, command: Command) -> anyhow::Result<()> {
    let mut cfg = load_config(global)?;
    match command {
        Command::SynthData { out } => {
            let ds = synthesize(&cfg.data, cfg.seeds().dataset)?;
            ds.save(&out)?;
            println!("wrote {} stimuli to {}", ds.stimuli.len(), out.display());
        }
        Command::TrainAe { dataset, out } => {
            let ds = Dataset::load(&dataset)?;
            let (ae, history) = pipeline::train_autoencoder_stage(&cfg, &ds)?;
            parent_dir(&out)?;
            ae.to_checkpoint().save(&out)?;
            println!(
                "autoencoder: final epoch loss {:.6}, saved to {}",
                history.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::TrainDenoiser {
            dataset,
            ae,
            timesteps,
            out,
        } => {
            if let Some(t) = timesteps {
                cfg.generator.timesteps = t;
                cfg.generator.sampler.forward_steps = cfg.generator.sampler.forward_steps.min(t);
                cfg.validate().map_err(|e| e.in_stage("config"))?;
            }
            let ds = Dataset::load(&dataset)?;
            let ae = load_ae(&ae)?;
            let (dn, history) = pipeline::train_denoiser_stage(&cfg, &ds, &ae)?;
            parent_dir(&out)?;
            dn.to_checkpoint().save(&out)?;
            println!(
                "denoiser: final step loss {:.6}, saved to {}",
                history.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::FitDecoders {
            dataset,
            ae,
            lambda,
            voxels_per_target,
            k_percent,
            roi,
            out,
        } => {
            if let Some(v) = lambda {
                cfg.decoder.lambda = v;
            }
            if let Some(v) = voxels_per_target {
                cfg.decoder.voxels_per_target = v;
            }
            if let Some(v) = k_percent {
                cfg.decoder.k_percent = v;
            }
            cfg.validate().map_err(|e| e.in_stage("config"))?;
            let roi = roi.unwrap_or(cfg.ablation.roi);
            let ds = Dataset::load(&dataset)?;
            let ae = load_ae(&ae.unwrap_or_else(|| out.join(AUTOENCODER_FILE)))?;
            let exp = Experiment::new(cfg, ds, ae, None)?;
            let dec = exp.fit_decoders(roi, &exp.dataset.train)?;
            dec.save(&out)?;
            let s = dec.decoding_summary();
            println!(
                "decoders ({roi}): accuracy c {:.4}, z {:.4}, zclip {:.4}; {} structural dims kept",
                s.mean_accuracy_c, s.mean_accuracy_z, s.mean_accuracy_zclip, s.retained_zclip
            );
        }
        Command::Reconstruct {
            dataset,
            models,
            mode,
            ablate,
            roi,
            out,
        } => {
            let ds = Dataset::load(&dataset)?;
            let exp = load_models(&cfg, ds, &models)?;
            let dec = DecoderSet::load(&models, &exp.dataset)
                .with_context(|| format!("loading decoders from {}", models.display()))?;
            if let Some(r) = roi.filter(|&r| r != dec.roi) {
                bail!("--roi {r} does not match decoders fitted on {}", dec.roi);
            }
            let variant = AblationSection {
                roi: dec.roi,
                drop: ablate,
                upper_bound: mode == Mode::UpperBound,
            };
            let records = exp.reconstruct_items(&dec, &exp.dataset.test, &variant)?;
            let meta = ReconstructionMeta {
                variant,
                decoding: dec.decoding_summary(),
            };
            fs::create_dir_all(&out)?;
            write_reconstructions(&out, &exp, &records, &meta, &cfg.image_format)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            println!("reconstructed {} items into {}", records.len(), out.display());
        }
        Command::Evaluate { recon, dataset, out } => {
            let archived = recon.join("config.toml");
            if global.config.is_none() && archived.exists() {
                cfg = with_overrides(ExperimentConfig::load(&archived), &global.overrides)?;
            }
            let ds = Dataset::load(&dataset)?;
            let stored = read_reconstructions(&recon)?;
            let text = pipeline::text_encoder(&cfg);
            let visual = pipeline::visual_encoder(&cfg, &ds, &text)?;
            let report = stored.report(&visual, cfg.seeds().visual, &ds)?;
            write_json(&out, &report)?;
            print_report(&report);
        }
        Command::Run { out, resume } => {
            if let Some(o) = out {
                cfg.output = o;
            }
            let summary = run_experiment(&cfg, resume)?;
            print_report(&summary.report);
            println!("run written to {}", summary.dir.display());
        }
        Command::KSweep {
            dataset,
            models,
            ks,
            out,
        } => {
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            let exp = match models {
                Some(m) => load_models(&cfg, pipeline::load_dataset(&cfg)?, &m)?,
                None => Experiment::prepare(&cfg)?,
            };
            let sweep = pipeline::k_sweep(&exp, &ks)?;
            parent_dir(&out)?;
            sweep.write_csv(&out)?;
            for row in &sweep.rows {
                println!(
                    "k={:>5} {:<8} {:.4} (retained accuracy {:.4})",
                    row.k_percent, row.metric, row.value, row.decoding_accuracy
                );
            }
        }
        Command::ExportWeights { dataset, models, out } => {
            let ds = Dataset::load(&dataset)?;
            let dec = DecoderSet::load(&models, &ds)
                .with_context(|| format!("loading decoders from {}", models.display()))?;
            let rows = export_roi_weights(&dec, &ds);
            parent_dir(&out)?;
            write_roi_weights(&out, &rows)?;
            println!("wrote {} voxel rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn print_report(r: &pipeline::Report) {
    let m = &r.metrics;
    println!(
        "{} items ({}, drop {}, upper bound {}): clip_sim {:.4}, ssim {:.4}, pcc {:.4}",
        r.items, r.variant.roi, r.variant.drop, r.variant.upper_bound, m.mean_clip_sim, m.mean_ssim, m.mean_pcc
    );
    match (m.fid, &m.fid_note) {
        (Some(f), _) => println!("fid {f:.4}"),
        (None, Some(note)) => println!("fid n/a: {note}"),
        (None, None) => {}
    }
}

fn stage_of(e: &(dyn std::error::Error + 'static)) -> Option<&'static str> {
    match e.downcast_ref::<mindloop_core::Error>() {
        Some(mindloop_core::Error::Stage { stage, .. }) => Some(*stage),
        _ => None,
    }
}

/// Pipeline stage named in the error chain, and the chain without the stage wrappers.
fn describe(err: &anyhow::Error) -> (Option<&'static str>, String) {
    let stage = err.chain().find_map(stage_of);
    let parts: Vec<String> = err.chain().filter(|e| stage_of(*e).is_none()).map(|e| e.to_string()).collect();
    (stage, parts.join(": "))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let verb = cli.command.stage();
    match execute(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (stage, message) = describe(&e);
            eprintln!("mindloop: stage `{}` failed: {message}", stage.unwrap_or(verb));
            ExitCode::from(1)
        }
    }
}
