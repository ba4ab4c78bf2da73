use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use granedge::config::{apply_pairs, load_config, parse_override};
use granedge::core::eval::{EvalConfig, DEFAULT_THRESHOLDS, DEFAULT_TOLERANCE};
use granedge::core::granularity::DEFAULT_ZETA;
use granedge::core::synthetic::shapes_sample;
use granedge::core::train::{InferRequest, Trainer};
use granedge::dataset::{load_samples, open_dataset, write_layout};
use granedge::features::{open_provider, CACHE_ENV};
use granedge::report::{load_eval_set, par_best_match, par_evaluate, pr_csv, write_report_json, ReportFile};
use granedge::{checkpoint, pngio, run};

#[derive(Parser)]
#[command(name = "granedge", version, about = "Multi-granularity edge detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network.
    Train(TrainArgs),
    /// Train with loss components switched off.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        /// Drop the side and diversity losses; only the final map is trained.
        #[arg(long)]
        soc_off: bool,
        /// Replace the guide loss with plain balanced BCE.
        #[arg(long)]
        guide_off: bool,
        /// Drop the diversity loss.
        #[arg(long)]
        differ_off: bool,
    },
    /// Predict edge maps for PNG images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PNG file or a directory of PNG files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Blend at this granularity in [0, 1].
        #[arg(long, conflicts_with = "candidates")]
        alpha: Option<f64>,
        /// Emit this many evenly spaced granularities.
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long, env = CACHE_ENV)]
        cache_dir: Option<PathBuf>,
    },
    /// Benchmark predictions against annotations.
    Evaluate {
        /// Directory of `<id>.png` predictions (`<id>_aKK.png` with --candidates).
        #[arg(long)]
        pred_dir: PathBuf,
        /// Directory of `<id>/` folders holding one PNG per annotator.
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = DEFAULT_THRESHOLDS)]
        thresholds: usize,
        /// Skip edge thinning.
        #[arg(long)]
        no_nms: bool,
        /// Best-match evaluation over this many candidates per image.
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the PR curve as CSV.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Write ladder and consensus labels as PNGs.
    BuildLabels {
        /// Manifest file or dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ZETA)]
        zeta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset in the directory layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        side: usize,
        #[arg(long, default_value_t = 3)]
        annotators: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest file or dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory for logs and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, env = CACHE_ENV)]
    cache_dir: Option<PathBuf>,
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn real_main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train(a) => train(a, &[]),
        Command::Ablate { train: a, soc_off, guide_off, differ_off } => {
            let switches = [("soc_off", soc_off), ("guide_off", guide_off), ("differ_off", differ_off)];
            let extra: Vec<String> = switches.iter().filter(|s| s.1).map(|(k, _)| format!("{k}=true")).collect();
            train(a, &extra)
        }
        Command::Infer { checkpoint, input, out, alpha, candidates, cache_dir } => {
            let request = match (alpha, candidates) {
                (Some(a), _) => InferRequest::Alpha(a),
                (None, Some(m)) => InferRequest::Sweep(m),
                (None, None) => InferRequest::Final,
            };
            infer(&checkpoint, &input, &out, request, cache_dir.as_deref())
        }
        Command::Evaluate { pred_dir, gt_dir, tolerance, thresholds, no_nms, candidates, out, pr_csv: csv } => {
            let cfg = EvalConfig { tolerance, thresholds, apply_nms: !no_nms };
            cfg.validate()?;
            let m = candidates.unwrap_or(0);
            let (ids, preds, gts) = load_eval_set(&pred_dir, &gt_dir, m)?;
            let report = if m == 0 {
                let single: Vec<_> = preds.into_iter().map(|mut v| v.remove(0)).collect();
                par_evaluate(&single, &gts, &cfg)?
            } else {
                par_best_match(&preds, &gts, &cfg)?
            };
            println!("images {}  ODS {:.4}  OIS {:.4}  AP {:.4}", ids.len(), report.ods_f, report.ois_f, report.ap);
            if let Some(p) = csv {
                std::fs::write(&p, pr_csv(&report)).with_context(|| format!("writing {}", p.display()))?;
            }
            write_report_json(&ReportFile { config: cfg, images: ids, candidates: m.max(1), report }, &out)?;
            Ok(())
        }
        Command::BuildLabels { data, out, zeta, seed } => {
            let samples = load_samples(&open_dataset(&data)?)?;
            run::build_labels(&samples, zeta, seed, &out)?;
            println!("wrote labels for {} images to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Synth { out, count, side, annotators, seed } => {
            let samples = (0..count as u64)
                .map(|i| shapes_sample(side, annotators, seed + i))
                .collect::<Result<Vec<_>, _>>()?;
            write_layout(&out, &samples)?;
            println!("wrote {count} images to {}", out.display());
            Ok(())
        }
    }
}

fn train(a: TrainArgs, extra: &[String]) -> anyhow::Result<()> {
    let mut overrides = a.overrides.clone();
    overrides.extend_from_slice(extra);
    let mut trainer = match &a.resume {
        Some(p) => {
            if a.config.is_some() {
                bail!("--config cannot be combined with --resume; the checkpoint carries its configuration");
            }
            let mut t = checkpoint::load(p)?;
            let pairs = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
            if let Some((k, _)) = pairs.iter().find(|(k, _)| k.starts_with("stn.") || k.starts_with("provider.")) {
                bail!("`{k}` cannot change when resuming");
            }
            apply_pairs(&mut t.config, &pairs)?;
            t.config.validate()?;
            t
        }
        None => Trainer::new(load_config(a.config.as_deref(), &overrides)?)?,
    };
    let samples = load_samples(&open_dataset(&a.data)?)?;
    let provider = open_provider(&trainer.config.provider, a.cache_dir.as_deref())?;
    eprintln!(
        "training {} parameters on {} images for epochs {}..{}",
        trainer.stn.parameter_count(),
        samples.len(),
        trainer.epoch,
        trainer.config.epochs
    );
    let start = Instant::now();
    run::train(&mut trainer, &samples, provider.as_ref(), &a.out, |l| {
        eprintln!(
            "epoch {} step {} total {:.4} side {:.4} differ {:.4} guide {:.4} lr {:e} ({:.1}s)",
            l.epoch,
            l.step,
            l.l_total,
            l.l_side,
            l.l_differ,
            l.l_guide,
            l.lr,
            start.elapsed().as_secs_f64()
        );
    })?;
    eprintln!("checkpoint: {}", a.out.join(run::LAST_CHECKPOINT).display());
    Ok(())
}

fn png_inputs(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG files in {}", input.display());
    }
    Ok(files)
}

fn infer(ckpt: &Path, input: &Path, out: &Path, request: InferRequest, cache: Option<&Path>) -> anyhow::Result<()> {
    let trainer = checkpoint::load(ckpt)?;
    let provider = open_provider(&trainer.config.provider, cache)?;
    let files = png_inputs(input)?;
    let mut written = 0;
    for f in &files {
        let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let image = pngio::read_image(f)?;
        let maps = run::infer_image(&trainer, provider.as_ref(), &image, request).with_context(|| format!("image `{id}`"))?;
        written += run::write_outputs(out, &id, &maps)?.len();
    }
    println!("wrote {written} maps for {} images to {}", files.len(), out.display());
    Ok(())
}
