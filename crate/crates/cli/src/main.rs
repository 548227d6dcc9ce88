use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use stereo_adapt::checkpoint::Checkpoint;
use stereo_adapt::color::{channel_stats, pair_stats, rgb_to_lab, ColorStats, EpochDriver, ProgressiveState, RgbPair};
use stereo_adapt::cost::{cost_histogram, cost_norm_tensor, CostVolume, NORM_EPS};
use stereo_adapt::data::{self, io, D1Threshold, SyntheticSpec};
use stereo_adapt::model::{extract_features, ModelConfig, ParamSet};
use stereo_adapt::train::{evaluate, score, train_adapt, EvalReport, TrainConfig};
use stereo_adapt::{Graph, Tensor4};

#[derive(Parser)]
#[command(name = "stereo-adapt", version, about = "Domain-adaptive stereo matching toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    A,
    B,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn as_str(self) -> &'static str {
        match self {
            Switch::On => "on",
            Switch::Off => "off",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stereo dataset (left/, right/, disp/, occ/).
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "a")]
        domain: Domain,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Largest ground-truth disparity; must be below width/4.
        #[arg(long, default_value_t = 16)]
        max_disp: usize,
        #[arg(long, default_value_t = 3)]
        layers: usize,
    },
    /// Print per-image and pooled LAB and RGB channel statistics.
    Stats {
        /// Glob pattern of images; repeatable.
        #[arg(long, required = true)]
        images: Vec<String>,
    },
    /// Restyle source images toward the running LAB statistics of target images.
    Transfer {
        /// Glob pattern of source images; repeatable.
        #[arg(long, required = true)]
        source: Vec<String>,
        /// Glob pattern of target-domain images; repeatable.
        #[arg(long, required = true)]
        target: Vec<String>,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
        /// Seed the running statistics with the first scheduled target image.
        #[arg(long)]
        warm_start: bool,
        /// Shuffle seed of the source/target schedule.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the restyled images, written under their file names.
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram of correlation-volume scores for one stereo pair.
    CostvolHist {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Features from this checkpoint; otherwise a freshly seeded network.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "on")]
        cost_norm: Switch,
        #[arg(long, default_value_t = 16)]
        max_disp: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output with columns bin_lo, bin_hi, proportion.
        #[arg(long, default_value = "costvol_hist.csv")]
        csv: PathBuf,
    },
    /// Train on a source and a target dataset; writes checkpoint.bin and metrics.csv.
    Train {
        /// `key = value` config file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        color_transfer: Option<Switch>,
        #[arg(long, value_enum)]
        cost_norm: Option<Switch>,
        #[arg(long, value_enum)]
        recon: Option<Switch>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Total iterations, counting those already in a resumed checkpoint.
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Any other config key, as `key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// D1 error of a checkpoint or of precomputed disparity maps.
    Eval {
        #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        /// Directory of predicted maps (.pfm or 16-bit .png) named like the left images.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        threshold: f64,
        /// Also require the error to exceed 5% of the ground truth.
        #[arg(long)]
        rel: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth {
            out,
            n,
            seed,
            domain,
            width,
            height,
            max_disp,
            layers,
        } => {
            let base = match domain {
                Domain::A => SyntheticSpec::domain_a(width, height, max_disp),
                Domain::B => SyntheticSpec::domain_b(width, height, max_disp),
            };
            let spec = SyntheticSpec { layers, ..base };
            for i in 0..n {
                let sample_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                let s = data::gen_synthetic_pair(&spec, sample_seed)?;
                data::write_sample(&out, &format!("{i:06}"), &s)?;
            }
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Stats { images } => {
            let paths = expand(&images)?;
            let (mut labs, mut rgbs) = (Vec::new(), Vec::new());
            for p in &paths {
                let img = io::read_rgb(p)?;
                let rgb: Vec<[f64; 3]> = img.pixels().map(|px| px.0.map(f64::from)).collect();
                let lab = rgb_to_lab(&img);
                println!("{}:", p.display());
                println!("  lab {}", fmt_stats(&channel_stats(&lab)?, ["L", "a", "b"]));
                println!("  rgb {}", fmt_stats(&ColorStats::of_pixels(&[&rgb])?, ["R", "G", "B"]));
                labs.push(lab.pixels);
                rgbs.push(rgb);
            }
            let pool = |v: &[Vec<[f64; 3]>]| ColorStats::of_pixels(&v.iter().map(|p| p.as_slice()).collect::<Vec<_>>());
            println!("all ({} images):", paths.len());
            println!("  lab {}", fmt_stats(&pool(&labs)?, ["L", "a", "b"]));
            println!("  rgb {}", fmt_stats(&pool(&rgbs)?, ["R", "G", "B"]));
        }
        Command::Transfer {
            source,
            target,
            gamma,
            warm_start,
            seed,
            out,
        } => {
            // single images go through the pair machinery as (img, img)
            let load = |patterns: &[String]| -> Result<(Vec<PathBuf>, Vec<RgbPair>)> {
                let paths = expand(patterns)?;
                let pairs = paths
                    .iter()
                    .map(|p| {
                        let img = io::read_rgb(p)?;
                        Ok(RgbPair {
                            left: img.clone(),
                            right: img,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((paths, pairs))
            };
            let (src_paths, src) = load(&source)?;
            let (_, tgt) = load(&target)?;
            let mut names = std::collections::BTreeSet::new();
            for p in &src_paths {
                let name = p.file_name().context("source path has no file name")?;
                if !names.insert(name.to_owned()) {
                    bail!("two source images are named {}", name.to_string_lossy());
                }
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

            let mut state = ProgressiveState::new(gamma)?;
            if warm_start {
                let schedule = EpochDriver::new(&src, &tgt, &mut state, seed)?.schedule();
                let first = &tgt[schedule[0].1];
                state = ProgressiveState::warm_started(gamma, &pair_stats(&first.left, &first.right)?)?;
            }
            for item in EpochDriver::new(&src, &tgt, &mut state, seed)? {
                let (i, pair) = item?;
                let dst = out.join(src_paths[i].file_name().context("source path has no file name")?);
                io::write_rgb(&dst, &pair.left)?;
            }
            println!("wrote {} images to {}", src.len(), out.display());
            println!(
                "target lab {}",
                fmt_stats(
                    &ColorStats {
                        mu: state.mu_t,
                        sigma: state.sigma_t
                    },
                    ["L", "a", "b"]
                )
            );
        }
        Command::CostvolHist {
            left,
            right,
            checkpoint,
            cost_norm,
            max_disp,
            bins,
            seed,
            csv,
        } => {
            let (params, model) = match checkpoint {
                Some(p) => {
                    let c = Checkpoint::load(&p)?;
                    (c.params, c.model)
                }
                None => {
                    let m = ModelConfig::default();
                    (ParamSet::init(&m, seed)?, m)
                }
            };
            let features = |path: &Path| -> Result<Tensor4> {
                let mut g = Graph::new();
                let bp = params.bind_frozen(&mut g);
                let img = g.constant(data::image_to_tensor(&io::read_rgb(path)?));
                let f = extract_features(&mut g, img, &bp, &model.stereo)?;
                let f = g.value(f).clone();
                Ok(if cost_norm == Switch::On { cost_norm_tensor(&f, NORM_EPS)? } else { f })
            };
            let vol = CostVolume::correlation(&features(&left)?, &features(&right)?, max_disp)?;
            let h = cost_histogram(&vol, bins, None)?;
            let mut text = String::from("bin_lo,bin_hi,proportion\n");
            for (i, p) in h.proportions.iter().enumerate() {
                let (lo, hi) = (h.edges[i], h.edges[i + 1]);
                text.push_str(&format!("{lo},{hi},{p}\n"));
                println!("[{lo:9.4}, {hi:9.4})  {p:.4}  {}", "#".repeat((p * 50.0).round() as usize));
            }
            std::fs::write(&csv, text).with_context(|| format!("writing {}", csv.display()))?;
            println!("csv: {}", csv.display());
        }
        Command::Train {
            config,
            color_transfer,
            cost_norm,
            recon,
            seed,
            out,
            source,
            target,
            iterations,
            resume,
            set,
        } => {
            let mut cfg = TrainConfig::default();
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
            }
            let mut overrides: Vec<(String, String)> = Vec::new();
            for (k, v) in [
                ("color-transfer", color_transfer.map(|s| s.as_str().to_string())),
                ("cost-norm", cost_norm.map(|s| s.as_str().to_string())),
                ("recon", recon.map(|s| s.as_str().to_string())),
                ("seed", seed.map(|s| s.to_string())),
                ("out", out.map(|p| p.display().to_string())),
                ("source", source.map(|p| p.display().to_string())),
                ("target", target.map(|p| p.display().to_string())),
                ("iterations", iterations.map(|n| n.to_string())),
                ("resume", resume.map(|p| p.display().to_string())),
            ] {
                if let Some(v) = v {
                    overrides.push((k.to_string(), v));
                }
            }
            for kv in set {
                let Some((k, v)) = kv.split_once('=') else {
                    bail!("--set expects KEY=VALUE, got {kv:?}");
                };
                overrides.push((k.trim().to_string(), v.to_string()));
            }
            for (k, v) in &overrides {
                cfg.set(k, v)?;
            }
            let summary = train_adapt(&cfg)?;
            if let Some(last) = summary.rows.last() {
                println!("iter {}: total {:.6} target D1 {:.2}%", last.iter, last.losses.total, last.target_d1);
            }
            println!("checkpoint: {}", summary.checkpoint_path.display());
            println!("metrics: {}", summary.metrics_path.display());
        }
        Command::Eval {
            checkpoint,
            pred,
            data: dir,
            threshold,
            rel,
        } => {
            let th = D1Threshold {
                abs_px: threshold,
                use_rel: rel,
                ..Default::default()
            };
            let samples = data::load_dataset(&dir)?;
            let report = match (checkpoint, pred) {
                (Some(c), _) => {
                    let ckpt = Checkpoint::load(&c)?;
                    evaluate(&ckpt.params, &ckpt.model, &samples, th)?
                }
                (None, Some(p)) => score_predictions(&p, &dir, &samples, th)?,
                (None, None) => unreachable!("clap requires one of --checkpoint/--pred"),
            };
            for (i, r) in report.per_sample.iter().enumerate() {
                println!("sample {i}: D1 {:.2}% EPE {:.4} ({} px)", r.d1_percent, r.epe, r.valid_pixels);
            }
            println!("EPE: {:.4}", report.aggregate.epe);
            println!("D1: {:.2}%", report.aggregate.d1_percent);
        }
    }
    Ok(())
}

fn score_predictions(pred: &Path, data_dir: &Path, samples: &[data::StereoSample], th: D1Threshold) -> Result<EvalReport> {
    let mut stems: Vec<String> = std::fs::read_dir(data_dir.join("left"))
        .with_context(|| format!("listing {}", data_dir.join("left").display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.path().file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    let preds = stems
        .iter()
        .map(|stem| {
            let path = ["pfm", "png"]
                .iter()
                .map(|ext| pred.join(format!("{stem}.{ext}")))
                .find(|p| p.is_file())
                .with_context(|| format!("no prediction for {stem} in {}", pred.display()))?;
            Ok(io::read_disparity(&path)?.disparity.into_tensor())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(score(&preds, samples, th)?)
}

fn expand(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for pat in patterns {
        let mut hits: Vec<PathBuf> = glob::glob(pat)
            .with_context(|| format!("bad pattern {pat:?}"))?
            .filter_map(|p| p.ok())
            .collect();
        if hits.is_empty() {
            bail!("no files match {pat:?}");
        }
        hits.sort();
        out.extend(hits);
    }
    Ok(out)
}

fn fmt_stats(s: &ColorStats, names: [&str; 3]) -> String {
    (0..3)
        .map(|k| format!("{} {:.3}±{:.3}", names[k], s.mu[k], s.sigma[k]))
        .collect::<Vec<_>>()
        .join("  ")
}
