//! Joint source/target training loop with per-module switches, and
//! checkpoint evaluation.
//!
//! Each iteration draws a batch of source and target crops. With color
//! transfer on, the progressive state absorbs each target pair's LAB
//! statistics and the paired source crop is restyled. The source branch is
//! supervised by smooth-L1 on ground truth (plus occlusion BCE when
//! reconstruction is on); the target branch is self-supervised by the
//! occlusion-aware appearance loss, the mask regularizer and smoothness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::color::{lab_to_rgb, pair_stats, rgb_to_lab, transfer, ColorStats, ProgressiveState};
use crate::data::{aggregate, d1_error, image_to_tensor, load_dataset, D1Threshold, MetricReport, StereoSample};
use crate::error::{Error, Result};
use crate::model::{forward_disparity, forward_occlusion, ModelConfig, OcclusionNetConfig, ParamSet, StereoNetConfig};
use crate::recon::{
    error_map, loss_bce, loss_occ_reg, loss_recon, loss_smooth, loss_smooth_l1, total_loss, warp_right_to_left,
    LossBreakdown, LossTerms, LossWeights,
};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub color_transfer: bool,
    pub cost_norm: bool,
    pub recon: bool,
    pub weights: LossWeights,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub crop_width: usize,
    pub crop_height: usize,
    pub seed: u64,
    pub gamma: f64,
    /// Seed the colour EMA with the first target sample instead of zeros.
    pub warm_start: bool,
    pub eval_interval: usize,
    /// Target samples (from the start of the set) scored for `target_d1`.
    pub eval_samples: usize,
    pub source: PathBuf,
    pub target: PathBuf,
    pub out: PathBuf,
    /// Checkpoint to continue from; `iterations` then counts the total.
    pub resume: Option<PathBuf>,
    pub feature_channels: usize,
    pub feature_layers: usize,
    pub max_disp: usize,
    pub regularizer_layers: usize,
    pub occ_channels: usize,
    pub occ_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = StereoNetConfig::default();
        let o = OcclusionNetConfig::default();
        Self {
            color_transfer: true,
            cost_norm: true,
            recon: true,
            weights: LossWeights::default(),
            lr: 1e-3,
            iterations: 5000,
            batch_size: 2,
            crop_width: 128,
            crop_height: 64,
            seed: 0,
            gamma: 0.95,
            warm_start: false,
            eval_interval: 100,
            eval_samples: 8,
            source: PathBuf::from("data/source"),
            target: PathBuf::from("data/target"),
            out: PathBuf::from("run"),
            resume: None,
            feature_channels: s.feature_channels,
            feature_layers: s.feature_layers,
            max_disp: s.max_disp,
            regularizer_layers: s.regularizer_layers,
            occ_channels: o.hidden_channels,
            occ_layers: o.layers,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("{key}: expected on|off, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {v:?}")))
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl TrainConfig {
    /// Every recognised key, in the order [`TrainConfig::to_text`] writes them.
    pub const KEYS: &'static [&'static str] = &[
        "color-transfer",
        "cost-norm",
        "recon",
        "alpha",
        "lambda-s-occ",
        "lambda-t-ar",
        "lambda-t-occ",
        "lambda-t-sm",
        "lr",
        "iterations",
        "batch-size",
        "crop-width",
        "crop-height",
        "seed",
        "gamma",
        "warm-start",
        "eval-interval",
        "eval-samples",
        "source",
        "target",
        "out",
        "resume",
        "feature-channels",
        "feature-layers",
        "max-disp",
        "regularizer-layers",
        "occ-channels",
        "occ-layers",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "color-transfer" => self.color_transfer = parse_bool(key, v)?,
            "cost-norm" => self.cost_norm = parse_bool(key, v)?,
            "recon" => self.recon = parse_bool(key, v)?,
            "alpha" => self.weights.alpha = parse_num(key, v)?,
            "lambda-s-occ" => self.weights.lambda_s_occ = parse_num(key, v)?,
            "lambda-t-ar" => self.weights.lambda_t_ar = parse_num(key, v)?,
            "lambda-t-occ" => self.weights.lambda_t_occ = parse_num(key, v)?,
            "lambda-t-sm" => self.weights.lambda_t_sm = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "batch-size" => self.batch_size = parse_num(key, v)?,
            "crop-width" => self.crop_width = parse_num(key, v)?,
            "crop-height" => self.crop_height = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "warm-start" => self.warm_start = parse_bool(key, v)?,
            "eval-interval" => self.eval_interval = parse_num(key, v)?,
            "eval-samples" => self.eval_samples = parse_num(key, v)?,
            "source" => self.source = PathBuf::from(v),
            "target" => self.target = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "resume" => self.resume = (!v.is_empty()).then(|| PathBuf::from(v)),
            "feature-channels" => self.feature_channels = parse_num(key, v)?,
            "feature-layers" => self.feature_layers = parse_num(key, v)?,
            "max-disp" => self.max_disp = parse_num(key, v)?,
            "regularizer-layers" => self.regularizer_layers = parse_num(key, v)?,
            "occ-channels" => self.occ_channels = parse_num(key, v)?,
            "occ-layers" => self.occ_layers = parse_num(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::invalid(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let values = [
            on_off(self.color_transfer).to_string(),
            on_off(self.cost_norm).to_string(),
            on_off(self.recon).to_string(),
            w.alpha.to_string(),
            w.lambda_s_occ.to_string(),
            w.lambda_t_ar.to_string(),
            w.lambda_t_occ.to_string(),
            w.lambda_t_sm.to_string(),
            self.lr.to_string(),
            self.iterations.to_string(),
            self.batch_size.to_string(),
            self.crop_width.to_string(),
            self.crop_height.to_string(),
            self.seed.to_string(),
            self.gamma.to_string(),
            on_off(self.warm_start).to_string(),
            self.eval_interval.to_string(),
            self.eval_samples.to_string(),
            self.source.display().to_string(),
            self.target.display().to_string(),
            self.out.display().to_string(),
            self.resume.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.feature_channels.to_string(),
            self.feature_layers.to_string(),
            self.max_disp.to_string(),
            self.regularizer_layers.to_string(),
            self.occ_channels.to_string(),
            self.occ_layers.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            stereo: StereoNetConfig {
                feature_channels: self.feature_channels,
                feature_layers: self.feature_layers,
                max_disp: self.max_disp,
                regularizer_layers: self.regularizer_layers,
                cost_norm: self.cost_norm,
            },
            occlusion: OcclusionNetConfig {
                hidden_channels: self.occ_channels,
                layers: self.occ_layers,
            },
        }
    }

    /// Loss weights with the target terms zeroed when reconstruction is off.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.recon {
            w.lambda_s_occ = 0.0;
            w.lambda_t_ar = 0.0;
            w.lambda_t_occ = 0.0;
            w.lambda_t_sm = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.crop_width == 0 || self.crop_height == 0 {
            return Err(Error::invalid("batch size and crop size must be positive"));
        }
        if self.crop_width < self.max_disp {
            return Err(Error::invalid("crop width must be at least max-disp"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma must lie in [0, 1]"));
        }
        if self.eval_interval == 0 {
            return Err(Error::invalid("eval-interval must be positive"));
        }
        Ok(())
    }
}

/// Sample indices and crop origins for one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub source: Vec<(usize, usize, usize)>,
    pub target: Vec<(usize, usize, usize)>,
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub losses: LossBreakdown,
    pub target_d1: f64,
}

pub const METRICS_HEADER: &str = "iter,l_s_main,l_s_occ,l_t_ar,l_t_occ,l_t_sm,total,target_d1";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, l.l_s_main, l.l_s_occ, l.l_t_ar, l.l_t_occ, l.l_t_sm, l.total, self.target_d1
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Mutable training state over fixed source and target sets.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub params: ParamSet,
    pub adam: Adam,
    pub color: ProgressiveState,
    pub iteration: usize,
    model: ModelConfig,
    rng: ChaCha8Rng,
    source: &'a [StereoSample],
    target: &'a [StereoSample],
    source_stats: Vec<ColorStats>,
    target_stats: Vec<ColorStats>,
}

struct Batch {
    left: Tensor4,
    right: Tensor4,
    disparity: Tensor4,
    valid: Tensor4,
    occlusion: Tensor4,
}

fn restyle(img: &RgbImage, stats: &ColorStats, state: &ProgressiveState) -> Result<RgbImage> {
    Ok(lab_to_rgb(&transfer(&rgb_to_lab(img), stats, state)?))
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, source: &'a [StereoSample], target: &'a [StereoSample]) -> Result<Self> {
        config.validate()?;
        if source.is_empty() || target.is_empty() {
            return Err(Error::Empty("training needs source and target samples".into()));
        }
        for s in source.iter().chain(target) {
            if s.width() < config.crop_width || s.height() < config.crop_height {
                return Err(Error::invalid(format!(
                    "sample {}x{} is smaller than the {}x{} crop",
                    s.width(),
                    s.height(),
                    config.crop_width,
                    config.crop_height
                )));
            }
        }
        let model = config.model();
        let params = ParamSet::init(&model, config.seed)?;
        let adam = Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        let stats = |set: &[StereoSample]| -> Result<Vec<ColorStats>> {
            if !config.color_transfer {
                return Ok(Vec::new());
            }
            set.iter().map(|s| pair_stats(&s.left, &s.right)).collect()
        };
        let target_stats = stats(target)?;
        let color = match target_stats.first() {
            Some(first) if config.warm_start => ProgressiveState::warm_started(config.gamma, first)?,
            _ => ProgressiveState::new(config.gamma)?,
        };
        Ok(Self {
            color,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a),
            source_stats: stats(source)?,
            target_stats,
            model,
            params,
            adam,
            iteration: 0,
            source,
            target,
            config,
        })
    }

    /// Continues a run from `checkpoint`. The config must describe the same
    /// model; it may raise `iterations`.
    pub fn resume(config: TrainConfig, checkpoint: Checkpoint, source: &'a [StereoSample], target: &'a [StereoSample]) -> Result<Self> {
        let mut t = Self::new(config, source, target)?;
        if checkpoint.model != t.model {
            return Err(Error::invalid("checkpoint model does not match the config"));
        }
        t.params = checkpoint.params;
        t.adam = checkpoint.adam;
        t.color = checkpoint.color;
        t.iteration = checkpoint.iteration as usize;
        t.rng.set_word_pos(checkpoint.sampler_pos);
        Ok(t)
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    /// Draws the next batch: per element a sample index and crop origin
    /// for each domain.
    pub fn draw_batch(&mut self) -> BatchPlan {
        let (cw, ch) = (self.config.crop_width, self.config.crop_height);
        let draw = |rng: &mut ChaCha8Rng, set: &[StereoSample]| {
            let i = rng.random_range(0..set.len());
            let x = rng.random_range(0..=set[i].width() - cw);
            let y = rng.random_range(0..=set[i].height() - ch);
            (i, x, y)
        };
        let mut plan = BatchPlan {
            source: Vec::new(),
            target: Vec::new(),
        };
        for _ in 0..self.config.batch_size {
            plan.source.push(draw(&mut self.rng, self.source));
            plan.target.push(draw(&mut self.rng, self.target));
        }
        plan
    }

    fn assemble(&self, items: &[(usize, usize, usize)], set: &[StereoSample], restyle_with: Option<&[ColorStats]>) -> Result<Batch> {
        let (cw, ch) = (self.config.crop_width, self.config.crop_height);
        let mut parts: [Vec<Tensor4>; 5] = Default::default();
        for &(i, x, y) in items {
            let mut s = set[i].crop(x, y, cw, ch)?;
            if let Some(stats) = restyle_with {
                s.left = restyle(&s.left, &stats[i], &self.color)?;
                s.right = restyle(&s.right, &stats[i], &self.color)?;
            }
            let occ = s.occlusion_or_derived().into_tensor();
            parts[0].push(image_to_tensor(&s.left));
            parts[1].push(image_to_tensor(&s.right));
            parts[2].push(s.disparity.into_tensor());
            parts[3].push(s.valid);
            parts[4].push(occ);
        }
        let [l, r, d, v, o] = parts;
        Ok(Batch {
            left: Tensor4::stack_batch(&l)?,
            right: Tensor4::stack_batch(&r)?,
            disparity: Tensor4::stack_batch(&d)?,
            valid: Tensor4::stack_batch(&v)?,
            occlusion: Tensor4::stack_batch(&o)?,
        })
    }

    /// One optimization step on a freshly drawn batch.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let plan = self.draw_batch();
        self.step_with(&plan)
    }

    /// One optimization step on the given batch.
    pub fn step_with(&mut self, plan: &BatchPlan) -> Result<LossBreakdown> {
        self.iteration += 1;
        let cfg = &self.config;
        let src_stats = if cfg.color_transfer {
            for &(ti, _, _) in &plan.target {
                self.color.update(&self.target_stats[ti]);
            }
            Some(self.source_stats.as_slice())
        } else {
            None
        };
        let src = self.assemble(&plan.source, self.source, src_stats)?;

        let mut g = Graph::new();
        let bp = self.params.bind(&mut g);
        let il_s = g.constant(src.left);
        let ir_s = g.constant(src.right);
        let d_s = forward_disparity(&mut g, il_s, ir_s, &bp, &self.model.stereo)?.disparity;
        let mut terms = LossTerms {
            s_main: Some(loss_smooth_l1(&mut g, d_s, &src.disparity, &src.valid)?),
            ..Default::default()
        };

        let mut watched = vec![d_s];
        if cfg.recon {
            // the occlusion network sees detached disparity and error inputs
            let d_s_in = g.detach(d_s);
            let (w_s, _) = warp_right_to_left(&mut g, ir_s, d_s_in)?;
            let e_s = error_map(&mut g, il_s, w_s)?;
            let o_s = forward_occlusion(&mut g, d_s_in, ir_s, e_s, &bp, &self.model)?;
            terms.s_occ = Some(loss_bce(&mut g, o_s, &src.occlusion)?);

            let tgt = self.assemble(&plan.target, self.target, None)?;
            let il_t = g.constant(tgt.left);
            let ir_t = g.constant(tgt.right);
            let d_t = forward_disparity(&mut g, il_t, ir_t, &bp, &self.model.stereo)?.disparity;
            let (w_t, valid_t) = warp_right_to_left(&mut g, ir_t, d_t)?;
            let e_t = error_map(&mut g, il_t, w_t)?;
            let e_t = g.detach(e_t);
            let d_t_in = g.detach(d_t);
            let o_t = forward_occlusion(&mut g, d_t_in, ir_t, e_t, &bp, &self.model)?;
            terms.t_ar = Some(loss_recon(&mut g, il_t, w_t, o_t, &valid_t, cfg.weights.alpha)?);
            terms.t_occ = Some(loss_occ_reg(&mut g, o_t)?);
            terms.t_sm = Some(loss_smooth(&mut g, d_t, il_t)?);
            watched.push(d_t);
        }

        let (total, breakdown) = total_loss(&mut g, &terms, &cfg.effective_weights())?;
        let diverged = |detail: String, g: &Graph| {
            // blame the first batch element whose disparity is non-finite
            let n = cfg.batch_size;
            let bad = watched.iter().enumerate().find_map(|(branch, &d)| {
                let t = g.value(d);
                let per = t.len() / n;
                (0..n)
                    .find(|&b| !t.data()[b * per..(b + 1) * per].iter().all(|v| v.is_finite()))
                    .map(|b| if branch == 0 { plan.source[b].0 } else { plan.target[b].0 })
            });
            Error::Diverged {
                iteration: self.iteration,
                sample: bad.unwrap_or(plan.source[0].0),
                detail,
            }
        };
        if !breakdown.total.is_finite() {
            return Err(diverged(format!("non-finite loss {breakdown:?}"), &g));
        }
        let grads = g.backward(total)?;
        let grads: Vec<Tensor4> = bp
            .vars()
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();
        if let Some(k) = grads.iter().position(|t| !t.all_finite()) {
            let name = self.params.names()[k].clone();
            return Err(diverged(format!("non-finite gradient for {name}"), &g));
        }
        self.adam.step(self.params.tensors_mut(), &grads)?;
        Ok(breakdown)
    }

    /// Aggregate D1 on the first `eval_samples` target samples.
    pub fn target_d1(&self) -> Result<f64> {
        let n = self.config.eval_samples.min(self.target.len());
        if n == 0 {
            return Ok(f64::NAN);
        }
        let report = evaluate(&self.params, &self.model, &self.target[..n], D1Threshold::default())?;
        Ok(report.aggregate.d1_percent)
    }

    /// Trains until `config.iterations` steps have been taken, scoring
    /// every `eval_interval` iterations and after the last one.
    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.iteration < self.config.iterations {
            let losses = self.step()?;
            let it = self.iteration;
            if it.is_multiple_of(self.config.eval_interval) || it == self.config.iterations {
                rows.push(MetricsRow {
                    iter: it,
                    losses,
                    target_d1: self.target_d1()?,
                });
            }
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_echo: self.config.to_text(),
            model: self.model,
            params: self.params.clone(),
            adam: self.adam.clone(),
            color: self.color,
            iteration: self.iteration as u64,
            sampler_pos: self.rng.get_word_pos(),
        }
    }
}

/// Outcome of [`train_adapt`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Loads both datasets, trains, and writes `checkpoint.bin` and
/// `metrics.csv` under `config.out`.
pub fn train_adapt(config: &TrainConfig) -> Result<TrainSummary> {
    let source = load_dataset(&config.source)?;
    let target = load_dataset(&config.target)?;
    let mut trainer = match &config.resume {
        Some(p) => Trainer::resume(config.clone(), Checkpoint::load(p)?, &source, &target)?,
        None => Trainer::new(config.clone(), &source, &target)?,
    };
    let rows = trainer.run()?;
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let metrics_path = config.out.join("metrics.csv");
    fs::write(&metrics_path, metrics_csv(&rows)).map_err(|e| Error::io(&metrics_path, e))?;
    let checkpoint_path = config.out.join("checkpoint.bin");
    trainer.checkpoint().save(&checkpoint_path)?;
    Ok(TrainSummary {
        rows,
        checkpoint_path,
        metrics_path,
    })
}

/// Disparity prediction for one full-size sample.
pub fn predict(params: &ParamSet, model: &ModelConfig, left: &RgbImage, right: &RgbImage) -> Result<Tensor4> {
    let mut g = Graph::new();
    let bp = params.bind_frozen(&mut g);
    let l = g.constant(image_to_tensor(left));
    let r = g.constant(image_to_tensor(right));
    let out = forward_disparity(&mut g, l, r, &bp, &model.stereo)?;
    Ok(g.value(out.disparity).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_sample: Vec<MetricReport>,
    pub aggregate: MetricReport,
}

/// Scores predicted disparity maps against ground truth.
pub fn score(preds: &[Tensor4], samples: &[StereoSample], threshold: D1Threshold) -> Result<EvalReport> {
    if preds.len() != samples.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let per_sample = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| d1_error(p, s.disparity.tensor(), &s.valid, threshold))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&per_sample)?;
    Ok(EvalReport { per_sample, aggregate })
}

/// Runs the network on every sample and scores it.
pub fn evaluate(params: &ParamSet, model: &ModelConfig, samples: &[StereoSample], threshold: D1Threshold) -> Result<EvalReport> {
    let preds = samples
        .iter()
        .map(|s| {
            if s.width() < model.stereo.max_disp {
                return Err(Error::invalid(format!(
                    "sample width {} is below the checkpoint's max disparity {}",
                    s.width(),
                    model.stereo.max_disp
                )));
            }
            predict(params, model, &s.left, &s.right)
        })
        .collect::<Result<Vec<_>>>()?;
    score(&preds, samples, threshold)
}

/// Loads a checkpoint and evaluates it on a dataset directory.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path, threshold: D1Threshold) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let samples = load_dataset(data)?;
    evaluate(&ckpt.params, &ckpt.model, &samples, threshold)
}
