//! Toy correlation stereo network and the occlusion prediction network.
//!
//! Disparity path: shared 3×3 conv feature extractor (stride 1) →
//! optional cost normalization → correlation volume → residual 2-D conv
//! regularizer over the disparity axis → softmax over scores → soft-argmin.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cost::{correlation_volume, cost_norm};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor4, Var};

const LEAK: f64 = 0.1;
const IMAGE_CHANNELS: usize = 3;
/// Disparity, right RGB, error map.
pub const OCCLUSION_INPUT_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StereoNetConfig {
    pub feature_channels: usize,
    pub feature_layers: usize,
    pub max_disp: usize,
    pub regularizer_layers: usize,
    pub cost_norm: bool,
}

impl Default for StereoNetConfig {
    fn default() -> Self {
        Self {
            feature_channels: 16,
            feature_layers: 3,
            max_disp: 16,
            regularizer_layers: 2,
            cost_norm: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OcclusionNetConfig {
    pub hidden_channels: usize,
    pub layers: usize,
}

impl Default for OcclusionNetConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            layers: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelConfig {
    pub stereo: StereoNetConfig,
    pub occlusion: OcclusionNetConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.stereo;
        let o = &self.occlusion;
        if s.max_disp == 0 || s.feature_channels == 0 || s.feature_layers == 0 || s.regularizer_layers == 0 {
            return Err(Error::invalid("stereo net sizes must be at least 1"));
        }
        if o.layers == 0 || o.hidden_channels == 0 {
            return Err(Error::invalid("occlusion net sizes must be at least 1"));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, [usize; 4])> {
        let s = &self.stereo;
        let mut out = Vec::new();
        let mut conv = |prefix: &str, i: usize, cin: usize, cout: usize| {
            out.push((format!("{prefix}.{i}.weight"), [cout, cin, 3, 3]));
            out.push((format!("{prefix}.{i}.bias"), [1, cout, 1, 1]));
        };
        for i in 0..s.feature_layers {
            let cin = if i == 0 { IMAGE_CHANNELS } else { s.feature_channels };
            conv("feat", i, cin, s.feature_channels);
        }
        for i in 0..s.regularizer_layers {
            conv("reg", i, s.max_disp, s.max_disp);
        }
        let o = &self.occlusion;
        for i in 0..o.layers {
            let cin = if i == 0 { OCCLUSION_INPUT_CHANNELS } else { o.hidden_channels };
            let cout = if i + 1 == o.layers { 1 } else { o.hidden_channels };
            conv("occ", i, cin, cout);
        }
        out
    }
}

/// Named parameter tensors in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor4>,
}

impl ParamSet {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".weight") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
                Tensor4::from_fn(shape, |_| normal.sample(&mut rng))
            } else {
                Tensor4::zeros(shape)
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self { seed, names, tensors })
    }

    /// Rebuilds a set from saved tensors, checking them against `config`.
    pub fn from_named(config: &ModelConfig, seed: u64, named: Vec<(String, Tensor4)>) -> Result<Self> {
        let want = config.param_shapes();
        if want.len() != named.len() {
            return Err(Error::invalid(format!("expected {} parameters, got {}", want.len(), named.len())));
        }
        for ((wn, ws), (n, t)) in want.iter().zip(&named) {
            if wn != n || *ws != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {n} {:?} does not match expected {wn} {ws:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { seed, names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor4] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor4] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor4> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Places every tensor on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            names: self.names.clone(),
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Places every tensor on `g` as a constant (evaluation).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            names: self.names.clone(),
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// Graph handles for a [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Swaps in another node for `name`, e.g. to differentiate one tensor.
    pub fn replace(&mut self, name: &str, v: Var) {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            self.vars[i] = v;
        }
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    fn conv(&self, g: &mut Graph, x: Var, prefix: &str, i: usize) -> Result<Var> {
        let w = self.get(&format!("{prefix}.{i}.weight"))?;
        let b = self.get(&format!("{prefix}.{i}.bias"))?;
        g.conv2d(x, w, b, 1, 1)
    }
}

/// Shared-weight feature extractor; leaky ReLU between layers, linear output.
pub fn extract_features(g: &mut Graph, image: Var, params: &BoundParams, config: &StereoNetConfig) -> Result<Var> {
    let mut x = image;
    for i in 0..config.feature_layers {
        x = params.conv(g, x, "feat", i)?;
        if i + 1 < config.feature_layers {
            x = g.leaky_relu(x, LEAK);
        }
    }
    Ok(x)
}

/// Per-pixel distribution over disparity hypotheses, softmax of `sign · volume`.
pub fn softmax_disparity(g: &mut Graph, volume: Var, sign: f64) -> Var {
    let v = if sign == 1.0 { volume } else { g.mul_scalar(volume, sign) };
    g.softmax_channels(v)
}

/// Expected disparity `Σ_d d · p_d`, shape `(n, 1, h, w)`.
pub fn soft_argmin(g: &mut Graph, probs: Var) -> Result<Var> {
    let d = g.shape(probs)[1];
    let idx = g.constant(Tensor4::from_fn([1, d, 1, 1], |[_, c, _, _]| c as f64));
    let weighted = g.mul_bcast(probs, idx)?;
    g.sum(weighted, &[1])
}

/// Intermediate nodes of one disparity forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DisparityOutput {
    pub disparity: Var,
    pub probs: Var,
    pub scores: Var,
}

/// Full disparity forward pass, `(n, 1, h, w)` in `[0, D - 1]`.
pub fn forward_disparity(
    g: &mut Graph,
    il: Var,
    ir: Var,
    params: &BoundParams,
    config: &StereoNetConfig,
) -> Result<DisparityOutput> {
    forward_disparity_scaled(g, il, ir, params, config, 1.0)
}

/// [`forward_disparity`] with both feature maps multiplied by
/// `feature_scale` right after extraction.
pub fn forward_disparity_scaled(
    g: &mut Graph,
    il: Var,
    ir: Var,
    params: &BoundParams,
    config: &StereoNetConfig,
    feature_scale: f64,
) -> Result<DisparityOutput> {
    let (ls, rs) = (g.shape(il), g.shape(ir));
    if ls != rs {
        return Err(Error::ShapeMismatch {
            op: "forward_disparity",
            left: ls,
            right: rs,
        });
    }
    if ls[3] < config.max_disp {
        return Err(Error::invalid(format!(
            "image width {} is smaller than max disparity {}",
            ls[3], config.max_disp
        )));
    }
    let mut fl = extract_features(g, il, params, config)?;
    let mut fr = extract_features(g, ir, params, config)?;
    if feature_scale != 1.0 {
        fl = g.mul_scalar(fl, feature_scale);
        fr = g.mul_scalar(fr, feature_scale);
    }
    if config.cost_norm {
        fl = cost_norm(g, fl)?;
        fr = cost_norm(g, fr)?;
    }
    let (corr, _valid) = correlation_volume(g, fl, fr, config.max_disp)?;

    // The regularizer sees scores centered over disparities. Softmax ignores
    // a per-pixel offset anyway, and without it the convs cannot turn the
    // volume's DC level into a constant disparity prior.
    let mean = g.mean(corr, &[1])?;
    let mean = g.broadcast_to(mean, g.shape(corr))?;
    let mut h = g.sub(corr, mean)?;
    for i in 0..config.regularizer_layers {
        h = params.conv(g, h, "reg", i)?;
        if i + 1 < config.regularizer_layers {
            h = g.leaky_relu(h, LEAK);
        }
    }
    let scores = g.add(corr, h)?;
    let probs = softmax_disparity(g, scores, 1.0);
    let disparity = soft_argmin(g, probs)?;
    Ok(DisparityOutput {
        disparity,
        probs,
        scores,
    })
}

/// Occlusion probability from disparity (scaled by `1 / (D - 1)`), the
/// right image, and the error map.
pub fn forward_occlusion(
    g: &mut Graph,
    disparity: Var,
    ir: Var,
    error: Var,
    params: &BoundParams,
    config: &ModelConfig,
) -> Result<Var> {
    let d_scale = config.stereo.max_disp.saturating_sub(1).max(1) as f64;
    let dn = g.mul_scalar(disparity, 1.0 / d_scale);
    let mut x = g.concat_channels(&[dn, ir, error])?;
    let layers = config.occlusion.layers;
    for i in 0..layers {
        x = params.conv(g, x, "occ", i)?;
        if i + 1 < layers {
            x = g.leaky_relu(x, LEAK);
        }
    }
    Ok(g.sigmoid(x))
}
