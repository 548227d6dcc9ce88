//! Cost normalization and cost-volume construction.
//!
//! [`cost_norm`] divides every channel by its spatial L2 norm and then every
//! pixel's feature vector by its channel L2 norm. It has no parameters and
//! no mean subtraction, and it is applied once to both views just before the
//! volume is built.

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Tensor4, Var};

/// Default ε inside the square roots of both normalization steps.
pub const NORM_EPS: f64 = 1e-12;

/// `F / sqrt(Σ_{h,w} F² + eps)` per `(n, c)` slice.
pub fn channel_normalize(g: &mut Graph, f: Var, eps: f64) -> Result<Var> {
    let sq = g.square(f);
    let s = g.sum(sq, &[2, 3])?;
    let s = g.add_scalar(s, eps);
    let norm = g.sqrt(s)?;
    g.div_bcast(f, norm)
}

/// `F / sqrt(Σ_c F² + eps)` per `(n, h, w)` feature vector.
pub fn pixel_normalize(g: &mut Graph, f: Var, eps: f64) -> Result<Var> {
    if g.shape(f)[1] == 0 {
        return Err(Error::Empty("pixel_normalize needs at least one channel".into()));
    }
    let sq = g.square(f);
    let s = g.sum(sq, &[1])?;
    let s = g.add_scalar(s, eps);
    let norm = g.sqrt(s)?;
    g.div_bcast(f, norm)
}

/// Channel normalization followed by pixel normalization.
pub fn cost_norm(g: &mut Graph, f: Var) -> Result<Var> {
    cost_norm_eps(g, f, NORM_EPS)
}

pub fn cost_norm_eps(g: &mut Graph, f: Var, eps: f64) -> Result<Var> {
    let c = channel_normalize(g, f, eps)?;
    pixel_normalize(g, c, eps)
}

/// [`cost_norm_eps`] evaluated outside any training graph.
pub fn cost_norm_tensor(f: &Tensor4, eps: f64) -> Result<Tensor4> {
    let mut g = Graph::new();
    let v = g.constant(f.clone());
    let out = cost_norm_eps(&mut g, v, eps)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    /// `(n, D, h, w)` matching scores.
    Correlation,
    /// `(n, 2c, D, h, w)` stored as a `(n, 2c·D, h, w)` tensor.
    Concatenation { channels: usize },
}

/// A matching-cost volume with its validity mask. Positions whose right
/// correspondence `x - d` falls left of the image are invalid and hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub kind: VolumeKind,
    pub max_disp: usize,
    pub values: Tensor4,
    /// `(n, D, h, w)`, 1 where `x - d >= 0`.
    pub valid: Tensor4,
}

impl CostVolume {
    pub fn from_parts(kind: VolumeKind, max_disp: usize, values: Tensor4, valid: Tensor4) -> Result<Self> {
        if max_disp == 0 {
            return Err(Error::invalid("cost volume needs at least one disparity"));
        }
        let [n, ch, h, w] = values.shape();
        let expect_ch = match kind {
            VolumeKind::Correlation => max_disp,
            VolumeKind::Concatenation { channels } => 2 * channels * max_disp,
        };
        if ch != expect_ch || valid.shape() != [n, max_disp, h, w] {
            return Err(Error::ShapeMismatch {
                op: "CostVolume::from_parts",
                left: values.shape(),
                right: valid.shape(),
            });
        }
        Ok(Self {
            kind,
            max_disp,
            values,
            valid,
        })
    }

    pub fn correlation(fl: &Tensor4, fr: &Tensor4, max_disp: usize) -> Result<Self> {
        check_pair(fl, fr, max_disp)?;
        let values = correlation_forward(fl, fr, max_disp);
        let valid = validity_mask(fl.shape(), max_disp);
        Self::from_parts(VolumeKind::Correlation, max_disp, values, valid)
    }

    pub fn concatenation(fl: &Tensor4, fr: &Tensor4, max_disp: usize) -> Result<Self> {
        check_pair(fl, fr, max_disp)?;
        let values = concat_forward(fl, fr, max_disp);
        let valid = validity_mask(fl.shape(), max_disp);
        Self::from_parts(
            VolumeKind::Concatenation {
                channels: fl.shape()[1],
            },
            max_disp,
            values,
            valid,
        )
    }

    /// Concatenation-volume element `(n, k, d, y, x)`, `k < 2c`.
    pub fn concat_at(&self, n: usize, k: usize, d: usize, y: usize, x: usize) -> f64 {
        self.values.at([n, k * self.max_disp + d, y, x])
    }

    /// Correlation-volume element or, for concatenation volumes, the
    /// half-by-half dot product divided by `c`.
    pub fn score(&self, n: usize, d: usize, y: usize, x: usize) -> f64 {
        match self.kind {
            VolumeKind::Correlation => self.values.at([n, d, y, x]),
            VolumeKind::Concatenation { channels } => {
                let dot: f64 = (0..channels)
                    .map(|k| self.concat_at(n, k, d, y, x) * self.concat_at(n, channels + k, d, y, x))
                    .sum();
                dot / channels as f64
            }
        }
    }

    /// Matching scores at valid positions, in storage order.
    pub fn valid_scores(&self) -> Vec<f64> {
        let [n, dd, h, w] = self.valid.shape();
        let mut out = Vec::new();
        for ni in 0..n {
            for d in 0..dd {
                for y in 0..h {
                    for x in 0..w {
                        if self.valid.at([ni, d, y, x]) > 0.0 {
                            out.push(self.score(ni, d, y, x));
                        }
                    }
                }
            }
        }
        out
    }
}

fn check_pair(fl: &Tensor4, fr: &Tensor4, max_disp: usize) -> Result<()> {
    if fl.shape() != fr.shape() {
        return Err(Error::ShapeMismatch {
            op: "cost volume",
            left: fl.shape(),
            right: fr.shape(),
        });
    }
    if max_disp == 0 {
        return Err(Error::invalid("max disparity must be at least 1"));
    }
    if max_disp > fl.shape()[3] {
        return Err(Error::invalid(format!(
            "max disparity {max_disp} exceeds feature width {}",
            fl.shape()[3]
        )));
    }
    Ok(())
}

fn validity_mask([n, _, h, w]: [usize; 4], max_disp: usize) -> Tensor4 {
    Tensor4::from_fn([n, max_disp, h, w], |[_, d, _, x]| if x >= d { 1.0 } else { 0.0 })
}

fn correlation_forward(fl: &Tensor4, fr: &Tensor4, max_disp: usize) -> Tensor4 {
    let [n, c, h, w] = fl.shape();
    let inv_c = 1.0 / c as f64;
    let mut out = Tensor4::zeros([n, max_disp, h, w]);
    for ni in 0..n {
        for d in 0..max_disp {
            let oplane = out.plane_mut(ni, d);
            for k in 0..c {
                let lp = fl.plane(ni, k);
                let rp = fr.plane(ni, k);
                for y in 0..h {
                    let row = y * w;
                    let o = &mut oplane[row + d..row + w];
                    let l = &lp[row + d..row + w];
                    let r = &rp[row..row + w - d];
                    for ((o, l), r) in o.iter_mut().zip(l).zip(r) {
                        *o += l * r;
                    }
                }
            }
            oplane.iter_mut().for_each(|v| *v *= inv_c);
        }
    }
    out
}

fn concat_forward(fl: &Tensor4, fr: &Tensor4, max_disp: usize) -> Tensor4 {
    let [n, c, h, w] = fl.shape();
    let mut out = Tensor4::zeros([n, 2 * c * max_disp, h, w]);
    for ni in 0..n {
        for k in 0..c {
            for d in 0..max_disp {
                out.plane_mut(ni, k * max_disp + d).copy_from_slice(fl.plane(ni, k));
                let rp = fr.plane(ni, k);
                let op = out.plane_mut(ni, (c + k) * max_disp + d);
                for y in 0..h {
                    let row = y * w;
                    op[row + d..row + w].copy_from_slice(&rp[row..row + w - d]);
                }
            }
        }
    }
    out
}

#[derive(Debug)]
struct CorrelationOp {
    max_disp: usize,
}

impl CustomOp for CorrelationOp {
    fn name(&self) -> &'static str {
        "correlation"
    }

    fn backward(&self, parents: &[&Tensor4], _output: &Tensor4, grad: &Tensor4) -> Vec<Option<Tensor4>> {
        let (fl, fr) = (parents[0], parents[1]);
        let [n, c, h, w] = fl.shape();
        let inv_c = 1.0 / c as f64;
        let mut gl = Tensor4::zeros(fl.shape());
        let mut gr = Tensor4::zeros(fr.shape());
        for ni in 0..n {
            for d in 0..self.max_disp {
                let gp = grad.plane(ni, d);
                for k in 0..c {
                    let lp = fl.plane(ni, k);
                    let rp = fr.plane(ni, k);
                    for y in 0..h {
                        let row = y * w;
                        let gs = &gp[row + d..row + w];
                        let gl_row = &mut gl.plane_mut(ni, k)[row + d..row + w];
                        for ((o, g), r) in gl_row.iter_mut().zip(gs).zip(&rp[row..row + w - d]) {
                            *o += inv_c * g * r;
                        }
                        let gr_row = &mut gr.plane_mut(ni, k)[row..row + w - d];
                        for ((o, g), l) in gr_row.iter_mut().zip(gs).zip(&lp[row + d..row + w]) {
                            *o += inv_c * g * l;
                        }
                    }
                }
            }
        }
        vec![Some(gl), Some(gr)]
    }
}

#[derive(Debug)]
struct ConcatVolumeOp {
    max_disp: usize,
}

impl CustomOp for ConcatVolumeOp {
    fn name(&self) -> &'static str {
        "concat_volume"
    }

    fn backward(&self, parents: &[&Tensor4], _output: &Tensor4, grad: &Tensor4) -> Vec<Option<Tensor4>> {
        let fl = parents[0];
        let [n, c, h, w] = fl.shape();
        let mut gl = Tensor4::zeros(fl.shape());
        let mut gr = Tensor4::zeros(fl.shape());
        for ni in 0..n {
            for k in 0..c {
                for d in 0..self.max_disp {
                    let gp = grad.plane(ni, k * self.max_disp + d);
                    for (o, g) in gl.plane_mut(ni, k).iter_mut().zip(gp) {
                        *o += g;
                    }
                    let gp = grad.plane(ni, (c + k) * self.max_disp + d);
                    let rp = gr.plane_mut(ni, k);
                    for y in 0..h {
                        let row = y * w;
                        for (o, g) in rp[row..row + w - d].iter_mut().zip(&gp[row + d..row + w]) {
                            *o += g;
                        }
                    }
                }
            }
        }
        vec![Some(gl), Some(gr)]
    }
}

/// Differentiable correlation volume `(1/c) Σ_k Fl(k,y,x)·Fr(k,y,x-d)`.
/// Returns the `(n, D, h, w)` volume and its validity mask.
pub fn correlation_volume(g: &mut Graph, fl: Var, fr: Var, max_disp: usize) -> Result<(Var, Tensor4)> {
    check_pair(g.value(fl), g.value(fr), max_disp)?;
    let value = correlation_forward(g.value(fl), g.value(fr), max_disp);
    let valid = validity_mask(g.shape(fl), max_disp);
    let v = g.custom(Box::new(CorrelationOp { max_disp }), &[fl, fr], value);
    Ok((v, valid))
}

/// Differentiable concatenation volume laid out as `(n, 2c·D, h, w)`.
pub fn concat_volume(g: &mut Graph, fl: Var, fr: Var, max_disp: usize) -> Result<(Var, Tensor4)> {
    check_pair(g.value(fl), g.value(fr), max_disp)?;
    let value = concat_forward(g.value(fl), g.value(fr), max_disp);
    let valid = validity_mask(g.shape(fl), max_disp);
    let v = g.custom(Box::new(ConcatVolumeOp { max_disp }), &[fl, fr], value);
    Ok((v, valid))
}

/// Proportion of matching costs per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CostHistogram {
    /// `bins + 1` monotone edges.
    pub edges: Vec<f64>,
    pub proportions: Vec<f64>,
}

impl CostHistogram {
    /// Histogram of `values` over `range` (or their min/max). Values outside
    /// an explicit range are clamped into the first/last bin.
    pub fn from_values(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Self> {
        if bins == 0 {
            return Err(Error::invalid("histogram needs at least one bin"));
        }
        if values.is_empty() {
            return Err(Error::Empty("histogram of zero valid costs".into()));
        }
        let (mut lo, mut hi) = range.unwrap_or_else(|| {
            values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
        });
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::invalid(format!("bad histogram range [{lo}, {hi}]")));
        }
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = ((v - lo) / width).floor();
            let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
            counts[b] += 1;
        }
        let total = values.len() as f64;
        Ok(Self {
            edges,
            proportions: counts.iter().map(|&c| c as f64 / total).collect(),
        })
    }
}

/// Distribution of valid matching scores in `volume`.
pub fn cost_histogram(volume: &CostVolume, bins: usize, range: Option<(f64, f64)>) -> Result<CostHistogram> {
    let values = volume.valid_scores();
    if values.is_empty() {
        return Err(Error::Empty("every position of the cost volume is masked".into()));
    }
    CostHistogram::from_values(&values, bins, range)
}
