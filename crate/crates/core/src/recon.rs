//! Photometric reconstruction: differentiable right-to-left warping, 3×3
//! SSIM, ground-truth occlusion from disparity, and the five training
//! losses with their weighted total.
//!
//! Images are `(n, c, h, w)` in `[0, 1]`; disparities and occlusion masks
//! are `(n, 1, h, w)`. Left-view convention: left pixel `x` corresponds to
//! right pixel `x - d`.

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Tensor4, Var};

/// SSIM stabilizers for images in `[0, 1]`.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Occlusion probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before logs.
pub const BCE_EPS: f64 = 1e-7;

/// Dense disparity in pixels, `(n, 1, h, w)`, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap(Tensor4);

impl DisparityMap {
    pub fn new(t: Tensor4) -> Result<Self> {
        if t.shape()[1] != 1 {
            return Err(Error::invalid(format!("disparity map must have one channel, got {:?}", t.shape())));
        }
        if t.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("disparity map values must be finite and non-negative"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.0
    }
}

/// Per-pixel occlusion probability, `(n, 1, h, w)`, 1 = occluded.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask(Tensor4);

impl OcclusionMask {
    pub fn new(t: Tensor4) -> Result<Self> {
        if t.shape()[1] != 1 {
            return Err(Error::invalid(format!("occlusion mask must have one channel, got {:?}", t.shape())));
        }
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("occlusion mask values must lie in [0, 1]"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.0
    }
}

// ---- warping ---------------------------------------------------------

/// Bilinear sample position for one pixel: `(x0, t, valid)`.
#[inline]
fn sample_pos(x: usize, d: f64, w: usize) -> (usize, f64, bool) {
    let s = x as f64 - d;
    if !(s >= 0.0 && s <= (w - 1) as f64) {
        return (0, 0.0, false);
    }
    let x0 = s.floor();
    (x0 as usize, s - x0, true)
}

fn warp_forward(ir: &Tensor4, disp: &Tensor4) -> (Tensor4, Tensor4) {
    let [n, c, h, w] = ir.shape();
    let mut out = Tensor4::zeros(ir.shape());
    let mut valid = Tensor4::zeros([n, 1, h, w]);
    for ni in 0..n {
        let dp = disp.plane(ni, 0);
        for y in 0..h {
            for x in 0..w {
                let (x0, t, ok) = sample_pos(x, dp[y * w + x], w);
                if !ok {
                    continue;
                }
                valid.set([ni, 0, y, x], 1.0);
                for ci in 0..c {
                    let row = &ir.plane(ni, ci)[y * w..(y + 1) * w];
                    let v = if t > 0.0 {
                        (1.0 - t) * row[x0] + t * row[x0 + 1]
                    } else {
                        row[x0]
                    };
                    out.set([ni, ci, y, x], v);
                }
            }
        }
    }
    (out, valid)
}

#[derive(Debug)]
struct WarpOp;

impl CustomOp for WarpOp {
    fn name(&self) -> &'static str {
        "warp_right_to_left"
    }

    fn backward(&self, parents: &[&Tensor4], _output: &Tensor4, grad: &Tensor4) -> Vec<Option<Tensor4>> {
        let (ir, disp) = (parents[0], parents[1]);
        let [n, c, h, w] = ir.shape();
        let mut gi = Tensor4::zeros(ir.shape());
        let mut gd = Tensor4::zeros(disp.shape());
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let (x0, t, ok) = sample_pos(x, disp.at([ni, 0, y, x]), w);
                    if !ok {
                        continue;
                    }
                    let mut dd = 0.0;
                    for ci in 0..c {
                        let g = grad.at([ni, ci, y, x]);
                        let base = gi.offset([ni, ci, y, 0]);
                        gi.data_mut()[base + x0] += (1.0 - t) * g;
                        if x0 + 1 < w {
                            gi.data_mut()[base + x0 + 1] += t * g;
                            // ds/dd = -1
                            dd -= g * (ir.at([ni, ci, y, x0 + 1]) - ir.at([ni, ci, y, x0]));
                        }
                    }
                    gd.set([ni, 0, y, x], dd);
                }
            }
        }
        vec![Some(gi), Some(gd)]
    }
}

/// Reconstructs the left view by sampling the right image at `x - d`.
/// Returns the warped image and a `(n, 1, h, w)` mask that is 0 where the
/// sample falls outside `[0, w - 1]` (those pixels are 0 in the output).
pub fn warp_right_to_left(g: &mut Graph, ir: Var, disp: Var) -> Result<(Var, Tensor4)> {
    let [n, _, h, w] = g.shape(ir);
    let ds = g.shape(disp);
    if ds != [n, 1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "warp_right_to_left",
            left: g.shape(ir),
            right: ds,
        });
    }
    let (out, valid) = warp_forward(g.value(ir), g.value(disp));
    Ok((g.custom(Box::new(WarpOp), &[ir, disp], out), valid))
}

/// Channel-mean absolute difference `(n, 1, h, w)`.
pub fn error_map(g: &mut Graph, il: Var, warped: Var) -> Result<Var> {
    let diff = g.sub(il, warped)?;
    let a = g.abs(diff);
    g.mean(a, &[1])
}

// ---- SSIM ------------------------------------------------------------

fn box3_forward(t: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor4::zeros(t.shape());
    for ni in 0..n {
        for ci in 0..c {
            let src = t.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for y in 0..h {
                let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
                for x in 0..w {
                    let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
                    let mut s = 0.0;
                    for &r in &rows {
                        for &q in &cols {
                            s += src[r * w + q];
                        }
                    }
                    dst[y * w + x] = s / 9.0;
                }
            }
        }
    }
    out
}

#[derive(Debug)]
struct Box3Op;

impl CustomOp for Box3Op {
    fn name(&self) -> &'static str {
        "box3x3"
    }

    fn backward(&self, parents: &[&Tensor4], _output: &Tensor4, grad: &Tensor4) -> Vec<Option<Tensor4>> {
        let [n, c, h, w] = parents[0].shape();
        let mut gi = Tensor4::zeros(parents[0].shape());
        for ni in 0..n {
            for ci in 0..c {
                let gp = grad.plane(ni, ci);
                let dst = gi.plane_mut(ni, ci);
                for y in 0..h {
                    let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
                    for x in 0..w {
                        let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
                        let g = gp[y * w + x] / 9.0;
                        for &r in &rows {
                            for &q in &cols {
                                dst[r * w + q] += g;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gi)]
    }
}

/// 3×3 mean filter with replicated borders.
pub fn box3x3(g: &mut Graph, x: Var) -> Var {
    let v = box3_forward(g.value(x));
    g.custom(Box::new(Box3Op), &[x], v)
}

/// Per-pixel, per-channel SSIM over 3×3 uniform windows, clamped to `[-1, 1]`.
pub fn ssim3x3(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let mu_a = box3x3(g, a);
    let mu_b = box3x3(g, b);
    let aa = g.square(a);
    let bb = g.square(b);
    let ab = g.mul(a, b)?;
    let e_aa = box3x3(g, aa);
    let e_bb = box3x3(g, bb);
    let e_ab = box3x3(g, ab);

    let mu_a2 = g.square(mu_a);
    let mu_b2 = g.square(mu_b);
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_a2)?;
    let var_b = g.sub(e_bb, mu_b2)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let n1 = g.mul_scalar(mu_ab, 2.0);
    let n1 = g.add_scalar(n1, SSIM_C1);
    let n2 = g.mul_scalar(cov, 2.0);
    let n2 = g.add_scalar(n2, SSIM_C2);
    let num = g.mul(n1, n2)?;

    let d1 = g.add(mu_a2, mu_b2)?;
    let d1 = g.add_scalar(d1, SSIM_C1);
    let d2 = g.add(var_a, var_b)?;
    let d2 = g.add_scalar(d2, SSIM_C2);
    let den = g.mul(d1, d2)?;

    let s = g.div(num, den)?;
    Ok(g.clamp(s, -1.0, 1.0))
}

// ---- occlusion -------------------------------------------------------

/// Binary occlusion of the left view from its disparity by a per-row
/// z-buffer: left pixel `x` lands on right pixel `round(x - d)`; among
/// pixels landing together only the largest disparity is visible, and
/// pixels landing outside the right image are occluded.
pub fn gt_occlusion_from_disparity(disp: &DisparityMap) -> OcclusionMask {
    let t = disp.tensor();
    let [n, _, h, w] = t.shape();
    let mut mask = Tensor4::zeros(t.shape());
    let mut zbuf = vec![f64::NEG_INFINITY; w];
    let mut target = vec![0isize; w];
    for ni in 0..n {
        for y in 0..h {
            let row = &t.plane(ni, 0)[y * w..(y + 1) * w];
            zbuf.fill(f64::NEG_INFINITY);
            for (x, &d) in row.iter().enumerate() {
                let r = (x as f64 - d).round();
                target[x] = if r >= 0.0 && r < w as f64 { r as isize } else { -1 };
                if target[x] >= 0 {
                    let z = &mut zbuf[target[x] as usize];
                    *z = z.max(d);
                }
            }
            let out = &mut mask.plane_mut(ni, 0)[y * w..(y + 1) * w];
            for x in 0..w {
                let visible = target[x] >= 0 && row[x] >= zbuf[target[x] as usize];
                out[x] = if visible { 0.0 } else { 1.0 };
            }
        }
    }
    OcclusionMask(mask)
}

// ---- losses ----------------------------------------------------------

fn masked_mean(g: &mut Graph, x: Var, mask: &Tensor4, what: &str) -> Result<Var> {
    let shape = g.shape(x);
    let [n, c, h, w] = shape;
    if mask.shape() != [n, 1, h, w] && mask.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "masked mean",
            left: shape,
            right: mask.shape(),
        });
    }
    let count = mask.sum() * if mask.shape()[1] == 1 { c as f64 } else { 1.0 };
    if count <= 0.0 {
        return Err(Error::Empty(format!("{what}: no valid pixels")));
    }
    let m = g.constant(mask.clone());
    let xm = g.mul_bcast(x, m)?;
    let s = g.sum_all(xm)?;
    Ok(g.mul_scalar(s, 1.0 / count))
}

/// Occlusion-aware appearance loss: with `A = I_l ⊙ (1-O)` and
/// `B = Ī_l ⊙ (1-O)`, `α·mean((1 - SSIM(A,B))/2) + (1-α)·mean|A - B|`,
/// both means over warp-valid pixels.
pub fn loss_recon(g: &mut Graph, il: Var, warped: Var, occ: Var, valid: &Tensor4, alpha: f64) -> Result<Var> {
    let keep = g.rsub_scalar(1.0, occ);
    let a = g.mul_bcast(il, keep)?;
    let b = g.mul_bcast(warped, keep)?;

    let ssim = ssim3x3(g, a, b)?;
    let dssim = g.rsub_scalar(1.0, ssim);
    let dssim = g.mul_scalar(dssim, 0.5);
    let t_ssim = masked_mean(g, dssim, valid, "loss_recon")?;

    let diff = g.sub(a, b)?;
    let l1 = g.abs(diff);
    let t_l1 = masked_mean(g, l1, valid, "loss_recon")?;

    let t_ssim = g.mul_scalar(t_ssim, alpha);
    let t_l1 = g.mul_scalar(t_l1, 1.0 - alpha);
    g.add(t_ssim, t_l1)
}

fn image_grad_weight(g: &mut Graph, il: Var, origin_a: [usize; 4], origin_b: [usize; 4], shape: [usize; 4]) -> Result<Var> {
    let [n, c, h, w] = shape;
    let ia = g.crop(il, origin_a, [n, c, h, w])?;
    let ib = g.crop(il, origin_b, [n, c, h, w])?;
    let d = g.sub(ia, ib)?;
    let d = g.abs(d);
    let m = g.mean(d, &[1])?;
    let neg = g.neg(m);
    Ok(g.exp(neg))
}

/// Edge-aware smoothness `mean|∂x d|·e^{-|∂x I|} + mean|∂y d|·e^{-|∂y I|}`
/// with forward differences; image gradients are channel-mean magnitudes.
pub fn loss_smooth(g: &mut Graph, disp: Var, il: Var) -> Result<Var> {
    let [n, _, h, w] = g.shape(disp);
    let [ni, c, hi, wi] = g.shape(il);
    if (ni, hi, wi) != (n, h, w) {
        return Err(Error::ShapeMismatch {
            op: "loss_smooth",
            left: g.shape(disp),
            right: g.shape(il),
        });
    }
    let mut terms = Vec::new();
    if w > 1 {
        let d1 = g.crop(disp, [0, 0, 0, 1], [n, 1, h, w - 1])?;
        let d0 = g.crop(disp, [0, 0, 0, 0], [n, 1, h, w - 1])?;
        let dd = g.sub(d1, d0)?;
        let dd = g.abs(dd);
        let wgt = image_grad_weight(g, il, [0, 0, 0, 1], [0, 0, 0, 0], [n, c, h, w - 1])?;
        let t = g.mul(dd, wgt)?;
        terms.push(g.mean_all(t)?);
    }
    if h > 1 {
        let d1 = g.crop(disp, [0, 0, 1, 0], [n, 1, h - 1, w])?;
        let d0 = g.crop(disp, [0, 0, 0, 0], [n, 1, h - 1, w])?;
        let dd = g.sub(d1, d0)?;
        let dd = g.abs(dd);
        let wgt = image_grad_weight(g, il, [0, 0, 1, 0], [0, 0, 0, 0], [n, c, h - 1, w])?;
        let t = g.mul(dd, wgt)?;
        terms.push(g.mean_all(t)?);
    }
    match terms.as_slice() {
        [] => Ok(g.constant(Tensor4::scalar(0.0))),
        [t] => Ok(*t),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// L1 regularizer on the occlusion mask, as a per-pixel mean.
pub fn loss_occ_reg(g: &mut Graph, occ: Var) -> Result<Var> {
    g.mean_all(occ)
}

/// Mean binary cross entropy of predicted occlusion against a binary mask.
pub fn loss_bce(g: &mut Graph, occ: Var, target: &Tensor4) -> Result<Var> {
    if g.shape(occ) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_bce",
            left: g.shape(occ),
            right: target.shape(),
        });
    }
    let o = g.clamp(occ, BCE_EPS, 1.0 - BCE_EPS);
    let log_o = g.log(o)?;
    let one_minus = g.rsub_scalar(1.0, o);
    let log_1mo = g.log(one_minus)?;
    let t = g.constant(target.clone());
    let t_inv = g.constant(target.map(|v| 1.0 - v));
    let pos = g.mul(t, log_o)?;
    let neg = g.mul(t_inv, log_1mo)?;
    let s = g.add(pos, neg)?;
    let m = g.mean_all(s)?;
    Ok(g.neg(m))
}

/// Mean smooth-L1 of `d - d_hat` over pixels where `valid` is nonzero.
pub fn loss_smooth_l1(g: &mut Graph, disp: Var, gt: &Tensor4, valid: &Tensor4) -> Result<Var> {
    if g.shape(disp) != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_smooth_l1",
            left: g.shape(disp),
            right: gt.shape(),
        });
    }
    let t = g.constant(gt.clone());
    let x = g.sub(disp, t)?;
    let a = g.abs(x);
    // q·(a - q/2) with q = min(a, 1) gives 0.5a² below 1 and a - 0.5 above
    let q = g.clamp(a, 0.0, 1.0);
    let half_q = g.mul_scalar(q, 0.5);
    let r = g.sub(a, half_q)?;
    let l = g.mul(q, r)?;
    masked_mean(g, l, valid, "loss_smooth_l1")
}

/// Weights of the five-term objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// SSIM share of the appearance loss.
    pub alpha: f64,
    pub lambda_s_occ: f64,
    pub lambda_t_ar: f64,
    pub lambda_t_occ: f64,
    pub lambda_t_sm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            lambda_s_occ: 0.2,
            lambda_t_ar: 1.0,
            lambda_t_occ: 0.2,
            lambda_t_sm: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        let ws = [self.lambda_s_occ, self.lambda_t_ar, self.lambda_t_occ, self.lambda_t_sm];
        if ws.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Values of the five loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_s_main: f64,
    pub l_s_occ: f64,
    pub l_t_ar: f64,
    pub l_t_occ: f64,
    pub l_t_sm: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `L = L_s^main + λ_s^occ L_s^occ + λ_t^ar L_t^ar + λ_t^occ L_t^occ + λ_t^sm L_t^sm`.
    pub fn from_components(c: [f64; 5], w: &LossWeights) -> Self {
        let total = c[0] + w.lambda_s_occ * c[1] + w.lambda_t_ar * c[2] + w.lambda_t_occ * c[3] + w.lambda_t_sm * c[4];
        Self {
            l_s_main: c[0],
            l_s_occ: c[1],
            l_t_ar: c[2],
            l_t_occ: c[3],
            l_t_sm: c[4],
            total,
        }
    }

    pub fn components(&self) -> [f64; 5] {
        [self.l_s_main, self.l_s_occ, self.l_t_ar, self.l_t_occ, self.l_t_sm]
    }
}

/// Graph nodes of the loss terms present in one iteration; absent terms
/// count as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub s_main: Option<Var>,
    pub s_occ: Option<Var>,
    pub t_ar: Option<Var>,
    pub t_occ: Option<Var>,
    pub t_sm: Option<Var>,
}

/// Weighted total on the graph plus the numeric breakdown.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let weighted = [
        (terms.s_main, 1.0),
        (terms.s_occ, w.lambda_s_occ),
        (terms.t_ar, w.lambda_t_ar),
        (terms.t_occ, w.lambda_t_occ),
        (terms.t_sm, w.lambda_t_sm),
    ];
    let mut comps = [0.0; 5];
    let mut total: Option<Var> = None;
    for (k, (term, weight)) in weighted.into_iter().enumerate() {
        let Some(v) = term else { continue };
        if g.shape(v) != [1, 1, 1, 1] {
            return Err(Error::invalid("loss terms must be scalars"));
        }
        comps[k] = g.scalar(v);
        let scaled = if weight == 1.0 { v } else { g.mul_scalar(v, weight) };
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor4::scalar(0.0)),
    };
    let breakdown = LossBreakdown::from_components(comps, w);
    Ok((total, breakdown))
}
