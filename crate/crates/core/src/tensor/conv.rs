//! Direct 2-D convolution kernels with zero padding.
//!
//! Inner loops run over contiguous output rows so the stride-1 path
//! auto-vectorizes; all kernels accumulate in a fixed order, which keeps
//! results bit-identical between runs.

use super::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad`
    /// lands inside `[0, in_len)`.
    #[inline]
    fn valid_range(&self, kx: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = kx as isize - self.pad as isize;
        // smallest ox with ox*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        // largest ox with ox*s + shift <= in_len - 1
        let top = in_len as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = lo.clamp(0, out_len as isize) as usize;
        let hi = hi.clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_coord(&self, o: usize, kk: usize) -> isize {
        (o * self.stride + kk) as isize - self.pad as isize
    }
}

pub(crate) fn forward(input: &Tensor4, weight: &Tensor4, bias: &[f64], g: ConvGeom) -> Tensor4 {
    let [n, cin, h, w] = input.shape();
    let cout = weight.shape()[0];
    let (ho, wo) = (g.out_len(h), g.out_len(w));
    let mut out = Tensor4::zeros([n, cout, ho, wo]);
    let k = g.k;
    let wdata = weight.data();

    for ni in 0..n {
        for co in 0..cout {
            let oplane = out.plane_mut(ni, co);
            oplane.fill(bias[co]);
            for ci in 0..cin {
                let iplane = input.plane(ni, ci);
                let wbase = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdata[wbase + ky * k + kx];
                        let (lo, hi) = g.valid_range(kx, w, wo);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = g.in_coord(oy, ky);
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                            if g.stride == 1 {
                                let ix0 = (lo + kx) - g.pad;
                                let src = &irow[ix0..ix0 + (hi - lo)];
                                for (o, &i) in orow[lo..hi].iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = g.in_coord(ox, kx) as usize;
                                    orow[ox] += wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn backward(
    input: &Tensor4,
    weight: &Tensor4,
    grad_out: &Tensor4,
    g: ConvGeom,
) -> (Tensor4, Tensor4, Vec<f64>) {
    let [n, cin, h, w] = input.shape();
    let cout = weight.shape()[0];
    let [_, _, ho, wo] = grad_out.shape();
    let k = g.k;
    let wdata = weight.data();
    let mut gin = Tensor4::zeros(input.shape());
    let mut gw = Tensor4::zeros(weight.shape());
    let mut gb = vec![0.0; cout];

    for ni in 0..n {
        for co in 0..cout {
            let gplane = grad_out.plane(ni, co);
            gb[co] += gplane.iter().sum::<f64>();
            for ci in 0..cin {
                let iplane = input.plane(ni, ci);
                let wbase = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdata[wbase + ky * k + kx];
                        let (lo, hi) = g.valid_range(kx, w, wo);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = g.in_coord(oy, ky);
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            let irow = &iplane[iy * w..(iy + 1) * w];
                            if g.stride == 1 {
                                let ix0 = (lo + kx) - g.pad;
                                let len = hi - lo;
                                let gslice = &grow[lo..hi];
                                acc += gslice
                                    .iter()
                                    .zip(&irow[ix0..ix0 + len])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                                let girow = &mut gin.plane_mut(ni, ci)[iy * w..(iy + 1) * w];
                                for (gi, &go) in girow[ix0..ix0 + len].iter_mut().zip(gslice) {
                                    *gi += wv * go;
                                }
                            } else {
                                let girow = &mut gin.plane_mut(ni, ci)[iy * w..(iy + 1) * w];
                                for ox in lo..hi {
                                    let ix = g.in_coord(ox, kx) as usize;
                                    acc += grow[ox] * irow[ix];
                                    girow[ix] += wv * grow[ox];
                                }
                            }
                        }
                        gw.data_mut()[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}
