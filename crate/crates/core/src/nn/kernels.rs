//! Forward and backward loops for the dense operations. All layouts are
//! `b x c x h x w`; convolutions use stride 1 and `k / 2` zero padding.

/// Valid `(out_start, out_end)` range along one axis for kernel offset `off`
/// (input coordinate = output coordinate + off).
#[inline]
fn span(len: usize, off: isize) -> (usize, usize) {
    let start = (-off).max(0) as usize;
    let end = (len as isize - off.max(0)).max(0) as usize;
    (start.min(len), end.min(len))
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

pub fn conv2d_forward(d: &ConvDims, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let (h, wd, k) = (d.height, d.width, d.kernel);
    let plane = h * wd;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; d.batch * d.out_ch * plane];
    for b in 0..d.batch {
        for co in 0..d.out_ch {
            let o = &mut out[(b * d.out_ch + co) * plane..][..plane];
            o.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..d.in_ch {
                let xin = &x[(b * d.in_ch + ci) * plane..][..plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = span(wd, dx);
                        let wv = w[((co * d.in_ch + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = (oy as isize + dy) as usize;
                            let orow = &mut o[oy * wd + x0..oy * wd + x1];
                            let irow = &xin[iy * wd..];
                            let ix0 = (x0 as isize + dx) as usize;
                            for (ov, iv) in orow.iter_mut().zip(&irow[ix0..]) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub fn conv2d_backward(d: &ConvDims, x: &[f64], w: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, wd, k) = (d.height, d.width, d.kernel);
    let plane = h * wd;
    let pad = (k / 2) as isize;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; d.out_ch];
    for b in 0..d.batch {
        for co in 0..d.out_ch {
            let g = &gy[(b * d.out_ch + co) * plane..][..plane];
            gb[co] += g.iter().sum::<f64>();
            for ci in 0..d.in_ch {
                let xin = &x[(b * d.in_ch + ci) * plane..][..plane];
                let gxin = &mut gx[(b * d.in_ch + ci) * plane..][..plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = span(wd, dx);
                        let widx = ((co * d.in_ch + ci) * k + ky) * k + kx;
                        let wv = w[widx];
                        let ix0 = (x0 as isize + dx) as usize;
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = (oy as isize + dy) as usize;
                            let grow = &g[oy * wd + x0..oy * wd + x1];
                            let irow = &xin[iy * wd + ix0..];
                            let girow = &mut gxin[iy * wd + ix0..];
                            for ((gv, iv), giv) in grow.iter().zip(irow).zip(girow.iter_mut()) {
                                acc += gv * iv;
                                *giv += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// 3x3 mean over the in-bounds neighbours (padding not counted).
pub fn avg_pool3_forward(planes: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let plane = h * w;
    for p in 0..planes {
        let xin = &x[p * plane..][..plane];
        let o = &mut out[p * plane..][..plane];
        for y in 0..h {
            let (ya, yb) = (y.saturating_sub(1), (y + 2).min(h));
            for xx in 0..w {
                let (xa, xb) = (xx.saturating_sub(1), (xx + 2).min(w));
                let mut s = 0.0;
                for iy in ya..yb {
                    s += xin[iy * w + xa..iy * w + xb].iter().sum::<f64>();
                }
                o[y * w + xx] = s / ((yb - ya) * (xb - xa)) as f64;
            }
        }
    }
    out
}

pub fn avg_pool3_backward(planes: usize, h: usize, w: usize, gy: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; gy.len()];
    let plane = h * w;
    for p in 0..planes {
        let g = &gy[p * plane..][..plane];
        let gi = &mut gx[p * plane..][..plane];
        for y in 0..h {
            let (ya, yb) = (y.saturating_sub(1), (y + 2).min(h));
            for xx in 0..w {
                let (xa, xb) = (xx.saturating_sub(1), (xx + 2).min(w));
                let share = g[y * w + xx] / ((yb - ya) * (xb - xa)) as f64;
                for iy in ya..yb {
                    gi[iy * w + xa..iy * w + xb].iter_mut().for_each(|v| *v += share);
                }
            }
        }
    }
    gx
}
