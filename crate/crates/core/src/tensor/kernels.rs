//! Raw NCHW compute kernels. Shapes are passed explicitly and assumed
//! consistent; the graph layer does the checking.

/// Output size under same-padding.
#[inline]
pub fn same_out(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Leading (top/left) padding under same-padding. Any odd remainder goes to
/// the trailing side.
#[inline]
pub fn same_pad_before(n: usize, k: usize, stride: usize) -> usize {
    let out = same_out(n, stride);
    ((out - 1) * stride + k).saturating_sub(n) / 2
}

/// Range of output columns `o` for which `o * stride + tap - pad` lands in `[0, n)`.
#[inline]
fn valid_range(n: usize, out: usize, tap: usize, pad: usize, stride: usize) -> (usize, usize) {
    // o * stride + tap >= pad
    let lo = pad.saturating_sub(tap).div_ceil(stride);
    // o * stride + tap - pad <= n - 1
    let hi = if n + pad > tap {
        ((n + pad - tap - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (same_out(self.h, self.stride), same_out(self.w, self.stride))
    }
    fn pads(&self) -> (usize, usize) {
        (
            same_pad_before(self.h, self.k, self.stride),
            same_pad_before(self.w, self.k, self.stride),
        )
    }
}

/// Accumulates one `k x k` tap plane: `out += wv * shifted(in)`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn tap_forward(
    out: &mut [f32],
    inp: &[f32],
    wv: f32,
    g: &ConvGeom,
    ky: usize,
    kx: usize,
    (ph, pw): (usize, usize),
    (ho, wo): (usize, usize),
) {
    let (ylo, yhi) = valid_range(g.h, ho, ky, ph, g.stride);
    let (xlo, xhi) = valid_range(g.w, wo, kx, pw, g.stride);
    if xlo >= xhi {
        return;
    }
    for oy in ylo..yhi {
        let iy = oy * g.stride + ky - ph;
        let orow = &mut out[oy * wo..oy * wo + wo];
        let irow = &inp[iy * g.w..iy * g.w + g.w];
        if g.stride == 1 {
            let off = xlo + kx - pw;
            for (o, i) in orow[xlo..xhi].iter_mut().zip(&irow[off..off + (xhi - xlo)]) {
                *o += wv * i;
            }
        } else {
            for ox in xlo..xhi {
                orow[ox] += wv * irow[ox * g.stride + kx - pw];
            }
        }
    }
}

/// Backward counterpart of [`tap_forward`]: returns `sum(gout * shifted(in))`
/// and, if `gin` is given, accumulates `gin += wv * unshifted(gout)`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn tap_backward(
    gout: &[f32],
    inp: &[f32],
    gin: Option<&mut [f32]>,
    wv: f32,
    g: &ConvGeom,
    ky: usize,
    kx: usize,
    (ph, pw): (usize, usize),
    (ho, wo): (usize, usize),
) -> f32 {
    let (ylo, yhi) = valid_range(g.h, ho, ky, ph, g.stride);
    let (xlo, xhi) = valid_range(g.w, wo, kx, pw, g.stride);
    let mut acc = 0.0f32;
    if xlo >= xhi {
        return acc;
    }
    match gin {
        Some(gin) => {
            for oy in ylo..yhi {
                let iy = oy * g.stride + ky - ph;
                let grow = &gout[oy * wo..oy * wo + wo];
                let irow = &inp[iy * g.w..iy * g.w + g.w];
                let girow = &mut gin[iy * g.w..iy * g.w + g.w];
                for (ox, &go) in (xlo..xhi).zip(&grow[xlo..xhi]) {
                    let ix = ox * g.stride + kx - pw;
                    acc += go * irow[ix];
                    girow[ix] += wv * go;
                }
            }
        }
        None => {
            for oy in ylo..yhi {
                let iy = oy * g.stride + ky - ph;
                let grow = &gout[oy * wo..oy * wo + wo];
                let irow = &inp[iy * g.w..iy * g.w + g.w];
                if g.stride == 1 {
                    let off = xlo + kx - pw;
                    acc += grow[xlo..xhi]
                        .iter()
                        .zip(&irow[off..off + (xhi - xlo)])
                        .map(|(a, b)| a * b)
                        .sum::<f32>();
                } else {
                    for ox in xlo..xhi {
                        acc += grow[ox] * irow[ox * g.stride + kx - pw];
                    }
                }
            }
        }
    }
    acc
}

/// Dense convolution, weight `cout x cin x k x k`.
pub fn conv2d_forward(x: &[f32], wt: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let pads = g.pads();
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let mut out = vec![0.0f32; g.n * g.cout * plane_out];
    let pointwise = g.k == 1 && g.stride == 1;
    for b in 0..g.n {
        for o in 0..g.cout {
            let oplane = &mut out[(b * g.cout + o) * plane_out..][..plane_out];
            for i in 0..g.cin {
                let iplane = &x[(b * g.cin + i) * plane_in..][..plane_in];
                let wbase = (o * g.cin + i) * g.k * g.k;
                if pointwise {
                    let wv = wt[wbase];
                    if wv != 0.0 {
                        for (a, v) in oplane.iter_mut().zip(iplane) {
                            *a += wv * v;
                        }
                    }
                    continue;
                }
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wt[wbase + ky * g.k + kx];
                        if wv != 0.0 {
                            tap_forward(oplane, iplane, wv, g, ky, kx, pads, (ho, wo));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_w, grad_x)`; `grad_x` only when `need_gx`.
pub fn conv2d_backward(
    x: &[f32],
    wt: &[f32],
    gy: &[f32],
    g: &ConvGeom,
    need_gx: bool,
) -> (Vec<f32>, Option<Vec<f32>>) {
    let (ho, wo) = g.out_hw();
    let pads = g.pads();
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let mut gw = vec![0.0f32; wt.len()];
    let mut gx = need_gx.then(|| vec![0.0f32; x.len()]);
    let pointwise = g.k == 1 && g.stride == 1;
    for b in 0..g.n {
        for o in 0..g.cout {
            let gplane = &gy[(b * g.cout + o) * plane_out..][..plane_out];
            for i in 0..g.cin {
                let iplane = &x[(b * g.cin + i) * plane_in..][..plane_in];
                let wbase = (o * g.cin + i) * g.k * g.k;
                if pointwise {
                    let wv = wt[wbase];
                    gw[wbase] += gplane.iter().zip(iplane).map(|(a, v)| a * v).sum::<f32>();
                    if let Some(gx) = gx.as_mut() {
                        let gi = &mut gx[(b * g.cin + i) * plane_in..][..plane_in];
                        for (d, a) in gi.iter_mut().zip(gplane) {
                            *d += wv * a;
                        }
                    }
                    continue;
                }
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let widx = wbase + ky * g.k + kx;
                        let gin = gx
                            .as_mut()
                            .map(|gx| &mut gx[(b * g.cin + i) * plane_in..][..plane_in]);
                        gw[widx] +=
                            tap_backward(gplane, iplane, gin, wt[widx], g, ky, kx, pads, (ho, wo));
                    }
                }
            }
        }
    }
    (gw, gx)
}

/// Depthwise convolution, weight `c x 1 x k x k`; `g.cin == g.cout`.
pub fn depthwise_forward(x: &[f32], wt: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let pads = g.pads();
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let mut out = vec![0.0f32; g.n * g.cout * plane_out];
    for b in 0..g.n {
        for c in 0..g.cout {
            let oplane = &mut out[(b * g.cout + c) * plane_out..][..plane_out];
            let iplane = &x[(b * g.cin + c) * plane_in..][..plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = wt[(c * g.k + ky) * g.k + kx];
                    if wv != 0.0 {
                        tap_forward(oplane, iplane, wv, g, ky, kx, pads, (ho, wo));
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    x: &[f32],
    wt: &[f32],
    gy: &[f32],
    g: &ConvGeom,
    need_gx: bool,
) -> (Vec<f32>, Option<Vec<f32>>) {
    let (ho, wo) = g.out_hw();
    let pads = g.pads();
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let mut gw = vec![0.0f32; wt.len()];
    let mut gx = need_gx.then(|| vec![0.0f32; x.len()]);
    for b in 0..g.n {
        for c in 0..g.cout {
            let gplane = &gy[(b * g.cout + c) * plane_out..][..plane_out];
            let iplane = &x[(b * g.cin + c) * plane_in..][..plane_in];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let widx = (c * g.k + ky) * g.k + kx;
                    let gin = gx
                        .as_mut()
                        .map(|gx| &mut gx[(b * g.cin + c) * plane_in..][..plane_in]);
                    gw[widx] +=
                        tap_backward(gplane, iplane, gin, wt[widx], g, ky, kx, pads, (ho, wo));
                }
            }
        }
    }
    (gw, gx)
}

/// 2x2 average pooling with stride 2 under same-padding; windows that hang
/// over the border average only the pixels they cover.
pub fn avgpool2_forward(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (same_out(h, 2), same_out(w, 2));
    let mut out = vec![0.0f32; n * c * ho * wo];
    for p in 0..n * c {
        let ip = &x[p * h * w..][..h * w];
        let op = &mut out[p * ho * wo..][..ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                let mut cnt = 0.0;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        s += ip[iy * w + ix];
                        cnt += 1.0;
                    }
                }
                op[oy * wo + ox] = s / cnt;
            }
        }
    }
    out
}

pub fn avgpool2_backward(gy: &[f32], n: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (same_out(h, 2), same_out(w, 2));
    let mut gx = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        let gp = &gy[p * ho * wo..][..ho * wo];
        let xp = &mut gx[p * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let ylim = (2 * oy + 2).min(h);
                let xlim = (2 * ox + 2).min(w);
                let cnt = ((ylim - 2 * oy) * (xlim - 2 * ox)) as f32;
                let v = gp[oy * wo + ox] / cnt;
                for iy in 2 * oy..ylim {
                    for ix in 2 * ox..xlim {
                        xp[iy * w + ix] += v;
                    }
                }
            }
        }
    }
    gx
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
