//! Straight-loop f64 reference implementations of every graph op, written
//! independently of the crate's kernels. Shapes are NCHW.

pub const BN_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct T {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.shape[..] else {
            panic!("rank 4 expected")
        };
        self.data[((n * cc + c) * h + y) * w + x]
    }
}

fn dims4(t: &T) -> (usize, usize, usize, usize) {
    (t.shape[0], t.shape[1], t.shape[2], t.shape[3])
}

/// Same padding: output `ceil(n / s)`, total pad split with the extra pixel
/// at the end.
fn same(n: usize, k: usize, s: usize) -> (usize, i64) {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    (out, (total / 2) as i64)
}

/// Dense (`groups == 1`) or depthwise (`groups == C`) convolution.
pub fn conv(x: &T, w: &T, stride: usize, depthwise: bool) -> T {
    let (n, c, h, wd) = dims4(x);
    let (co, ci, k, _) = dims4(w);
    let (ho, pt) = same(h, k, stride);
    let (wo, pl) = same(wd, k, stride);
    let mut out = T::zeros(&[n, co, ho, wo]);
    for b in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    let ins: Vec<usize> = if depthwise { vec![o] } else { (0..c).collect() };
                    for (j, &i) in ins.iter().enumerate() {
                        let wi = if depthwise { 0 } else { j };
                        assert!(wi < ci);
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - pt;
                                let ix = (ox * stride + kx) as i64 - pl;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                s += x.at4(b, i, iy as usize, ix as usize) * w.at4(o, wi, ky, kx);
                            }
                        }
                    }
                    out.data[((b * co + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

/// Batch norm with batch statistics (`stats == None`) or given ones.
pub fn batch_norm(x: &T, gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>) -> T {
    let (n, c, h, w) = dims4(x);
    let m = (n * h * w) as f64;
    let mut out = x.clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..h * w).map(move |p| (b, p)))
            .map(|(b, p)| x.data[(b * c + ch) * h * w + p])
            .collect();
        let (mean, var) = match stats {
            Some((mu, var)) => (mu[ch], var[ch]),
            None => {
                let mu = vals.iter().sum::<f64>() / m;
                (mu, vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m)
            }
        };
        for b in 0..n {
            for p in 0..h * w {
                let i = (b * c + ch) * h * w + p;
                out.data[i] = gamma[ch] * (x.data[i] - mean) / (var + BN_EPS).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn map(x: &T, f: impl Fn(f64) -> f64) -> T {
    T::new(&x.shape, x.data.iter().map(|&v| f(v)).collect())
}

pub fn swish(x: &T) -> T {
    map(x, |v| v / (1.0 + (-v).exp()))
}

pub fn relu(x: &T) -> T {
    map(x, |v| v.max(0.0))
}

/// 2x2 stride-2 mean over the pixels each window covers.
pub fn avgpool2(x: &T) -> T {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = T::zeros(&[n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut vals = Vec::new();
                    for y in 2 * oy..(2 * oy + 2) {
                        for xx in 2 * ox..(2 * ox + 2) {
                            if y < h && xx < w {
                                vals.push(x.at4(b, ch, y, xx));
                            }
                        }
                    }
                    out.data[((b * c + ch) * ho + oy) * wo + ox] =
                        vals.iter().sum::<f64>() / vals.len() as f64;
                }
            }
        }
    }
    out
}

pub fn global_avgpool(x: &T) -> T {
    let (n, c, h, w) = dims4(x);
    let data = (0..n * c)
        .map(|p| x.data[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect();
    T::new(&[n, c], data)
}

pub fn linear(x: &T, w: &T, b: Option<&[f64]>) -> T {
    let (n, ci) = (x.shape[0], x.shape[1]);
    let co = w.shape[0];
    let mut out = T::zeros(&[n, co]);
    for i in 0..n {
        for o in 0..co {
            let mut s = b.map_or(0.0, |b| b[o]);
            for j in 0..ci {
                s += x.data[i * ci + j] * w.data[o * ci + j];
            }
            out.data[i * co + o] = s;
        }
    }
    out
}

pub fn add(a: &T, b: &T) -> T {
    T::new(
        &a.shape,
        a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    )
}

pub fn mul(a: &T, mask: &[f64]) -> T {
    T::new(
        &a.shape,
        a.data.iter().zip(mask).map(|(x, m)| x * m).collect(),
    )
}

fn inner(t: &T) -> usize {
    t.shape[2..].iter().product()
}

pub fn channel_mask(x: &T, keep: usize) -> T {
    let (n, c, inn) = (x.shape[0], x.shape[1], inner(x));
    let mut out = x.clone();
    for b in 0..n {
        for ch in keep..c {
            for p in 0..inn {
                out.data[(b * c + ch) * inn + p] = 0.0;
            }
        }
    }
    out
}

pub fn channel_adapt(x: &T, to: usize) -> T {
    let (n, c, inn) = (x.shape[0], x.shape[1], inner(x));
    let mut shape = x.shape.clone();
    shape[1] = to;
    let mut out = T::zeros(&shape);
    for b in 0..n {
        for ch in 0..c.min(to) {
            for p in 0..inn {
                out.data[(b * to + ch) * inn + p] = x.data[(b * c + ch) * inn + p];
            }
        }
    }
    out
}

pub fn kernel_mask(w: &T, k: usize) -> T {
    let (co, ci, kk, _) = dims4(w);
    let lo = (kk - k) / 2;
    let mut out = w.clone();
    for o in 0..co * ci {
        for y in 0..kk {
            for x in 0..kk {
                if !(lo..lo + k).contains(&y) || !(lo..lo + k).contains(&x) {
                    out.data[(o * kk + y) * kk + x] = 0.0;
                }
            }
        }
    }
    out
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy with uniform label smoothing.
pub fn softmax_xent(logits: &T, labels: &[usize], smoothing: f64) -> f64 {
    let k = logits.shape[1];
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let lp = log_softmax_row(&logits.data[i * k..(i + 1) * k]);
        for (j, v) in lp.iter().enumerate() {
            let t = smoothing / k as f64 + if j == l { 1.0 - smoothing } else { 0.0 };
            total -= t * v;
        }
    }
    total / labels.len() as f64
}

/// Mean cross-entropy of the student's softmax against the teacher's.
pub fn distill(teacher: &T, student: &T) -> f64 {
    let k = student.shape[1];
    let n = student.shape[0];
    let mut total = 0.0;
    for i in 0..n {
        let tp: Vec<f64> = log_softmax_row(&teacher.data[i * k..(i + 1) * k])
            .iter()
            .map(|v| v.exp())
            .collect();
        let sp = log_softmax_row(&student.data[i * k..(i + 1) * k]);
        total -= tp.iter().zip(&sp).map(|(p, q)| p * q).sum::<f64>();
    }
    total / n as f64
}
