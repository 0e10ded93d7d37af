//! Dense NCHW kernels with hand-written backward passes.
//!
//! Axis 2 (`h`) is frequency and axis 3 (`w`) is time throughout.

use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    #[cfg(test)]
    pub fn from_data(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        self.with_data(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn with_data(&self, data: Vec<f64>) -> Tensor {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }
}

/// Geometry of a 2-D (transposed) convolution. Weights are `[out, in, kh, kw]`
/// for convolutions and `[in, out, kh, kw]` for transposed convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    /// Extra rows/cols appended to a transposed convolution's output.
    pub oph: usize,
    pub opw: usize,
}

impl ConvGeom {
    pub fn same(cin: usize, cout: usize, kh: usize, kw: usize) -> Self {
        Self {
            cin,
            cout,
            kh,
            kw,
            sh: 1,
            sw: 1,
            ph: kh / 2,
            pw: kw / 2,
            oph: 0,
            opw: 0,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.cin * self.cout * self.kh * self.kw
    }

    pub fn conv_out(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        )
    }

    pub fn convt_out(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.sh + self.kh + self.oph - 2 * self.ph,
            (w - 1) * self.sw + self.kw + self.opw - 2 * self.pw,
        )
    }
}

/// Output rows `i` with `0 <= i*s + k - p < len` for an input axis of `len`.
#[inline]
fn valid_range(out_len: usize, len: usize, s: usize, k: usize, p: usize) -> std::ops::Range<usize> {
    // i*s + k >= p
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // i*s + k - p <= len - 1
    let hi = if len + p > k { (len + p - k - 1) / s + 1 } else { 0 };
    lo.min(out_len)..hi.min(out_len)
}

pub fn conv2d_forward(x: &Tensor, weight: &[f64], bias: &[f64], g: &ConvGeom) -> Tensor {
    assert_eq!(x.c, g.cin, "conv input channels");
    let (oh, ow) = g.conv_out(x.h, x.w);
    let mut y = Tensor::zeros(x.n, g.cout, oh, ow);
    let plane = oh * ow;
    y.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(no, out)| {
            let (n, o) = (no / g.cout, no % g.cout);
            out.fill(bias[o]);
            for c in 0..g.cin {
                let xin = &x.data[x.idx(n, c, 0, 0)..x.idx(n, c, 0, 0) + x.plane()];
                for ki in 0..g.kh {
                    let rows = valid_range(oh, x.h, g.sh, ki, g.ph);
                    for kj in 0..g.kw {
                        let wv = weight[((o * g.cin + c) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let cols = valid_range(ow, x.w, g.sw, kj, g.pw);
                        for i in rows.clone() {
                            let p = i * g.sh + ki - g.ph;
                            let orow = &mut out[i * ow..(i + 1) * ow];
                            let xrow = &xin[p * x.w..(p + 1) * x.w];
                            if g.sw == 1 {
                                let off = kj as isize - g.pw as isize;
                                for j in cols.clone() {
                                    orow[j] += wv * xrow[(j as isize + off) as usize];
                                }
                            } else {
                                for j in cols.clone() {
                                    orow[j] += wv * xrow[j * g.sw + kj - g.pw];
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward(x: &Tensor, weight: &[f64], g: &ConvGeom, dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (dy.h, dy.w);
    let mut dx = x.zeros_like();
    let xplane = x.plane();
    dx.data
        .par_chunks_mut(xplane)
        .enumerate()
        .for_each(|(nc, dxin)| {
            let (n, c) = (nc / g.cin, nc % g.cin);
            for o in 0..g.cout {
                let dout = &dy.data[dy.idx(n, o, 0, 0)..dy.idx(n, o, 0, 0) + oh * ow];
                for ki in 0..g.kh {
                    let rows = valid_range(oh, x.h, g.sh, ki, g.ph);
                    for kj in 0..g.kw {
                        let wv = weight[((o * g.cin + c) * g.kh + ki) * g.kw + kj];
                        let cols = valid_range(ow, x.w, g.sw, kj, g.pw);
                        for i in rows.clone() {
                            let p = i * g.sh + ki - g.ph;
                            for j in cols.clone() {
                                let q = j * g.sw + kj - g.pw;
                                dxin[p * x.w + q] += wv * dout[i * ow + j];
                            }
                        }
                    }
                }
            }
        });

    let kk = g.kh * g.kw;
    let mut dw = vec![0.0; g.weight_len()];
    dw.par_chunks_mut(g.cin * kk)
        .enumerate()
        .for_each(|(o, dwo)| {
            for n in 0..x.n {
                let dout = &dy.data[dy.idx(n, o, 0, 0)..dy.idx(n, o, 0, 0) + oh * ow];
                for c in 0..g.cin {
                    let xin = &x.data[x.idx(n, c, 0, 0)..x.idx(n, c, 0, 0) + xplane];
                    for ki in 0..g.kh {
                        let rows = valid_range(oh, x.h, g.sh, ki, g.ph);
                        for kj in 0..g.kw {
                            let cols = valid_range(ow, x.w, g.sw, kj, g.pw);
                            let mut acc = 0.0;
                            for i in rows.clone() {
                                let p = i * g.sh + ki - g.ph;
                                for j in cols.clone() {
                                    acc += dout[i * ow + j] * xin[p * x.w + j * g.sw + kj - g.pw];
                                }
                            }
                            dwo[(c * g.kh + ki) * g.kw + kj] += acc;
                        }
                    }
                }
            }
        });
    let db = channel_sums(dy);
    (dx, dw, db)
}

pub fn conv_transpose2d_forward(x: &Tensor, weight: &[f64], bias: &[f64], g: &ConvGeom) -> Tensor {
    assert_eq!(x.c, g.cin, "transposed conv input channels");
    let (oh, ow) = g.convt_out(x.h, x.w);
    let mut y = Tensor::zeros(x.n, g.cout, oh, ow);
    y.data
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(no, out)| {
            let (n, o) = (no / g.cout, no % g.cout);
            out.fill(bias[o]);
            for c in 0..g.cin {
                let xin = &x.data[x.idx(n, c, 0, 0)..x.idx(n, c, 0, 0) + x.plane()];
                for ki in 0..g.kh {
                    // input rows i whose target row p = i*s + ki - ph is in range
                    let rows = valid_range(x.h, oh, g.sh, ki, g.ph);
                    for kj in 0..g.kw {
                        let wv = weight[((c * g.cout + o) * g.kh + ki) * g.kw + kj];
                        let cols = valid_range(x.w, ow, g.sw, kj, g.pw);
                        for i in rows.clone() {
                            let p = i * g.sh + ki - g.ph;
                            for j in cols.clone() {
                                let q = j * g.sw + kj - g.pw;
                                out[p * ow + q] += wv * xin[i * x.w + j];
                            }
                        }
                    }
                }
            }
        });
    y
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &[f64],
    g: &ConvGeom,
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (dy.h, dy.w);
    let mut dx = x.zeros_like();
    let xplane = x.plane();
    dx.data
        .par_chunks_mut(xplane)
        .enumerate()
        .for_each(|(nc, dxin)| {
            let (n, c) = (nc / g.cin, nc % g.cin);
            for o in 0..g.cout {
                let dout = &dy.data[dy.idx(n, o, 0, 0)..dy.idx(n, o, 0, 0) + oh * ow];
                for ki in 0..g.kh {
                    let rows = valid_range(x.h, oh, g.sh, ki, g.ph);
                    for kj in 0..g.kw {
                        let wv = weight[((c * g.cout + o) * g.kh + ki) * g.kw + kj];
                        let cols = valid_range(x.w, ow, g.sw, kj, g.pw);
                        for i in rows.clone() {
                            let p = i * g.sh + ki - g.ph;
                            for j in cols.clone() {
                                dxin[i * x.w + j] += wv * dout[p * ow + j * g.sw + kj - g.pw];
                            }
                        }
                    }
                }
            }
        });

    let kk = g.kh * g.kw;
    let mut dw = vec![0.0; g.weight_len()];
    dw.par_chunks_mut(g.cout * kk)
        .enumerate()
        .for_each(|(c, dwc)| {
            for n in 0..x.n {
                let xin = &x.data[x.idx(n, c, 0, 0)..x.idx(n, c, 0, 0) + xplane];
                for o in 0..g.cout {
                    let dout = &dy.data[dy.idx(n, o, 0, 0)..dy.idx(n, o, 0, 0) + oh * ow];
                    for ki in 0..g.kh {
                        let rows = valid_range(x.h, oh, g.sh, ki, g.ph);
                        for kj in 0..g.kw {
                            let cols = valid_range(x.w, ow, g.sw, kj, g.pw);
                            let mut acc = 0.0;
                            for i in rows.clone() {
                                let p = i * g.sh + ki - g.ph;
                                for j in cols.clone() {
                                    acc += xin[i * x.w + j] * dout[p * ow + j * g.sw + kj - g.pw];
                                }
                            }
                            dwc[(o * g.kh + ki) * g.kw + kj] += acc;
                        }
                    }
                }
            }
        });
    let db = channel_sums(dy);
    (dx, dw, db)
}

fn channel_sums(t: &Tensor) -> Vec<f64> {
    let plane = t.plane();
    let mut out = vec![0.0; t.c];
    for n in 0..t.n {
        for (c, o) in out.iter_mut().enumerate() {
            let s = t.idx(n, c, 0, 0);
            *o += t.data[s..s + plane].iter().sum::<f64>();
        }
    }
    out
}

pub const BN_EPS: f64 = 1e-5;

/// Saved state of a training-mode batch-norm pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Normalizes each channel over batch, frequency and time.
pub fn batchnorm_train(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, BnCache) {
    let plane = x.plane();
    let count = x.n * plane;
    let mut mean = vec![0.0; x.c];
    let mut var = vec![0.0; x.c];
    for c in 0..x.c {
        let mut s = 0.0;
        for n in 0..x.n {
            let st = x.idx(n, c, 0, 0);
            s += x.data[st..st + plane].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for n in 0..x.n {
            let st = x.idx(n, c, 0, 0);
            v += x.data[st..st + plane].iter().map(|a| (a - m) * (a - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.zeros_like();
    let mut y = x.zeros_like();
    for n in 0..x.n {
        for c in 0..x.c {
            let st = x.idx(n, c, 0, 0);
            for k in st..st + plane {
                let h = (x.data[k] - mean[c]) * inv_std[c];
                xhat.data[k] = h;
                y.data[k] = gamma[c] * h + beta[c];
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
            count,
        },
    )
}

pub fn batchnorm_eval(x: &Tensor, gamma: &[f64], beta: &[f64], run_mean: &[f64], run_var: &[f64]) -> Tensor {
    let plane = x.plane();
    let mut y = x.zeros_like();
    for n in 0..x.n {
        for c in 0..x.c {
            let inv = 1.0 / (run_var[c] + BN_EPS).sqrt();
            let st = x.idx(n, c, 0, 0);
            for k in st..st + plane {
                y.data[k] = gamma[c] * (x.data[k] - run_mean[c]) * inv + beta[c];
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(cache: &BnCache, gamma: &[f64], dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let plane = dy.plane();
    let m = cache.count as f64;
    let mut dx = dy.zeros_like();
    let mut dgamma = vec![0.0; dy.c];
    let mut dbeta = vec![0.0; dy.c];
    for c in 0..dy.c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for n in 0..dy.n {
            let st = dy.idx(n, c, 0, 0);
            for k in st..st + plane {
                sum_dy += dy.data[k];
                sum_dy_xhat += dy.data[k] * cache.xhat.data[k];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * cache.inv_std[c] / m;
        for n in 0..dy.n {
            let st = dy.idx(n, c, 0, 0);
            for k in st..st + plane {
                dx.data[k] = scale * (m * dy.data[k] - sum_dy - cache.xhat.data[k] * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.with_data(x.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect())
}

/// Gradient through leaky ReLU given the layer's input.
pub fn leaky_relu_backward(x: &Tensor, slope: f64, dy: &Tensor) -> Tensor {
    x.with_data(
        x.data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &d)| if v > 0.0 { d } else { slope * d })
            .collect(),
    )
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shapes");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    let plane = a.plane();
    for n in 0..a.n {
        let dst = out.idx(n, 0, 0, 0);
        out.data[dst..dst + a.c * plane].copy_from_slice(&a.data[a.idx(n, 0, 0, 0)..a.idx(n, 0, 0, 0) + a.c * plane]);
        let dst = out.idx(n, a.c, 0, 0);
        out.data[dst..dst + b.c * plane].copy_from_slice(&b.data[b.idx(n, 0, 0, 0)..b.idx(n, 0, 0, 0) + b.c * plane]);
    }
    out
}

pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let plane = t.plane();
    let mut a = Tensor::zeros(t.n, first, t.h, t.w);
    let mut b = Tensor::zeros(t.n, t.c - first, t.h, t.w);
    for n in 0..t.n {
        let src = t.idx(n, 0, 0, 0);
        let da = a.idx(n, 0, 0, 0);
        a.data[da..da + first * plane].copy_from_slice(&t.data[src..src + first * plane]);
        let db = b.idx(n, 0, 0, 0);
        b.data[db..db + b.c * plane].copy_from_slice(&t.data[src + first * plane..src + t.c * plane]);
    }
    (a, b)
}

/// Averages over the frequency axis: `[n, c, h, w] -> [n, c, 1, w]`.
pub fn mean_over_freq(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.n, x.c, 1, x.w);
    let inv = 1.0 / x.h as f64;
    for n in 0..x.n {
        for c in 0..x.c {
            for h in 0..x.h {
                for w in 0..x.w {
                    out.data[(n * x.c + c) * x.w + w] += x.data[x.idx(n, c, h, w)] * inv;
                }
            }
        }
    }
    out
}

pub fn mean_over_freq_backward(dy: &Tensor, h: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, dy.w);
    let inv = 1.0 / h as f64;
    for n in 0..dy.n {
        for c in 0..dy.c {
            for hh in 0..h {
                for w in 0..dy.w {
                    let k = dx.idx(n, c, hh, w);
                    dx.data[k] = dy.data[(n * dy.c + c) * dy.w + w] * inv;
                }
            }
        }
    }
    dx
}
