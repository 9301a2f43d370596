//! Dense layer primitives over flat `f64` buffers with explicit backward
//! passes. Activations are channel-major (`[c][y][x]`).

/// 2-D convolution with square kernels and symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub const fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { c_in, c_out, kernel, stride, pad }
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output positions `o` whose input tap `o * stride + k - pad` lies in `0..n`.
    #[inline]
    fn valid_range(&self, k: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o * s + off >= 0  and  o * s + off <= n - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (n as isize - 1 - off).div_euclid(s) + 1;
        (lo.max(0) as usize, (hi.max(0) as usize).min(n_out))
    }

    pub fn forward(&self, x: &[f64], h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_dim(h), self.out_dim(w));
        let k = self.kernel;
        let mut out = vec![0.0; self.c_out * ho * wo];
        for oc in 0..self.c_out {
            let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
            plane.fill(bias[oc]);
            for ic in 0..self.c_in {
                let xin = &x[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = self.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let wv = weight[((oc * self.c_in + ic) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = self.valid_range(kx, w, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * self.stride + ky - self.pad;
                            let row = &xin[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            if self.stride == 1 {
                                let ix0 = ox_lo + kx - self.pad;
                                let src = &row[ix0..ix0 + (ox_hi - ox_lo)];
                                for (o, s) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * row[ox * self.stride + kx - self.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and, when requested, the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[f64],
        h: usize,
        w: usize,
        weight: &[f64],
        d_out: &[f64],
        mut d_x: Option<&mut [f64]>,
        d_weight: &mut [f64],
        d_bias: &mut [f64],
    ) {
        let (ho, wo) = (self.out_dim(h), self.out_dim(w));
        let k = self.kernel;
        for oc in 0..self.c_out {
            let dplane = &d_out[oc * ho * wo..(oc + 1) * ho * wo];
            d_bias[oc] += dplane.iter().sum::<f64>();
            for ic in 0..self.c_in {
                let xin = &x[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = self.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let widx = ((oc * self.c_in + ic) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let (ox_lo, ox_hi) = self.valid_range(kx, w, wo);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * self.stride + ky - self.pad;
                            let drow = &dplane[oy * wo..(oy + 1) * wo];
                            if self.stride == 1 {
                                let ix0 = ox_lo + kx - self.pad;
                                let n = ox_hi - ox_lo;
                                let src = &xin[iy * w + ix0..iy * w + ix0 + n];
                                for (d, s) in drow[ox_lo..ox_hi].iter().zip(src) {
                                    acc += d * s;
                                }
                                if let Some(dx) = d_x.as_deref_mut() {
                                    let dst = &mut dx[ic * h * w + iy * w + ix0..ic * h * w + iy * w + ix0 + n];
                                    for (t, d) in dst.iter_mut().zip(&drow[ox_lo..ox_hi]) {
                                        *t += wv * d;
                                    }
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * self.stride + kx - self.pad;
                                    acc += drow[ox] * xin[iy * w + ix];
                                    if let Some(dx) = d_x.as_deref_mut() {
                                        dx[ic * h * w + iy * w + ix] += wv * drow[ox];
                                    }
                                }
                            }
                        }
                        d_weight[widx] += acc;
                    }
                }
            }
        }
    }
}

/// `y = W x + b` with `W` stored row-major as `[out][in]`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

pub fn linear_backward(x: &[f64], weight: &[f64], d_out: &[f64], d_x: Option<&mut [f64]>, d_weight: &mut [f64], d_bias: &mut [f64]) {
    let n_in = x.len();
    for (o, &d) in d_out.iter().enumerate() {
        d_bias[o] += d;
        for (dw, v) in d_weight[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *dw += d * v;
        }
    }
    if let Some(dx) = d_x {
        for (o, &d) in d_out.iter().enumerate() {
            for (t, w) in dx.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
                *t += d * w;
            }
        }
    }
}

pub fn tanh_inplace(v: &mut [f64]) {
    for x in v {
        *x = x.tanh();
    }
}

/// Multiplies `d` by the tanh derivative given the tanh outputs `y`.
pub fn tanh_backward(y: &[f64], d: &mut [f64]) {
    for (g, &t) in d.iter_mut().zip(y) {
        *g *= 1.0 - t * t;
    }
}

/// 2x2 average pooling with stride 2 (`h`, `w` even).
pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let base = ch * h * w;
                let s = x[base + 2 * y * w + 2 * xx]
                    + x[base + 2 * y * w + 2 * xx + 1]
                    + x[base + (2 * y + 1) * w + 2 * xx]
                    + x[base + (2 * y + 1) * w + 2 * xx + 1];
                out[ch * ho * wo + y * wo + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(d_out: &[f64], c: usize, h: usize, w: usize, d_x: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let g = 0.25 * d_out[ch * ho * wo + y * wo + xx];
                let base = ch * h * w;
                d_x[base + 2 * y * w + 2 * xx] += g;
                d_x[base + 2 * y * w + 2 * xx + 1] += g;
                d_x[base + (2 * y + 1) * w + 2 * xx] += g;
                d_x[base + (2 * y + 1) * w + 2 * xx + 1] += g;
            }
        }
    }
}

/// Precomputed bilinear resampling of a `src_h x src_w` plane onto a fixed
/// output grid. The same taps are applied to every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearSampler {
    pub src_h: usize,
    pub src_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(u32, f64); 4]>,
}

impl BilinearSampler {
    /// Samples at continuous source coordinates (cell centers at integers),
    /// clamped to the source extent.
    pub fn from_coords(src_h: usize, src_w: usize, ys: &[f64], xs: &[f64]) -> Self {
        let axis = |c: f64, n: usize| -> (usize, usize, f64) {
            let c = c.clamp(0.0, (n - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (lo, hi, c - lo as f64)
        };
        let mut taps = Vec::with_capacity(ys.len() * xs.len());
        for &y in ys {
            let (y0, y1, fy) = axis(y, src_h);
            for &x in xs {
                let (x0, x1, fx) = axis(x, src_w);
                taps.push([
                    ((y0 * src_w + x0) as u32, (1.0 - fy) * (1.0 - fx)),
                    ((y0 * src_w + x1) as u32, (1.0 - fy) * fx),
                    ((y1 * src_w + x0) as u32, fy * (1.0 - fx)),
                    ((y1 * src_w + x1) as u32, fy * fx),
                ]);
            }
        }
        Self { src_h, src_w, out_h: ys.len(), out_w: xs.len(), taps }
    }

    /// Half-pixel-aligned resize of the whole plane.
    pub fn resize(src_h: usize, src_w: usize, out_h: usize, out_w: usize) -> Self {
        let ys: Vec<f64> = (0..out_h).map(|i| (i as f64 + 0.5) * src_h as f64 / out_h as f64 - 0.5).collect();
        let xs: Vec<f64> = (0..out_w).map(|j| (j as f64 + 0.5) * src_w as f64 / out_w as f64 - 0.5).collect();
        Self::from_coords(src_h, src_w, &ys, &xs)
    }

    pub fn apply(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let (n_src, n_out) = (self.src_h * self.src_w, self.out_h * self.out_w);
        let mut out = vec![0.0; channels * n_out];
        for c in 0..channels {
            let plane = &src[c * n_src..(c + 1) * n_src];
            for (o, taps) in out[c * n_out..(c + 1) * n_out].iter_mut().zip(&self.taps) {
                *o = taps.iter().map(|&(i, w)| w * plane[i as usize]).sum();
            }
        }
        out
    }

    pub fn backward(&self, d_out: &[f64], channels: usize, d_src: &mut [f64]) {
        let (n_src, n_out) = (self.src_h * self.src_w, self.out_h * self.out_w);
        for c in 0..channels {
            let plane = &mut d_src[c * n_src..(c + 1) * n_src];
            for (&g, taps) in d_out[c * n_out..(c + 1) * n_out].iter().zip(&self.taps) {
                for &(i, w) in taps {
                    plane[i as usize] += w * g;
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of label `y` against logit `s`.
#[inline]
pub fn bce_with_logit(y: f64, s: f64) -> f64 {
    softplus(s) - y * s
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}
