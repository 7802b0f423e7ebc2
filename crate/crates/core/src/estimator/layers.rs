//! Planar CHW kernels with hand-written backward passes.

/// A planar `c × h × w` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks `self` then `other` along the channel axis.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            c: self.c + other.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: the first `c` channels and the rest.
    pub fn split_channels(&self, c: usize) -> (Tensor, Tensor) {
        let cut = c * self.plane();
        (
            Tensor {
                c,
                h: self.h,
                w: self.w,
                data: self.data[..cut].to_vec(),
            },
            Tensor {
                c: self.c - c,
                h: self.h,
                w: self.w,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &Tensor) -> Tensor {
    Tensor {
        data: x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
            .collect(),
        ..*x
    }
}

/// Multiplies `grad` in place by the leaky-ReLU derivative at `pre`.
pub fn leaky_relu_backward(pre: &Tensor, grad: &mut Tensor) {
    for (g, &v) in grad.data.iter_mut().zip(&pre.data) {
        if v <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Upper bound on the im2col scratch buffer, in values.
const COL_BUDGET: usize = 1 << 20;

/// Pixels per im2col chunk for a patch of `r` values.
fn chunk_pixels(r: usize, plane: usize) -> usize {
    (COL_BUDGET / r.max(1)).clamp(1, plane.max(1))
}

/// Fills `col` with the zero-padded `k`×`k` patches of pixels
/// `p0..p0 + n`, one row of `cin·k·k` values per pixel.
fn im2col(x: &Tensor, k: usize, p0: usize, n: usize, col: &mut [f64]) {
    let (cin, h, w) = (x.c, x.h, x.w);
    let pad = (k / 2) as isize;
    let r = cin * k * k;
    for (i, row) in col[..n * r].chunks_exact_mut(r).enumerate() {
        let (y, xx) = ((p0 + i) / w, (p0 + i) % w);
        for ci in 0..cin {
            let inp = x.channel(ci);
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                    row[(ci * k + ky) * k + kx] = if inside {
                        inp[sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the image.
fn col2im(col: &[f64], k: usize, p0: usize, n: usize, gx: &mut Tensor) {
    let (cin, h, w) = (gx.c, gx.h, gx.w);
    let pad = (k / 2) as isize;
    let r = cin * k * k;
    for (i, row) in col[..n * r].chunks_exact(r).enumerate() {
        let (y, xx) = ((p0 + i) / w, (p0 + i) % w);
        for ci in 0..cin {
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx >= 0 && sx < w as isize {
                        gx.data[(ci * h + sy as usize) * w + sx as usize] +=
                            row[(ci * k + ky) * k + kx];
                    }
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Same-size convolution with zero padding `k / 2`.
///
/// `weights` is `[cout][cin][k][k]`, `bias` is `[cout]`.
pub fn conv_forward(x: &Tensor, weights: &[f64], bias: &[f64], cout: usize, k: usize) -> Tensor {
    let (cin, h, w) = (x.c, x.h, x.w);
    let r = cin * k * k;
    debug_assert_eq!(weights.len(), cout * r);
    let plane = h * w;
    let chunk = chunk_pixels(r, plane);
    let mut col = vec![0.0; chunk * r];
    let mut out = Tensor::zeros(cout, h, w);
    for p0 in (0..plane).step_by(chunk) {
        let n = chunk.min(plane - p0);
        im2col(x, k, p0, n, &mut col);
        for (co, kern) in weights.chunks_exact(r).enumerate() {
            let o = &mut out.data[co * plane + p0..co * plane + p0 + n];
            for (v, patch) in o.iter_mut().zip(col.chunks_exact(r)) {
                *v = bias[co] + dot(kern, patch);
            }
        }
    }
    out
}

/// Backward of [`conv_forward`].
///
/// Accumulates into `grad_w` and `grad_b`, returns the input gradient.
pub fn conv_backward(
    x: &Tensor,
    weights: &[f64],
    grad_out: &Tensor,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    k: usize,
) -> Tensor {
    let (cin, h, w) = (x.c, x.h, x.w);
    let cout = grad_out.c;
    let r = cin * k * k;
    let plane = h * w;
    let chunk = chunk_pixels(r, plane);
    let mut col = vec![0.0; chunk * r];
    let mut gcol = vec![0.0; chunk * r];
    let mut gx = Tensor::zeros(cin, h, w);
    for (co, gb) in grad_b.iter_mut().enumerate().take(cout) {
        *gb += grad_out.channel(co).iter().sum::<f64>();
    }
    for p0 in (0..plane).step_by(chunk) {
        let n = chunk.min(plane - p0);
        im2col(x, k, p0, n, &mut col);
        gcol[..n * r].fill(0.0);
        for co in 0..cout {
            let go = &grad_out.data[co * plane + p0..co * plane + p0 + n];
            let kern = &weights[co * r..(co + 1) * r];
            let gw = &mut grad_w[co * r..(co + 1) * r];
            for ((&g, patch), gpatch) in go
                .iter()
                .zip(col.chunks_exact(r))
                .zip(gcol.chunks_exact_mut(r))
            {
                if g != 0.0 {
                    axpy(g, patch, gw);
                    axpy(g, kern, gpatch);
                }
            }
        }
        col2im(&gcol, k, p0, n, &mut gx);
    }
    gx
}

/// 2×2 mean pooling with stride 2. Spatial dims must be even.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let inp = x.channel(c);
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.w + 2 * xx;
                out.data[(c * h2 + y) * w2 + xx] =
                    0.25 * (inp[i] + inp[i + 1] + inp[i + x.w] + inp[i + x.w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &Tensor) -> Tensor {
    let (h, w) = (grad_out.h * 2, grad_out.w * 2);
    let mut gx = Tensor::zeros(grad_out.c, h, w);
    for c in 0..grad_out.c {
        for y in 0..h {
            for x in 0..w {
                gx.data[(c * h + y) * w + x] =
                    0.25 * grad_out.data[(c * grad_out.h + y / 2) * grad_out.w + x / 2];
            }
        }
    }
    gx
}

/// Source taps `(i0, i1, w0, w1)` for 2× bilinear upsampling along one axis,
/// half-pixel centers, edges clamped.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let ty = upsample_taps(x.h);
    let tx = upsample_taps(x.w);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let inp = x.channel(c);
        for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                out.data[(c * h + y) * w + xx] = wy0
                    * (wx0 * inp[y0 * x.w + x0] + wx1 * inp[y0 * x.w + x1])
                    + wy1 * (wx0 * inp[y1 * x.w + x0] + wx1 * inp[y1 * x.w + x1]);
            }
        }
    }
    out
}

/// Transpose of [`upsample2`].
pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (h, w) = (grad_out.h / 2, grad_out.w / 2);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut gx = Tensor::zeros(grad_out.c, h, w);
    for c in 0..grad_out.c {
        let g = &mut gx.data[c * h * w..(c + 1) * h * w];
        for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = grad_out.data[(c * grad_out.h + y) * grad_out.w + xx];
                g[y0 * w + x0] += wy0 * wx0 * v;
                g[y0 * w + x1] += wy0 * wx1 * v;
                g[y1 * w + x0] += wy1 * wx0 * v;
                g[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor {
            c,
            h,
            w,
            data: (0..c * h * w)
                .map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0)
                .collect(),
        }
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive() {
        let x = ramp(2, 4, 5);
        let k = 3;
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.13).sin()).collect();
        let b = vec![0.1, -0.2, 0.3];
        let out = conv_forward(&x, &w, &b, 3, k);
        for co in 0..3 {
            for y in 0..4 {
                for xx in 0..5 {
                    let mut s = b[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if !(0..4).contains(&sy) || !(0..5).contains(&sx) {
                                    continue;
                                }
                                s += w[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * x.data[(ci * 4 + sy as usize) * 5 + sx as usize];
                            }
                        }
                    }
                    assert!((out.data[(co * 4 + y) * 5 + xx] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x) - b, g> = <x, conv_backward(g)> for the input path.
        let x = ramp(3, 4, 4);
        let w: Vec<f64> = (0..2 * 3 * 9).map(|i| (i as f64 * 0.71).cos()).collect();
        let b = vec![0.0; 2];
        let g = ramp(2, 4, 4);
        let y = conv_forward(&x, &w, &b, 2, 3);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 2];
        let gx = conv_backward(&x, &w, &g, &mut gw, &mut gb, 3);
        assert!((dot(&y, &g) - dot(&x, &gx)).abs() < 1e-10);
        // Weight path: <y, g> is linear in w, so it equals <w, gw>.
        let ww: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((dot(&y, &g) - ww).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let x = ramp(2, 4, 6);
        let g = ramp(2, 2, 3);
        assert!((dot(&avg_pool2(&x), &g) - dot(&x, &avg_pool2_backward(&g))).abs() < 1e-12);

        let x = ramp(2, 3, 2);
        let g = ramp(2, 6, 4);
        assert!((dot(&upsample2(&x), &g) - dot(&x, &upsample2_backward(&g))).abs() < 1e-12);
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Tensor {
            c: 1,
            h: 1,
            w: 1,
            data: vec![0.7],
        };
        assert_eq!(upsample2(&x).data, vec![0.7; 4]);
        let x = Tensor {
            c: 1,
            h: 2,
            w: 2,
            data: vec![0.0, 1.0, 0.0, 1.0],
        };
        let u = upsample2(&x);
        assert_eq!(&u.data[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
