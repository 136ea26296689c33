//! Dense loops behind the convolution, pooling and normalization nodes.

use log::warn;

use super::tensor::{lit, Real};
use crate::error::{Error, Result};

/// Output size along one axis.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Resolved shapes of a 2D convolution with zero-filled vertical and
/// circular horizontal padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = *input else {
            return Err(Error::Shape(format!("conv2d input must be 4-D, got {input:?}")));
        };
        let [out_channels, wc, kh, kw] = *weight else {
            return Err(Error::Shape(format!("conv2d weight must be 4-D, got {weight:?}")));
        };
        if wc != in_channels {
            return Err(Error::Shape(format!(
                "conv2d weight expects {wc} input channels, input has {in_channels}"
            )));
        }
        // Circular padding may wrap at most once around the row.
        if padding.1 > in_w {
            return Err(Error::Shape(format!(
                "circular padding {} exceeds input width {in_w}",
                padding.1
            )));
        }
        let out_h = conv_output_dim(in_h, kh, stride.0, padding.0);
        let out_w = conv_output_dim(in_w, kw, stride.1, padding.1);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} with stride {stride:?} and padding {padding:?} does not fit input {in_h}x{in_w}"
            )));
        };
        Ok(Self {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel: (kh, kw),
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Source index within one input plane for every `(kernel tap, output
    /// pixel)`, or `usize::MAX` where the tap falls in the zero padding.
    /// Columns wrap around the row.
    fn gather_table(&self) -> Vec<usize> {
        let (kh, kw) = self.kernel;
        let (w, ph) = (self.in_w as isize, self.padding.1 as isize);
        let mut table = Vec::with_capacity(kh * kw * self.out_h * self.out_w);
        for ki in 0..kh {
            for kj in 0..kw {
                for i in 0..self.out_h {
                    let r = (i * self.stride.0 + ki) as isize - self.padding.0 as isize;
                    let row_ok = r >= 0 && (r as usize) < self.in_h;
                    for j in 0..self.out_w {
                        table.push(if row_ok {
                            let c = ((j * self.stride.1 + kj) as isize - ph).rem_euclid(w) as usize;
                            r as usize * self.in_w + c
                        } else {
                            usize::MAX
                        });
                    }
                }
            }
        }
        table
    }

    /// Unfolds one `[C, H, W]` image into `[C·kh·kw, out_h·out_w]`.
    fn im2col<T: Real>(&self, image: &[T], gather: &[usize], cols: &mut [T]) {
        let in_plane = self.in_h * self.in_w;
        let block = gather.len();
        for c in 0..self.in_channels {
            let src = &image[c * in_plane..][..in_plane];
            for (dst, &idx) in cols[c * block..][..block].iter_mut().zip(gather) {
                *dst = if idx == usize::MAX { T::zero() } else { src[idx] };
            }
        }
    }

    /// Adjoint of [`Self::im2col`], accumulating into `image`.
    fn col2im<T: Real>(&self, cols: &[T], gather: &[usize], image: &mut [T]) {
        let in_plane = self.in_h * self.in_w;
        let block = gather.len();
        for c in 0..self.in_channels {
            let dst = &mut image[c * in_plane..][..in_plane];
            for (&v, &idx) in cols[c * block..][..block].iter().zip(gather) {
                if idx != usize::MAX {
                    dst[idx] += v;
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let taps = g.in_channels * g.kernel.0 * g.kernel.1;
    let gather = g.gather_table();
    let mut cols = vec![T::zero(); taps * out_plane];
    let mut out = vec![T::zero(); g.batch * g.out_channels * out_plane];
    for n in 0..g.batch {
        g.im2col(
            &x[n * g.in_channels * in_plane..][..g.in_channels * in_plane],
            &gather,
            &mut cols,
        );
        for o in 0..g.out_channels {
            let dst = &mut out[(n * g.out_channels + o) * out_plane..][..out_plane];
            if let Some(b) = b {
                dst.fill(b[o]);
            }
            for (k, &wv) in w[o * taps..][..taps].iter().enumerate() {
                for (d, &cv) in dst.iter_mut().zip(&cols[k * out_plane..][..out_plane]) {
                    *d += wv * cv;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_input` is false.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let taps = g.in_channels * g.kernel.0 * g.kernel.1;
    let gather = g.gather_table();
    let mut cols = vec![T::zero(); taps * out_plane];
    let mut dcols = vec![T::zero(); taps * out_plane];
    let mut dx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.out_channels];
    for n in 0..g.batch {
        let image = n * g.in_channels * in_plane..(n + 1) * g.in_channels * in_plane;
        g.im2col(&x[image.clone()], &gather, &mut cols);
        if need_input {
            dcols.fill(T::zero());
        }
        for o in 0..g.out_channels {
            let gy = &dy[(n * g.out_channels + o) * out_plane..][..out_plane];
            db[o] += gy.iter().copied().sum::<T>();
            for k in 0..taps {
                let col = &cols[k * out_plane..][..out_plane];
                dw[o * taps + k] += gy.iter().zip(col).map(|(a, b)| *a * *b).sum::<T>();
                if need_input {
                    let wv = w[o * taps + k];
                    for (d, &gv) in dcols[k * out_plane..][..out_plane].iter_mut().zip(gy) {
                        *d += wv * gv;
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            g.col2im(&dcols, &gather, &mut dx[image]);
        }
    }
    (dx, dw, db)
}

/// Max pooling over `[N, C, H, W]` without padding. Returns the output,
/// its shape and the flat input index each output element was taken from
/// (first maximum on ties).
pub fn maxpool2d_forward<T: Real>(
    x: &[T],
    shape: &[usize],
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Vec<T>, Vec<usize>, Vec<usize>)> {
    let [n, c, h, w] = *shape else {
        return Err(Error::Shape(format!("maxpool2d input must be 4-D, got {shape:?}")));
    };
    let out_h = conv_output_dim(h, kernel.0, stride.0, 0);
    let out_w = conv_output_dim(w, kernel.1, stride.1, 0);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(Error::Shape(format!(
            "pool kernel {kernel:?} does not fit input {h}x{w}"
        )));
    };
    if !(w - kernel.1).is_multiple_of(stride.1) {
        warn!("maxpool2d: input width {w} leaves trailing columns unpooled");
    }
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..out_h {
            for j in 0..out_w {
                let mut best_idx = base + i * stride.0 * w + j * stride.1;
                let mut best = x[best_idx];
                for ki in 0..kernel.0 {
                    for kj in 0..kernel.1 {
                        let idx = base + (i * stride.0 + ki) * w + j * stride.1 + kj;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((out, vec![n, c, out_h, out_w], argmax))
}

/// Saved state of a batch-norm forward pass.
pub struct BatchNormForward<T> {
    pub output: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased batch variance, used for running statistics.
    pub var_unbiased: Vec<T>,
}

fn channel_planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = *shape else {
        return Err(Error::Shape(format!("batchnorm2d input must be 4-D, got {shape:?}")));
    };
    Ok((n, c, h * w))
}

/// Normalizes with batch statistics.
pub fn batchnorm_train_forward<T: Real>(
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<BatchNormForward<T>> {
    let (n, c, plane) = channel_planes(shape)?;
    let m = n * plane;
    if m < 2 {
        return Err(Error::Shape(format!(
            "batch normalization needs at least 2 values per channel in training mode, got {m}"
        )));
    }
    let mf: T = lit(m as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
        let mu = s / mf;
        let mut ss = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * plane..][..plane] {
                ss += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = ss / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + lit(eps)).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut output = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for k in off..off + plane {
                xhat[k] = (x[k] - mean[ch]) * inv_std[ch];
                output[k] = gamma[ch] * xhat[k] + beta[ch];
            }
        }
    }
    let unbias: T = lit(m as f64 / (m as f64 - 1.0));
    let var_unbiased = var.iter().map(|v| *v * unbias).collect();
    Ok(BatchNormForward {
        output,
        xhat,
        inv_std,
        mean,
        var_unbiased,
    })
}

/// Normalizes with fixed (running) statistics.
pub fn batchnorm_eval_forward<T: Real>(
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<BatchNormForward<T>> {
    let (n, c, plane) = channel_planes(shape)?;
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + lit(eps)).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut output = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for k in off..off + plane {
                xhat[k] = (x[k] - mean[ch]) * inv_std[ch];
                output[k] = gamma[ch] * xhat[k] + beta[ch];
            }
        }
    }
    Ok(BatchNormForward {
        output,
        xhat,
        inv_std,
        mean: mean.to_vec(),
        var_unbiased: var.to_vec(),
    })
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the mean and variance
/// are functions of the input and contribute to `dx`.
pub fn batchnorm_backward<T: Real>(
    shape: &[usize],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, plane) = channel_planes(shape).expect("validated in forward");
    let m: T = lit((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for k in off..off + plane {
                dbeta[ch] += dy[k];
                dgamma[ch] += dy[k] * xhat[k];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            for k in off..off + plane {
                dx[k] = if batch_stats {
                    scale * (dy[k] - (dbeta[ch] + xhat[k] * dgamma[ch]) / m)
                } else {
                    scale * dy[k]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circular_padding_wraps_columns() {
        // A 1x3 kernel selecting only its left tap exposes the padded row.
        let x = [1.0, 2.0, 3.0];
        let g = ConvGeometry::new(&[1, 1, 1, 3], &[1, 1, 1, 3], (1, 1), (0, 1)).unwrap();
        assert_eq!((g.out_h, g.out_w), (1, 3));
        let left = conv2d_forward(&g, &x, &[1.0, 0.0, 0.0], None);
        let right = conv2d_forward(&g, &x, &[0.0, 0.0, 1.0], None);
        // Padded row is [c, a, b, c, a].
        assert_eq!(left, vec![3.0, 1.0, 2.0]);
        assert_eq!(right, vec![2.0, 3.0, 1.0]);
    }

    #[test]
    fn vertical_padding_is_zero_fill() {
        let x = [1.0, 2.0];
        let g = ConvGeometry::new(&[1, 1, 2, 1], &[1, 1, 3, 1], (1, 1), (1, 0)).unwrap();
        let up = conv2d_forward(&g, &x, &[1.0, 0.0, 0.0], None);
        assert_eq!(up, vec![0.0, 1.0]);
    }

    #[test]
    fn geometry_errors() {
        assert!(ConvGeometry::new(&[1, 2, 4, 4], &[1, 3, 3, 3], (1, 1), (1, 1)).is_err());
        assert!(ConvGeometry::new(&[1, 1, 4, 2], &[1, 1, 3, 3], (1, 1), (1, 3)).is_err());
        assert!(ConvGeometry::new(&[1, 1, 1, 4], &[1, 1, 3, 3], (1, 1), (0, 1)).is_err());
        // A single column may wrap onto itself.
        let g = ConvGeometry::new(&[1, 1, 2, 1], &[1, 1, 3, 3], (1, 1), (1, 1)).unwrap();
        assert_eq!((g.out_h, g.out_w), (2, 1));
    }

    #[test]
    fn maxpool_halves_width() {
        let (out, shape, argmax) = maxpool2d_forward(&[1.0, 3.0, 2.0, 4.0], &[1, 1, 1, 4], (1, 2), (1, 2)).unwrap();
        assert_eq!(out, vec![3.0, 4.0]);
        assert_eq!(shape, vec![1, 1, 1, 2]);
        assert_eq!(argmax, vec![1, 3]);
        let (_, _, argmax) = maxpool2d_forward(&[2.0, 2.0], &[1, 1, 1, 2], (1, 2), (1, 2)).unwrap();
        assert_eq!(argmax, vec![0]);
        let (_, shape, _) = maxpool2d_forward(&vec![0.0f32; 64 * 900], &[1, 1, 64, 900], (1, 2), (1, 2)).unwrap();
        assert_eq!(shape, vec![1, 1, 64, 450]);
    }

    #[test]
    fn odd_width_drops_last_column() {
        let (out, shape, _) = maxpool2d_forward(&[1.0, 2.0, 9.0], &[1, 1, 1, 3], (1, 2), (1, 2)).unwrap();
        assert_eq!(out, vec![2.0]);
        assert_eq!(shape[3], 1);
    }
}
