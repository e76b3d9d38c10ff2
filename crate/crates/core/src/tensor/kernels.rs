//! Raw numeric kernels behind the tape primitives. Shapes are validated by the caller.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Geometry of one NCHW convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one sample `(c, h, w)` into `(c*kh*kw, ho*wo)` columns.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds columns back onto one sample, accumulating overlaps.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], weights: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let rows = g.col_rows();
    let in_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.o * p];
    out.par_chunks_mut(g.o * p)
        .zip(x.par_chunks(in_len))
        .for_each_init(
            || vec![T::zero(); rows * p],
            |cols, (y, xs)| {
                im2col(xs, g, cols);
                for (oc, line) in y.chunks_mut(p).enumerate() {
                    line.fill(bias[oc]);
                }
                T::gemm(g.o, rows, p, T::one(), weights, rows, 1, cols, p, 1, T::one(), y, p, 1);
            },
        );
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weights: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads<T> {
    let p = g.positions();
    let rows = g.col_rows();
    let in_len = g.c * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * in_len]);

    // Per-sample weight gradients are reduced in sample order so results do not
    // depend on the worker count.
    let per_sample = |i: usize, dx_i: Option<&mut [T]>| -> Vec<T> {
        let xs = &x[i * in_len..(i + 1) * in_len];
        let dys = &dy[i * g.o * p..(i + 1) * g.o * p];
        let mut cols = vec![T::zero(); rows * p];
        im2col(xs, g, &mut cols);
        let mut dw = vec![T::zero(); g.o * rows];
        // dW (o, rows) = dY (o, p) . cols^T (p, rows)
        T::gemm(g.o, p, rows, T::one(), dys, p, 1, &cols, 1, p, T::zero(), &mut dw, rows, 1);
        if let Some(dx_i) = dx_i {
            // dcols (rows, p) = W^T (rows, o) . dY (o, p)
            T::gemm(rows, g.o, p, T::one(), weights, 1, rows, dys, p, 1, T::zero(), &mut cols, p, 1);
            col2im(&cols, g, dx_i);
        }
        dw
    };

    let partials: Vec<Vec<T>> = match dx.as_mut() {
        Some(dx) => dx
            .par_chunks_mut(in_len)
            .enumerate()
            .map(|(i, dx_i)| per_sample(i, Some(dx_i)))
            .collect(),
        None => (0..g.n).into_par_iter().map(|i| per_sample(i, None)).collect(),
    };
    let mut dw = vec![T::zero(); g.o * rows];
    for part in &partials {
        for (acc, &v) in dw.iter_mut().zip(part) {
            *acc += v;
        }
    }
    let mut db = vec![T::zero(); g.o];
    for sample in dy.chunks(g.o * p) {
        for (oc, line) in sample.chunks(p).enumerate() {
            db[oc] += line.iter().copied().sum::<T>();
        }
    }
    ConvGrads { dx, dw, db }
}

/// Non-overlapping `k x k` max pooling over NCHW planes; returns values and flat argmax indices.
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        // strict comparison keeps the first maximum on ties
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Softmax over contiguous rows of length `cols`, max-subtracted.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for the linear pair
        let g = ConvGeom {
            n: 1,
            c: 2,
            h: 5,
            w: 4,
            o: 1,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            ho: 5,
            wo: 4,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..18 * 20).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; 18 * 20];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; 40];
        col2im(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_keeps_first_of_ties() {
        let (v, a) = maxpool_forward(&[1.0f32, 1.0, 1.0, 1.0], 1, 2, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
    }
}
