//! Separable one-dimensional linear operators applied along a tensor axis.
//!
//! Linear interpolation, cubic zoom, nearest-neighbour resizing and Gaussian
//! blurring are all expressed as a sparse matrix acting along one axis,
//! which also gives their adjoint for backpropagation.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AxisOperator {
    pub in_len: usize,
    /// For every output index, the `(source index, weight)` taps.
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisOperator {
    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    /// Linear interpolation with half-pixel centres (`align_corners = false`).
    pub fn linear(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let w1 = src - i0 as f64;
                if i0 == i1 || w1 == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - w1), (i1, w1)]
                }
            })
            .collect();
        AxisOperator { in_len, taps }
    }

    /// Nearest neighbour with `src = floor(o * in / out)`.
    pub fn nearest(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len)
            .map(|o| vec![((o * in_len) / out_len, 1.0)])
            .collect();
        AxisOperator { in_len, taps }
    }

    /// Nearest neighbour with half-pixel centres, used for zooming labels
    /// alongside [`AxisOperator::cubic`].
    pub fn nearest_centered(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).round().clamp(0.0, (in_len - 1) as f64);
                vec![(src as usize, 1.0)]
            })
            .collect();
        AxisOperator { in_len, taps }
    }

    /// Cubic convolution (Keys, a = -0.5) with half-pixel centres and
    /// clamped borders.
    pub fn cubic(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let last = in_len as isize - 1;
        let taps = (0..out_len)
            .map(|o| {
                let src = (o as f64 + 0.5) * scale - 0.5;
                let base = src.floor();
                let t = src - base;
                let w = keys_weights(t);
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
                for (j, wj) in w.iter().enumerate() {
                    if *wj == 0.0 {
                        continue;
                    }
                    let idx = (base as isize + j as isize - 1).clamp(0, last) as usize;
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(tap) => tap.1 += wj,
                        None => taps.push((idx, *wj)),
                    }
                }
                taps
            })
            .collect();
        AxisOperator { in_len, taps }
    }

    /// Normalised Gaussian smoothing with the kernel truncated at 4 sigma
    /// and mirror (`d c b | a b c d`) borders.
    pub fn gaussian(len: usize, sigma: f64) -> Self {
        let kernel = gaussian_kernel(sigma);
        let radius = (kernel.len() / 2) as isize;
        let taps = (0..len as isize)
            .map(|o| {
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
                for (j, w) in kernel.iter().enumerate() {
                    let idx = mirror(o + j as isize - radius, len);
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(tap) => tap.1 += w,
                        None => taps.push((idx, *w)),
                    }
                }
                taps
            })
            .collect();
        AxisOperator { in_len: len, taps }
    }

    pub fn is_identity(&self) -> bool {
        self.in_len == self.out_len()
            && self
                .taps
                .iter()
                .enumerate()
                .all(|(o, t)| t.len() == 1 && t[0] == (o, 1.0))
    }

    /// Applies the operator along `axis`.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>, axis: usize) -> Tensor<T> {
        let shape = x.shape();
        assert_eq!(shape[axis], self.in_len, "axis length mismatch");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = self.out_len();
        let mut out = Tensor::zeros(out_shape);
        let taps: Vec<Vec<(usize, T)>> = self
            .taps
            .iter()
            .map(|t| t.iter().map(|(i, w)| (*i, T::lit(*w))).collect())
            .collect();
        let src = x.data();
        let dst = out.data_mut();
        for ou in 0..outer {
            let sbase = ou * self.in_len * inner;
            let dbase = ou * self.out_len() * inner;
            for (o, tl) in taps.iter().enumerate() {
                let d = &mut dst[dbase + o * inner..dbase + (o + 1) * inner];
                for &(i, w) in tl {
                    let s = &src[sbase + i * inner..sbase + (i + 1) * inner];
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv += w * *sv;
                    }
                }
            }
        }
        out
    }

    /// Applies the adjoint (transpose) along `axis`.
    pub fn apply_transpose<T: Scalar>(&self, g: &Tensor<T>, axis: usize) -> Tensor<T> {
        let shape = g.shape();
        assert_eq!(shape[axis], self.out_len(), "axis length mismatch");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut in_shape = shape.to_vec();
        in_shape[axis] = self.in_len;
        let mut out = Tensor::zeros(in_shape);
        let src = g.data();
        let dst = out.data_mut();
        for ou in 0..outer {
            let sbase = ou * self.out_len() * inner;
            let dbase = ou * self.in_len * inner;
            for (o, tl) in self.taps.iter().enumerate() {
                let s = &src[sbase + o * inner..sbase + (o + 1) * inner];
                for &(i, w) in tl {
                    let w = T::lit(w);
                    let d = &mut dst[dbase + i * inner..dbase + (i + 1) * inner];
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv += w * *sv;
                    }
                }
            }
        }
        out
    }

    /// Nearest-style gather for non-float element types; every output must
    /// have exactly one tap.
    pub fn gather<U: Copy + Default>(&self, x: &Tensor<U>, axis: usize) -> Tensor<U> {
        let shape = x.shape();
        assert_eq!(shape[axis], self.in_len, "axis length mismatch");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = self.out_len();
        let mut data = Vec::with_capacity(outer * self.out_len() * inner);
        for ou in 0..outer {
            for t in &self.taps {
                assert_eq!(t.len(), 1, "gather requires single-tap operators");
                let s = ou * self.in_len * inner + t[0].0 * inner;
                data.extend_from_slice(&x.data()[s..s + inner]);
            }
        }
        Tensor::from_vec(out_shape, data)
    }
}

/// Keys cubic convolution weights for the four taps around a sample at
/// fractional offset `t` from the second tap.
fn keys_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.5;
    let w = |x: f64| {
        let x = x.abs();
        if x <= 1.0 {
            (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
        } else if x < 2.0 {
            A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
        } else {
            0.0
        }
    };
    [w(1.0 + t), w(t), w(1.0 - t), w(2.0 - t)]
}

/// Normalised, odd-sized Gaussian kernel truncated at 4 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn mirror(mut i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let n = len as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_upsample_by_two_has_quarter_weights() {
        let op = AxisOperator::linear(2, 4);
        assert_eq!(op.taps[0], vec![(0, 1.0)]);
        assert_eq!(op.taps[1], vec![(0, 0.75), (1, 0.25)]);
        assert_eq!(op.taps[2], vec![(0, 0.25), (1, 0.75)]);
        assert_eq!(op.taps[3], vec![(1, 1.0)]);
    }

    #[test]
    fn same_size_operators_are_identity() {
        for n in [1, 2, 7] {
            assert!(AxisOperator::cubic(n, n).is_identity());
            assert!(AxisOperator::linear(n, n).is_identity());
            assert!(AxisOperator::nearest_centered(n, n).is_identity());
        }
    }

    #[test]
    fn rows_of_interpolators_sum_to_one() {
        for op in [
            AxisOperator::cubic(9, 13),
            AxisOperator::linear(5, 10),
            AxisOperator::gaussian(6, 1.3),
        ] {
            for t in &op.taps {
                let s: f64 = t.iter().map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mirror_reflects_without_repeating_edge() {
        assert_eq!(mirror(-1, 5), 1);
        assert_eq!(mirror(-2, 5), 2);
        assert_eq!(mirror(5, 5), 3);
        assert_eq!(mirror(-7, 3), 1);
    }

    #[test]
    fn transpose_is_adjoint() {
        let op = AxisOperator::cubic(5, 8);
        let x = Tensor::from_vec(vec![2, 5, 3], (0..30).map(|v| (v as f64).sin()).collect());
        let g = Tensor::from_vec(vec![2, 8, 3], (0..48).map(|v| (v as f64 * 0.7).cos()).collect());
        let y = op.apply(&x, 1);
        let xt = op.apply_transpose(&g, 1);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
