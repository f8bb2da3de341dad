//! Dense row-major tensors.
//!
//! Volumes are stored with the three spatial axes last, so a modality stack
//! is `[C, H, W, D]`, a network batch is `[B, C, H, W, D]` and a label map is
//! `[H, W, D]`. The spatial helpers (`crop`, `pad`, `flip`, ...) act on the
//! trailing three axes and treat every leading axis as a batch of volumes.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, NumCast, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type usable by the network substrate.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Debug + Send + Sync + Sum + 'static
{
    /// `c = alpha * a * b + beta * c` for strided row/column layouts.
    ///
    /// # Safety
    /// All strided accesses implied by `m`, `k`, `n` and the strides must be
    /// in bounds of the respective pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major strided view of a matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    pub fn rows(data: &'a [T], row_stride: usize) -> Self {
        Mat {
            data,
            rs: row_stride,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with the given row stride.
    pub fn transposed(data: &'a [T], row_stride: usize) -> Self {
        Mat {
            data,
            rs: 1,
            cs: row_stride,
        }
    }
}

fn last_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// Bounds-checked `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: Mat<'_, T>,
    b: Mat<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // matrixmultiply handles k == 0 by scaling c; keep that explicit
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    assert!(last_index(m, k, a.rs, a.cs) < a.data.len(), "gemm: lhs out of bounds");
    assert!(last_index(k, n, b.rs, b.cs) < b.data.len(), "gemm: rhs out of bounds");
    assert!(last_index(m, n, rsc, 1) < c.len(), "gemm: output out of bounds");
    // SAFETY: every index touched is bounded by the asserts above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Spatial extent of a volume, `[H, W, D]`.
pub type Shape3 = [usize; 3];

#[inline]
pub fn offset3(shape: Shape3, x: usize, y: usize, z: usize) -> usize {
    (x * shape[1] + y) * shape[2] + z
}

#[inline]
pub fn voxels(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} does not match {} elements", data.len());
        Tensor { shape, data }
    }

    pub fn try_from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        Tensor::from_vec(shape, self.data)
    }

    /// The trailing three axes.
    pub fn spatial(&self) -> Shape3 {
        let n = self.shape.len();
        assert!(n >= 3, "tensor of rank {n} has no spatial axes");
        [self.shape[n - 3], self.shape[n - 2], self.shape[n - 1]]
    }

    /// Number of volumes stacked along the leading axes.
    pub fn lead(&self) -> usize {
        self.shape[..self.shape.len() - 3].iter().product()
    }

    /// The `i`-th volume along the flattened leading axes.
    pub fn volume(&self, i: usize) -> &[T] {
        let v = voxels(self.spatial());
        &self.data[i * v..(i + 1) * v]
    }

    pub fn volume_mut(&mut self, i: usize) -> &mut [T] {
        let v = voxels(self.spatial());
        &mut self.data[i * v..(i + 1) * v]
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Tensor<T> {
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }
}

impl<T: Clone + Default> Tensor<T> {
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::default())
    }
}

impl<T: Copy> Tensor<T> {
    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("cannot stack zero tensors".into()))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape() != first.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(p.data());
        }
        Ok(Tensor { shape, data })
    }

    /// Concatenates along the first axis.
    pub fn concat_first(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("cannot concatenate zero tensors".into()))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::ShapeMismatch(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            lead += p.shape()[0];
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Tensor { shape, data })
    }

    /// Sub-tensor `[start, end)` along the first axis.
    pub fn narrow_first(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.shape[0]);
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        }
    }

    /// Reverses the selected spatial axes of every volume.
    pub fn flip(&self, axes: [bool; 3]) -> Self {
        if axes == [false; 3] {
            return self.clone();
        }
        let sp = self.spatial();
        let mut out = self.clone();
        for l in 0..self.lead() {
            let src = self.volume(l);
            let dst = out.volume_mut(l);
            for x in 0..sp[0] {
                let sx = if axes[0] { sp[0] - 1 - x } else { x };
                for y in 0..sp[1] {
                    let sy = if axes[1] { sp[1] - 1 - y } else { y };
                    let drow = offset3(sp, x, y, 0);
                    let srow = offset3(sp, sx, sy, 0);
                    if axes[2] {
                        for z in 0..sp[2] {
                            dst[drow + z] = src[srow + sp[2] - 1 - z];
                        }
                    } else {
                        dst[drow..drow + sp[2]].copy_from_slice(&src[srow..srow + sp[2]]);
                    }
                }
            }
        }
        out
    }

    /// Extracts the box `[lo, hi)` from every volume.
    pub fn crop(&self, lo: Shape3, hi: Shape3) -> Self {
        let sp = self.spatial();
        for a in 0..3 {
            assert!(lo[a] <= hi[a] && hi[a] <= sp[a], "crop box out of range");
        }
        let out_sp = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape[n - 3..].copy_from_slice(&out_sp);
        let mut data = Vec::with_capacity(self.lead() * voxels(out_sp));
        for l in 0..self.lead() {
            let src = self.volume(l);
            for x in lo[0]..hi[0] {
                for y in lo[1]..hi[1] {
                    let o = offset3(sp, x, y, 0);
                    data.extend_from_slice(&src[o + lo[2]..o + hi[2]]);
                }
            }
        }
        Tensor { shape, data }
    }

    /// Places every volume at `offset` inside a volume of extent `out`,
    /// filling the rest with `fill`.
    pub fn pad(&self, offset: Shape3, out: Shape3, fill: T) -> Self {
        let sp = self.spatial();
        for a in 0..3 {
            assert!(offset[a] + sp[a] <= out[a], "padded extent too small");
        }
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape[n - 3..].copy_from_slice(&out);
        let mut res = Tensor::full(shape, fill);
        for l in 0..self.lead() {
            let src = self.volume(l);
            let dst = res.volume_mut(l);
            for x in 0..sp[0] {
                for y in 0..sp[1] {
                    let s = offset3(sp, x, y, 0);
                    let d = offset3(out, x + offset[0], y + offset[1], offset[2]);
                    dst[d..d + sp[2]].copy_from_slice(&src[s..s + sp[2]]);
                }
            }
        }
        res
    }
}

impl<T: Copy + ToPrimitive> Tensor<T> {
    pub fn cast<U: NumCast + Copy>(&self) -> Tensor<U> {
        self.map(|v| U::from(*v).expect("numeric cast"))
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Symmetric zero-padding offsets that grow `shape` to at least `min`.
pub fn symmetric_pad(shape: Shape3, min: Shape3) -> (Shape3, Shape3) {
    let mut offset = [0; 3];
    let mut out = shape;
    for a in 0..3 {
        if shape[a] < min[a] {
            offset[a] = (min[a] - shape[a]) / 2;
            out[a] = min[a];
        }
    }
    (offset, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|v| v as f32).collect())
    }

    #[test]
    fn flip_maps_first_axis() {
        let t = ramp(&[2, 3, 4, 5]);
        let f = t.flip([true, false, false]);
        let sp = [3, 4, 5];
        for c in 0..2 {
            for x in 0..3 {
                for y in 0..4 {
                    for z in 0..5 {
                        assert_eq!(
                            f.volume(c)[offset3(sp, x, y, z)],
                            t.volume(c)[offset3(sp, 2 - x, y, z)]
                        );
                    }
                }
            }
        }
        assert_eq!(f.flip([true, false, false]), t);
    }

    #[test]
    fn crop_inverts_pad() {
        let t = ramp(&[3, 2, 4]);
        let p = t.pad([1, 2, 0], [5, 6, 4], -1.0);
        assert_eq!(p.spatial(), [5, 6, 4]);
        assert_eq!(p.crop([1, 2, 0], [4, 4, 4]), t);
        let filled = p.data().iter().filter(|v| **v == -1.0).count();
        assert_eq!(filled, 5 * 6 * 4 - 24);
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, Mat::rows(&a, 3), Mat::rows(&b, 4), 0.0, &mut c, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn symmetric_pad_splits_remainder() {
        assert_eq!(symmetric_pad([100, 128, 3], [128, 128, 8]), ([14, 0, 2], [128, 128, 8]));
    }
}
