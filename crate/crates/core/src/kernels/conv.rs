//! 3D convolution via chunked im2col + GEMM, and the 2x2x2/stride-2
//! transposed convolution used by the decoder.

use crate::tensor::{gemm, voxels, Mat, Scalar, Shape3, Tensor};

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: Shape3,
    pub output: Shape3,
}

impl ConvGeometry {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, input: Shape3) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad;
            if span < kernel {
                return None;
            }
            output[a] = (span - kernel) / stride + 1;
        }
        Some(ConvGeometry {
            cin,
            cout,
            kernel,
            stride,
            pad,
            input,
            output,
        })
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output rows (x, y pairs) per im2col chunk.
    fn rows_per_chunk(&self) -> usize {
        let per_row = self.cin * self.taps() * self.output[2];
        (COL_BUDGET / per_row.max(1)).clamp(1, self.output[0] * self.output[1])
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, row0: usize, nrows: usize, col: &mut [T]) {
    let [_, iy_n, iz_n] = g.input;
    let [_, oy_n, oz_n] = g.output;
    let k = g.kernel;
    let ncols = nrows * oz_n;
    let plane = voxels(g.input);
    let (s, p) = (g.stride as isize, g.pad as isize);
    for ci in 0..g.cin {
        let xc = &x[ci * plane..(ci + 1) * plane];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let r = ((ci * k + kx) * k + ky) * k + kz;
                    let dst = &mut col[r * ncols..(r + 1) * ncols];
                    for t in 0..nrows {
                        let row = row0 + t;
                        let (ox, oy) = (row / oy_n, row % oy_n);
                        let ix = ox as isize * s + kx as isize - p;
                        let iy = oy as isize * s + ky as isize - p;
                        let seg = &mut dst[t * oz_n..(t + 1) * oz_n];
                        if ix < 0 || iy < 0 || ix >= g.input[0] as isize || iy >= iy_n as isize {
                            seg.fill(T::zero());
                            continue;
                        }
                        let base = (ix as usize * iy_n + iy as usize) * iz_n;
                        for (oz, v) in seg.iter_mut().enumerate() {
                            let iz = oz as isize * s + kz as isize - p;
                            *v = if iz >= 0 && iz < iz_n as isize {
                                xc[base + iz as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, row0: usize, nrows: usize, dx: &mut [T]) {
    let [_, iy_n, iz_n] = g.input;
    let [_, oy_n, oz_n] = g.output;
    let k = g.kernel;
    let ncols = nrows * oz_n;
    let plane = voxels(g.input);
    let (s, p) = (g.stride as isize, g.pad as isize);
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * plane..(ci + 1) * plane];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let r = ((ci * k + kx) * k + ky) * k + kz;
                    let src = &col[r * ncols..(r + 1) * ncols];
                    for t in 0..nrows {
                        let row = row0 + t;
                        let (ox, oy) = (row / oy_n, row % oy_n);
                        let ix = ox as isize * s + kx as isize - p;
                        let iy = oy as isize * s + ky as isize - p;
                        if ix < 0 || iy < 0 || ix >= g.input[0] as isize || iy >= iy_n as isize {
                            continue;
                        }
                        let base = (ix as usize * iy_n + iy as usize) * iz_n;
                        for (oz, v) in src[t * oz_n..(t + 1) * oz_n].iter().enumerate() {
                            let iz = oz as isize * s + kz as isize - p;
                            if iz >= 0 && iz < iz_n as isize {
                                dxc[base + iz as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `x: [B, Cin, H, W, D]`, `w: [Cout, Cin, k, k, k]`, `b: [Cout]`.
pub fn conv3d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &ConvGeometry) -> Tensor<T> {
    let batch = x.shape()[0];
    let n_in = voxels(g.input);
    let n_out = voxels(g.output);
    let kk = g.cin * g.taps();
    let mut out = Tensor::zeros(vec![batch, g.cout, g.output[0], g.output[1], g.output[2]]);
    let rows = g.rows_per_chunk();
    let total_rows = g.output[0] * g.output[1];
    let mut col = Vec::new();
    for bi in 0..batch {
        let xb = &x.data()[bi * g.cin * n_in..(bi + 1) * g.cin * n_in];
        let ob = &mut out.data_mut()[bi * g.cout * n_out..(bi + 1) * g.cout * n_out];
        if g.is_pointwise() {
            gemm(g.cout, kk, n_out, T::one(), Mat::rows(w.data(), kk), Mat::rows(xb, n_in), T::zero(), ob, n_out);
        } else {
            let mut row0 = 0;
            while row0 < total_rows {
                let nrows = rows.min(total_rows - row0);
                let ncols = nrows * g.output[2];
                col.resize(kk * ncols, T::zero());
                im2col(xb, g, row0, nrows, &mut col);
                let off = row0 * g.output[2];
                gemm(
                    g.cout,
                    kk,
                    ncols,
                    T::one(),
                    Mat::rows(w.data(), kk),
                    Mat::rows(&col, ncols),
                    T::zero(),
                    &mut ob[off..],
                    n_out,
                );
                row0 += nrows;
            }
        }
        if let Some(b) = b {
            for (co, plane) in ob.chunks_mut(n_out).enumerate() {
                let bias = b.data()[co];
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads<T> {
    let batch = x.shape()[0];
    let n_in = voxels(g.input);
    let n_out = voxels(g.output);
    let kk = g.cin * g.taps();
    let mut dx = need[0].then(|| Tensor::zeros(x.shape().to_vec()));
    let mut dw = need[1].then(|| Tensor::zeros(w.shape().to_vec()));
    let db = need[2].then(|| {
        let mut db = Tensor::zeros(vec![g.cout]);
        for bi in 0..batch {
            for co in 0..g.cout {
                let s = (bi * g.cout + co) * n_out;
                db.data_mut()[co] += grad.data()[s..s + n_out].iter().copied().sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return ConvGrads { input: None, weight: None, bias: db };
    }
    let rows = g.rows_per_chunk();
    let total_rows = g.output[0] * g.output[1];
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for bi in 0..batch {
        let xb = &x.data()[bi * g.cin * n_in..(bi + 1) * g.cin * n_in];
        let gb = &grad.data()[bi * g.cout * n_out..(bi + 1) * g.cout * n_out];
        if g.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                gemm(g.cout, n_out, kk, T::one(), Mat::rows(gb, n_out), Mat::transposed(xb, n_in), T::one(), dw.data_mut(), kk);
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx.data_mut()[bi * g.cin * n_in..(bi + 1) * g.cin * n_in];
                gemm(kk, g.cout, n_out, T::one(), Mat::transposed(w.data(), kk), Mat::rows(gb, n_out), T::zero(), dxb, n_out);
            }
            continue;
        }
        let mut row0 = 0;
        while row0 < total_rows {
            let nrows = rows.min(total_rows - row0);
            let ncols = nrows * g.output[2];
            let off = row0 * g.output[2];
            if let Some(dw) = dw.as_mut() {
                col.resize(kk * ncols, T::zero());
                im2col(xb, g, row0, nrows, &mut col);
                gemm(
                    g.cout,
                    ncols,
                    kk,
                    T::one(),
                    Mat::rows(&gb[off..], n_out),
                    Mat::transposed(&col, ncols),
                    T::one(),
                    dw.data_mut(),
                    kk,
                );
            }
            if let Some(dx) = dx.as_mut() {
                dcol.resize(kk * ncols, T::zero());
                gemm(
                    kk,
                    g.cout,
                    ncols,
                    T::one(),
                    Mat::transposed(w.data(), kk),
                    Mat::rows(&gb[off..], n_out),
                    T::zero(),
                    &mut dcol,
                    ncols,
                );
                let dxb = &mut dx.data_mut()[bi * g.cin * n_in..(bi + 1) * g.cin * n_in];
                col2im(&dcol, g, row0, nrows, dxb);
            }
            row0 += nrows;
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

/// Transposed convolution with a 2x2x2 kernel and stride 2.
///
/// `x: [B, Cin, h, w, d]`, `w: [Cin, Cout, 2, 2, 2]` -> `[B, Cout, 2h, 2w, 2d]`.
pub fn conv_transpose3d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (batch, cin) = (x.shape()[0], x.shape()[1]);
    let cout = w.shape()[1];
    let sp = x.spatial();
    let n = voxels(sp);
    let out_sp = [sp[0] * 2, sp[1] * 2, sp[2] * 2];
    let n_out = voxels(out_sp);
    let m = cout * 8;
    let mut out = Tensor::zeros(vec![batch, cout, out_sp[0], out_sp[1], out_sp[2]]);
    let mut tmp = vec![T::zero(); m * n];
    for bi in 0..batch {
        let xb = &x.data()[bi * cin * n..(bi + 1) * cin * n];
        // tmp[(co, tap), voxel] = sum_ci w[ci, (co, tap)] * x[ci, voxel]
        gemm(m, cin, n, T::one(), Mat::transposed(w.data(), m), Mat::rows(xb, n), T::zero(), &mut tmp, n);
        let ob = &mut out.data_mut()[bi * cout * n_out..(bi + 1) * cout * n_out];
        for co in 0..cout {
            let bias = b.map_or(T::zero(), |b| b.data()[co]);
            let plane = &mut ob[co * n_out..(co + 1) * n_out];
            for tap in 0..8 {
                let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                let src = &tmp[(co * 8 + tap) * n..(co * 8 + tap + 1) * n];
                for x0 in 0..sp[0] {
                    for y0 in 0..sp[1] {
                        let srow = (x0 * sp[1] + y0) * sp[2];
                        let drow = ((2 * x0 + a) * out_sp[1] + 2 * y0 + bb) * out_sp[2] + c;
                        for z0 in 0..sp[2] {
                            plane[drow + 2 * z0] = src[srow + z0] + bias;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (batch, cin) = (x.shape()[0], x.shape()[1]);
    let cout = w.shape()[1];
    let sp = x.spatial();
    let n = voxels(sp);
    let out_sp = [sp[0] * 2, sp[1] * 2, sp[2] * 2];
    let n_out = voxels(out_sp);
    let m = cout * 8;
    let mut dx = need[0].then(|| Tensor::zeros(x.shape().to_vec()));
    let mut dw = need[1].then(|| Tensor::zeros(w.shape().to_vec()));
    let mut db = need[2].then(|| Tensor::zeros(vec![cout]));
    let mut gathered = vec![T::zero(); m * n];
    for bi in 0..batch {
        let gb = &grad.data()[bi * cout * n_out..(bi + 1) * cout * n_out];
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                db.data_mut()[co] += gb[co * n_out..(co + 1) * n_out].iter().copied().sum::<T>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        for co in 0..cout {
            let plane = &gb[co * n_out..(co + 1) * n_out];
            for tap in 0..8 {
                let (a, bb, c) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                let dst = &mut gathered[(co * 8 + tap) * n..(co * 8 + tap + 1) * n];
                for x0 in 0..sp[0] {
                    for y0 in 0..sp[1] {
                        let drow = (x0 * sp[1] + y0) * sp[2];
                        let srow = ((2 * x0 + a) * out_sp[1] + 2 * y0 + bb) * out_sp[2] + c;
                        for z0 in 0..sp[2] {
                            dst[drow + z0] = plane[srow + 2 * z0];
                        }
                    }
                }
            }
        }
        let xb = &x.data()[bi * cin * n..(bi + 1) * cin * n];
        if let Some(dw) = dw.as_mut() {
            gemm(cin, n, m, T::one(), Mat::rows(xb, n), Mat::transposed(&gathered, n), T::one(), dw.data_mut(), m);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[bi * cin * n..(bi + 1) * cin * n];
            gemm(cin, m, n, T::one(), Mat::rows(w.data(), m), Mat::rows(&gathered, n), T::zero(), dxb, n);
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}
