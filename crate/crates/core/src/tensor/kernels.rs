//! Raw numeric kernels shared by the forward and backward passes.

/// Strided view of a row-major matrix used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatView<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatView {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `out = beta * out + a · b` with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, out: &mut [f64], beta: f64) {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            out[..m * n].iter_mut().for_each(|v| *v = 0.0);
        } else {
            out[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: the views are backed by slices that cover the strided extents
    // checked in debug builds above; `out` holds m*n contiguous elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Element strides of `shape` when read as a broadcast into `out`.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + nd - shape.len();
        strides[o] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output index together with the matching offsets into the
/// two broadcast inputs.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Geometry of a 2-D convolution over an HWC image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut col = vec![0.0; g.ho * g.wo * patch];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut col[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    col
}

pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let patch = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &col[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// Bilinear footprint of a continuous coordinate on an `h × w` grid whose
/// texel `(i, j)` sits at integer coordinate `(x = j, y = i)`.
///
/// Each corner is `(texel index or None when outside, weight)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Footprint {
    pub corners: [(Option<usize>, f64); 4],
    pub fx: f64,
    pub fy: f64,
}

impl Footprint {
    pub fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let texel = |ix: f64, iy: f64| -> Option<usize> {
            if ix < 0.0 || iy < 0.0 || ix >= w as f64 || iy >= h as f64 {
                None
            } else {
                Some(iy as usize * w + ix as usize)
            }
        };
        Footprint {
            corners: [
                (texel(x0, y0), (1.0 - fx) * (1.0 - fy)),
                (texel(x0 + 1.0, y0), fx * (1.0 - fy)),
                (texel(x0, y0 + 1.0), (1.0 - fx) * fy),
                (texel(x0 + 1.0, y0 + 1.0), fx * fy),
            ],
            fx,
            fy,
        }
    }

    /// Distance of the coordinate to the nearest grid line.
    pub fn kink_distance(&self) -> f64 {
        self.fx.min(1.0 - self.fx).min(self.fy).min(1.0 - self.fy)
    }

    /// Derivative weights of each corner with respect to x and y.
    pub fn coord_weights(&self) -> ([f64; 4], [f64; 4]) {
        let (fx, fy) = (self.fx, self.fy);
        (
            [-(1.0 - fy), 1.0 - fy, -fy, fy],
            [-(1.0 - fx), -fx, 1.0 - fx, fx],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 5], &[4, 1]), Some(vec![2, 4, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm(MatView::new(&a, 2, 2).t(), MatView::new(&b, 2, 2), &mut out, 0.0);
        // aᵀ b = [[1,3],[2,4]]·b
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = ConvGeom {
            h: 3,
            w: 4,
            cin: 2,
            k: 3,
            stride: 2,
            pad: 1,
            ho: 2,
            wo: 2,
        };
        let x: Vec<f64> = (0..24).map(|i| i as f64 * 0.5 - 3.0).collect();
        let col = im2col(&x, &g);
        let y: Vec<f64> = (0..col.len()).map(|i| (i % 7) as f64 - 2.0).collect();
        let mut xt = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut xt);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
