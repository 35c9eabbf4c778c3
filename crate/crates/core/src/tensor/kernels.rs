//! Raw buffer kernels shared by the forward and backward passes.

use super::{TensorError, TensorResult};
use crate::scalar::Scalar;

/// Matrix view over a flat buffer: `rows×cols` logical shape, optionally
/// reading the storage transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, S> Mat<'a, S> {
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, trans: false }
    }

    /// Logical `rows×cols` matrix whose storage is the row-major `cols×rows`
    /// buffer `data`.
    pub fn transposed(data: &'a [S], rows: usize, cols: usize) -> Self {
        Mat { data, rows, cols, trans: true }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major `a.rows × b.cols`.
pub fn gemm<S: Scalar>(a: Mat<'_, S>, b: Mat<'_, S>, c: &mut [S], beta: S) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.data.len() >= a.rows * a.cols);
    assert!(b.data.len() >= b.rows * b.cols);
    assert!(c.len() >= a.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
    unsafe {
        S::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            S::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> TensorResult<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Element strides of `shape` viewed inside the broadcast shape `out`
/// (zero along broadcast dimensions).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 && out[off + i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every element of the broadcast shape `out`, passing the flat
/// indices into both operands and the output.
pub fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let total: usize = out.iter().product();
    let outer = total / inner;
    let mut idx = vec![0usize; nd - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    for o in 0..outer {
        let base_o = o * inner;
        for j in 0..inner {
            f(base_a + j * ia, base_b + j * ib, base_o + j);
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Split `shape` around `axis` into `(outer, dim, inner)` extents.
pub fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> TensorResult<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `src` (shape `shape`) into permuted layout: `out[idx] = src[idx ∘ perm]`
/// where output dimension `i` is input dimension `perm[i]`.
pub fn permute<S: Copy + Default>(src: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let nd = shape.len();
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![S::default(); src.len()];
    if nd == 0 {
        out.copy_from_slice(src);
        return out;
    }
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    for o in out.iter_mut() {
        *o = src[base];
        for d in (0..nd).rev() {
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Convolution geometry for a square kernel over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfold one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` column matrix.
pub fn im2col<S: Scalar>(img: &[S], g: &ConvGeom, cols: &mut [S]) {
    let (ho, wo) = g.out_hw();
    let np = ho * wo;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                            img[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            S::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, img: &mut [S]) {
    let (ho, wo) = g.out_hw();
    let np = ho * wo;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        img[(c * g.height + iy as usize) * g.width + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(Mat::new(&a, 2, 2), Mat::new(&b, 2, 2), &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // aᵀ·b
        gemm(Mat::transposed(&a, 2, 2), Mat::new(&b, 2, 2), &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // a·bᵀ
        gemm(Mat::new(&a, 2, 2), Mat::transposed(&b, 2, 2), &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3, 4], &[4]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
        let out = [2, 3];
        let sa = broadcast_strides(&[2, 3], &out);
        let sb = broadcast_strides(&[3], &out);
        let mut seen = Vec::new();
        for_each_broadcast(&out, &sa, &sb, |ia, ib, io| seen.push((ia, ib, io)));
        assert_eq!(seen[4], (4, 1, 4));
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let src: Vec<f64> = (0..24).map(|x| x as f64).collect();
        let perm = [2, 0, 1];
        let p = permute(&src, &shape, &perm);
        let pshape = [4, 2, 3];
        let back = permute(&p, &pshape, &inverse_permutation(&perm));
        assert_eq!(back, src);
        // out[k, i, j] = src[i, j, k]
        assert_eq!(p[(2 + 1) * 3 + 2], src[(3 + 2) * 4 + 1]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 5,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let (ho, wo) = g.out_hw();
        let x: Vec<f64> = (0..50).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * ho * wo).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
