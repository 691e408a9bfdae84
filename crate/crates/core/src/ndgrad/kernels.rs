//! Numeric kernels behind the tape primitives.

use super::element::Element;
use crate::error::{Error, Result};
use crate::par;

/// Output extent of a convolution along one axis: `floor((n + 2p - k) / s) + 1`.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

/// Maps an image `(c, h, w)` to its patch matrix `(c*k*k, oh*ow)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let oh = conv_out_dim(h, k, stride, pad)?;
        let ow = conv_out_dim(w, k, stride, pad)?;
        Some(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

pub(crate) fn im2col<T: Element>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    debug_assert_eq!(img.len(), g.image_len());
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    let ncol = g.cols();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatters-and-adds patch columns back into an image.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    debug_assert_eq!(img.len(), g.image_len());
    let ncol = g.cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c[m,n] (+)= a[m,k] @ b[k,n]` with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Batched convolution: `x (n, cin, h, w)`, `w (cout, cin, k, k)`.
pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let out_len = cout * g.cols();
    let mut out = vec![T::zero(); n * out_len];
    par::for_each_chunk_mut(&mut out, out_len, |i, o| {
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        im2col(&x[i * g.image_len()..(i + 1) * g.image_len()], g, &mut cols);
        matmul_into(
            cout,
            g.rows(),
            g.cols(),
            weight,
            false,
            &cols,
            false,
            o,
            false,
        );
        if let Some(b) = bias {
            for (co, row) in o.chunks_mut(g.cols()).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + b[co]);
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`; each is computed only when requested.
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    dout: &[T],
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let out_len = cout * g.cols();
    let dx = need.0.then(|| {
        let mut dx = vec![T::zero(); n * g.image_len()];
        par::for_each_chunk_mut(&mut dx, g.image_len(), |i, d| {
            let mut dcols = vec![T::zero(); g.rows() * g.cols()];
            let go = &dout[i * out_len..(i + 1) * out_len];
            matmul_into(
                g.rows(),
                cout,
                g.cols(),
                weight,
                true,
                go,
                false,
                &mut dcols,
                false,
            );
            col2im(&dcols, g, d);
        });
        dx
    });
    let dw = need.1.then(|| {
        let partials = par::map_range(n, |i| {
            let mut cols = vec![T::zero(); g.rows() * g.cols()];
            im2col(&x[i * g.image_len()..(i + 1) * g.image_len()], g, &mut cols);
            let go = &dout[i * out_len..(i + 1) * out_len];
            let mut dw = vec![T::zero(); cout * g.rows()];
            matmul_into(
                cout,
                g.cols(),
                g.rows(),
                go,
                false,
                &cols,
                true,
                &mut dw,
                false,
            );
            dw
        });
        sum_in_order(partials, cout * g.rows())
    });
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); cout];
        for i in 0..n {
            for (co, row) in dout[i * out_len..(i + 1) * out_len]
                .chunks(g.cols())
                .enumerate()
            {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
        db
    });
    (dx, dw, db)
}

/// Transposed convolution: `x (n, cin, h, w)`, `w (cin, cout, k, k)`.
///
/// `g` describes the *output* image `(cout, oh, ow)` as seen by the forward
/// convolution this operator is the adjoint of, so `g.oh == h`, `g.ow == w`.
pub(crate) fn conv_transpose2d_forward<T: Element>(
    x: &[T],
    n: usize,
    cin: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_len = cin * g.cols();
    let mut out = vec![T::zero(); n * g.image_len()];
    par::for_each_chunk_mut(&mut out, g.image_len(), |i, o| {
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        let xs = &x[i * in_len..(i + 1) * in_len];
        matmul_into(
            g.rows(),
            cin,
            g.cols(),
            weight,
            true,
            xs,
            false,
            &mut cols,
            false,
        );
        col2im(&cols, g, o);
        if let Some(b) = bias {
            for (co, plane) in o.chunks_mut(g.h * g.w).enumerate() {
                plane.iter_mut().for_each(|v| *v = *v + b[co]);
            }
        }
    });
    out
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv_transpose2d_backward<T: Element>(
    x: &[T],
    n: usize,
    cin: usize,
    g: &ConvGeom,
    weight: &[T],
    dout: &[T],
    need: (bool, bool, bool),
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_len = cin * g.cols();
    let cols_of = |i: usize| {
        let mut dcols = vec![T::zero(); g.rows() * g.cols()];
        im2col(
            &dout[i * g.image_len()..(i + 1) * g.image_len()],
            g,
            &mut dcols,
        );
        dcols
    };
    let dx = need.0.then(|| {
        let mut dx = vec![T::zero(); n * in_len];
        par::for_each_chunk_mut(&mut dx, in_len, |i, d| {
            let dcols = cols_of(i);
            matmul_into(
                cin,
                g.rows(),
                g.cols(),
                weight,
                false,
                &dcols,
                false,
                d,
                false,
            );
        });
        dx
    });
    let dw = need.1.then(|| {
        let partials = par::map_range(n, |i| {
            let dcols = cols_of(i);
            let xs = &x[i * in_len..(i + 1) * in_len];
            let mut dw = vec![T::zero(); cin * g.rows()];
            matmul_into(
                cin,
                g.cols(),
                g.rows(),
                xs,
                false,
                &dcols,
                true,
                &mut dw,
                false,
            );
            dw
        });
        sum_in_order(partials, cin * g.rows())
    });
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); g.c];
        for i in 0..n {
            let o = &dout[i * g.image_len()..(i + 1) * g.image_len()];
            for (co, plane) in o.chunks(g.h * g.w).enumerate() {
                db[co] = db[co] + plane.iter().copied().sum::<T>();
            }
        }
        db
    });
    (dx, dw, db)
}

pub(crate) fn sum_in_order<T: Element>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    acc
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, with 0 on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + out.len() - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[i];
    }
    strides
}

/// Visits every index of `out`, passing `(linear_out, offset_a, offset_b)`.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        let mut d = rank;
        while d > 0 {
            d -= 1;
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

/// Sums `grad` (shaped `out`) down to `shape` along broadcast axes.
pub(crate) fn reduce_to_shape<T: Element>(grad: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    if out == shape {
        return grad.to_vec();
    }
    let n: usize = shape.iter().product();
    let mut acc = vec![T::zero(); n];
    let s = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &s, &zeros, |o, ia, _| acc[ia] = acc[ia] + grad[o]);
    acc
}

pub(crate) fn avg_pool_forward<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let inv = T::from_f64_lossy(1.0 / (k * k) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ki in 0..k {
                    for kj in 0..k {
                        acc = acc + src[(oy * s + ki) * w + ox * s + kj];
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn avg_pool_backward<T: Element>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let inv = T::from_f64_lossy(1.0 / (k * k) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dout[(p * oh + oy) * ow + ox] * inv;
                for ki in 0..k {
                    for kj in 0..k {
                        let i = (oy * s + ki) * w + ox * s + kj;
                        dst[i] = dst[i] + g;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution, independent of im2col/gemm.
    fn naive_conv(
        x: &[f64],
        cin: usize,
        h: usize,
        w: usize,
        wt: &[f64],
        cout: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let oh = conv_out_dim(h, k, s, p).unwrap();
        let ow = conv_out_dim(w, k, s, p).unwrap();
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * s + ki) as isize - p as isize;
                                let ix = (ox * s + kj) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ci * h + iy as usize) * w + ix as usize]
                                        * wt[((co * cin + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loops() {
        let (cin, h, w, cout, k) = (2, 7, 6, 3, 3);
        let x: Vec<f64> = (0..cin * h * w)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
            .collect();
        let wt: Vec<f64> = (0..cout * cin * k * k)
            .map(|i| ((i * 13 % 7) as f64 - 3.0) / 2.0)
            .collect();
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let g = ConvGeom::new(cin, h, w, k, s, p).unwrap();
            let got = conv2d_forward(&x, 1, &g, &wt, cout, None);
            let want = naive_conv(&x, cin, h, w, &wt, cout, k, s, p);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "s={s} p={p}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.image_len())
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let y: Vec<f64> = (0..g.rows() * g.cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(
            broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(),
            vec![2, 3, 4]
        );
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
        let g = vec![1.0f64; 6];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![2.0, 2.0, 2.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[2, 1]), vec![3.0, 3.0]);
    }
}
