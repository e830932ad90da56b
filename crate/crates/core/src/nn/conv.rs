//! 2-D convolution and transposed convolution over NCHW batches, lowered to
//! GEMM through an im2col buffer.
//!
//! Kernel layouts follow the usual conventions: a convolution kernel is
//! `[out, in, k, k]`, a transposed-convolution kernel is `[in, out, k, k]`.

use ndarray::{Array4, ArrayView4, ArrayViewD, ArrayViewMutD};

use super::real::{matmul, Real};

/// Output side of a convolution with the given geometry.
pub fn conv_out_side(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output side of a transposed convolution (no output padding).
pub fn conv_transpose_out_side(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    ((input.checked_sub(1)?) * stride + kernel).checked_sub(2 * padding)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let k = g.kernel;
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Scatter-add the column buffer back onto the image grid (adjoint of `im2col`).
fn col2im<T: Real>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let k = g.kernel;
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad<T: Real>(dy: &[T], db: &mut [T], plane: usize) {
    for (chunk, g) in dy.chunks(plane).zip(db.iter_mut()) {
        *g += chunk.iter().copied().sum::<T>();
    }
}

/// Gradients produced by a convolution-like layer.
pub struct ConvGrads<T> {
    pub input: Option<Array4<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Strided square convolution. `weight` is `[out, in, k, k]`, `bias` is `[out]`.
pub fn conv2d_forward<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayViewD<T>,
    bias: ArrayViewD<T>,
    stride: usize,
    padding: usize,
) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let ws = weight.shape();
    let (c_out, k) = (ws[0], ws[2]);
    debug_assert_eq!(ws[1], c);
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        out_h: conv_out_side(h, k, stride, padding).expect("kernel larger than padded input"),
        out_w: conv_out_side(w, k, stride, padding).expect("kernel larger than padded input"),
    };
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let weight = weight.as_standard_layout();
    let wflat = weight.as_slice().expect("standard layout");
    let bias = bias.as_standard_layout();
    let bflat = bias.as_slice().expect("standard layout");

    let mut out = Array4::<T>::zeros((n, c_out, g.out_h, g.out_w));
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let in_plane = c * h * w;
    let out_plane = c_out * g.cols();
    let os = out.as_slice_mut().expect("fresh array");
    for i in 0..n {
        im2col(&xs[i * in_plane..(i + 1) * in_plane], &g, &mut cols);
        let dst = &mut os[i * out_plane..(i + 1) * out_plane];
        matmul(
            dst,
            wflat,
            &cols,
            c_out,
            g.rows(),
            g.cols(),
            false,
            false,
            false,
        );
        add_bias(dst, bflat, g.cols());
    }
    out
}

/// Backward pass of [`conv2d_forward`]. The input gradient is only
/// materialized when `need_input_grad` is set.
pub fn conv2d_backward<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayViewD<T>,
    dy: ArrayView4<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> ConvGrads<T> {
    let (n, c, h, w) = x.dim();
    let ws = weight.shape();
    let (c_out, k) = (ws[0], ws[2]);
    let (_, _, out_h, out_w) = dy.dim();
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        out_h,
        out_w,
    };
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let weight = weight.as_standard_layout();
    let wflat = weight.as_slice().expect("standard layout");

    let mut dw = vec![T::zero(); c_out * g.rows()];
    let mut db = vec![T::zero(); c_out];
    let mut dx = need_input_grad.then(|| Array4::<T>::zeros((n, c, h, w)));
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let mut dcols = vec![T::zero(); g.rows() * g.cols()];
    let in_plane = c * h * w;
    let out_plane = c_out * g.cols();
    for i in 0..n {
        let dy_i = &dys[i * out_plane..(i + 1) * out_plane];
        im2col(&xs[i * in_plane..(i + 1) * in_plane], &g, &mut cols);
        matmul(
            &mut dw,
            dy_i,
            &cols,
            c_out,
            g.cols(),
            g.rows(),
            false,
            true,
            true,
        );
        accumulate_bias_grad(dy_i, &mut db, g.cols());
        if let Some(dx) = dx.as_mut() {
            matmul(
                &mut dcols,
                wflat,
                dy_i,
                g.rows(),
                c_out,
                g.cols(),
                true,
                false,
                false,
            );
            let dxs = dx.as_slice_mut().expect("fresh array");
            col2im(&dcols, &g, &mut dxs[i * in_plane..(i + 1) * in_plane]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Strided transposed convolution. `weight` is `[in, out, k, k]`.
pub fn conv_transpose2d_forward<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayViewD<T>,
    bias: ArrayViewD<T>,
    stride: usize,
    padding: usize,
) -> Array4<T> {
    let (n, c_in, h, w) = x.dim();
    let ws = weight.shape();
    let (c_out, k) = (ws[1], ws[2]);
    debug_assert_eq!(ws[0], c_in);
    let out_h = conv_transpose_out_side(h, k, stride, padding).expect("degenerate geometry");
    let out_w = conv_transpose_out_side(w, k, stride, padding).expect("degenerate geometry");
    // Geometry of the adjoint convolution, which maps the output grid back
    // onto the input grid.
    let g = Geometry {
        channels: c_out,
        height: out_h,
        width: out_w,
        kernel: k,
        stride,
        padding,
        out_h: h,
        out_w: w,
    };
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let weight = weight.as_standard_layout();
    let wflat = weight.as_slice().expect("standard layout");
    let bias = bias.as_standard_layout();
    let bflat = bias.as_slice().expect("standard layout");

    let mut out = Array4::<T>::zeros((n, c_out, out_h, out_w));
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let in_plane = c_in * h * w;
    let out_plane = c_out * out_h * out_w;
    let os = out.as_slice_mut().expect("fresh array");
    for i in 0..n {
        matmul(
            &mut cols,
            wflat,
            &xs[i * in_plane..(i + 1) * in_plane],
            g.rows(),
            c_in,
            g.cols(),
            true,
            false,
            false,
        );
        let dst = &mut os[i * out_plane..(i + 1) * out_plane];
        col2im(&cols, &g, dst);
        add_bias(dst, bflat, out_h * out_w);
    }
    out
}

/// Backward pass of [`conv_transpose2d_forward`].
pub fn conv_transpose2d_backward<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayViewD<T>,
    dy: ArrayView4<T>,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> ConvGrads<T> {
    let (n, c_in, h, w) = x.dim();
    let ws = weight.shape();
    let (c_out, k) = (ws[1], ws[2]);
    let (_, _, out_h, out_w) = dy.dim();
    let g = Geometry {
        channels: c_out,
        height: out_h,
        width: out_w,
        kernel: k,
        stride,
        padding,
        out_h: h,
        out_w: w,
    };
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let weight = weight.as_standard_layout();
    let wflat = weight.as_slice().expect("standard layout");

    let mut dw = vec![T::zero(); c_in * g.rows()];
    let mut db = vec![T::zero(); c_out];
    let mut dx = need_input_grad.then(|| Array4::<T>::zeros((n, c_in, h, w)));
    let mut dcols = vec![T::zero(); g.rows() * g.cols()];
    let in_plane = c_in * h * w;
    let out_plane = c_out * out_h * out_w;
    for i in 0..n {
        let dy_i = &dys[i * out_plane..(i + 1) * out_plane];
        im2col(dy_i, &g, &mut dcols);
        let x_i = &xs[i * in_plane..(i + 1) * in_plane];
        matmul(
            &mut dw,
            x_i,
            &dcols,
            c_in,
            g.cols(),
            g.rows(),
            false,
            true,
            true,
        );
        accumulate_bias_grad(dy_i, &mut db, out_h * out_w);
        if let Some(dx) = dx.as_mut() {
            let dxs = dx.as_slice_mut().expect("fresh array");
            matmul(
                &mut dxs[i * in_plane..(i + 1) * in_plane],
                wflat,
                &dcols,
                c_in,
                g.rows(),
                g.cols(),
                false,
                false,
                false,
            );
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Reshape a flat gradient buffer into the parameter's shape and add it.
pub fn accumulate_into<T: Real>(target: &mut ArrayViewMutD<T>, flat: &[T]) {
    let slice = target
        .as_slice_mut()
        .expect("parameters are standard layout");
    for (t, &g) in slice.iter_mut().zip(flat) {
        *t += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, ArrayD, IxDyn};

    /// Direct seven-loop convolution used as an independent reference.
    fn naive_conv(
        x: &Array4<f64>,
        w: &ArrayD<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let oh = conv_out_side(h, k, stride, pad).unwrap();
        let ow = conv_out_side(wd, k, stride, pad).unwrap();
        let mut out = Array4::zeros((n, co, oh, ow));
        for i in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * stride + ki) as isize - pad as isize;
                                    let ix = (xx * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += w[[o, ci, ki, kj]]
                                            * x[[i, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[i, o, y, xx]] = acc;
                    }
                }
            }
        }
        out
    }

    /// Transposed convolution by direct scattering.
    fn naive_conv_t(
        x: &Array4<f64>,
        w: &ArrayD<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, ci, h, wd) = x.dim();
        let (co, k) = (w.shape()[1], w.shape()[2]);
        let oh = conv_transpose_out_side(h, k, stride, pad).unwrap();
        let ow = conv_transpose_out_side(wd, k, stride, pad).unwrap();
        let mut out = Array4::zeros((n, co, oh, ow));
        for i in 0..n {
            for (o, &bias) in b.iter().enumerate().take(co) {
                out.slice_mut(ndarray::s![i, o, .., ..]).fill(bias);
            }
            for c in 0..ci {
                for y in 0..h {
                    for xx in 0..wd {
                        for o in 0..co {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let oy = (y * stride + ki) as isize - pad as isize;
                                    let ox = (xx * stride + kj) as isize - pad as isize;
                                    if oy >= 0
                                        && ox >= 0
                                        && (oy as usize) < oh
                                        && (ox as usize) < ow
                                    {
                                        out[[i, o, oy as usize, ox as usize]] +=
                                            w[[c, o, ki, kj]] * x[[i, c, y, xx]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn filled(shape: &[usize], seed: f64) -> ArrayD<f64> {
        let len: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..len)
                .map(|i| ((i as f64 + seed) * 0.7311).sin())
                .collect(),
        )
        .unwrap()
    }

    fn as4(a: ArrayD<f64>) -> Array4<f64> {
        a.into_dimensionality().unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (stride, pad, side) in [(2, 1, 8), (1, 1, 7), (2, 0, 9), (1, 0, 5)] {
            let x = as4(filled(&[2, 3, side, side], 0.3));
            let w = filled(&[5, 3, 4, 4], 1.1);
            let b = vec![0.1, -0.2, 0.3, 0.0, 0.5];
            let got = conv2d_forward(
                x.view(),
                w.view(),
                Array1::from(b.clone()).into_dyn().view(),
                stride,
                pad,
            );
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(got.dim(), want.dim());
            for (a, e) in got.iter().zip(want.iter()) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_transpose_matches_direct_scatter() {
        for (stride, pad, side) in [(2, 1, 4), (1, 1, 5), (2, 0, 3)] {
            let x = as4(filled(&[2, 3, side, side], 0.9));
            let w = filled(&[3, 2, 4, 4], 2.2);
            let b = vec![0.25, -0.5];
            let got = conv_transpose2d_forward(
                x.view(),
                w.view(),
                Array1::from(b.clone()).into_dyn().view(),
                stride,
                pad,
            );
            let want = naive_conv_t(&x, &w, &b, stride, pad);
            assert_eq!(got.dim(), want.dim());
            for (a, e) in got.iter().zip(want.iter()) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stride_two_halves_and_doubles() {
        assert_eq!(conv_out_side(256, 4, 2, 1), Some(128));
        assert_eq!(conv_out_side(32, 4, 1, 1), Some(31));
        assert_eq!(conv_transpose_out_side(4, 4, 2, 1), Some(8));
        assert_eq!(conv_transpose_out_side(1, 4, 2, 1), Some(2));
    }

    /// Loss = <r, f(x)>; check each gradient against central differences.
    fn check_grads(transpose: bool) {
        let (stride, pad) = (2, 1);
        let x = as4(filled(&[2, 3, 4, 4], 0.4));
        let w = if transpose {
            filled(&[3, 2, 4, 4], 0.8)
        } else {
            filled(&[2, 3, 4, 4], 0.8)
        };
        let b = Array1::from(vec![0.3, -0.1]).into_dyn();
        let fwd = |x: &Array4<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| {
            if transpose {
                conv_transpose2d_forward(x.view(), w.view(), b.view(), stride, pad)
            } else {
                conv2d_forward(x.view(), w.view(), b.view(), stride, pad)
            }
        };
        let y = fwd(&x, &w, &b);
        let r = as4(filled(y.shape(), 5.0));
        let loss = |x: &Array4<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| (&fwd(x, w, b) * &r).sum();
        let grads = if transpose {
            conv_transpose2d_backward(x.view(), w.view(), r.view(), stride, pad, true)
        } else {
            conv2d_backward(x.view(), w.view(), r.view(), stride, pad, true)
        };
        let h = 1e-6;
        let dx = grads.input.unwrap();
        for idx in [0usize, 7, 19, 40, 95] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-6, "dx[{idx}]");
        }
        for idx in [0usize, 5, 33, 63, 90] {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[idx] += h;
            wm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - grads.weight[idx]).abs() < 1e-6, "dw[{idx}]");
        }
        for idx in 0..2 {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[idx] += h;
            bm[idx] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - grads.bias[idx]).abs() < 1e-6, "db[{idx}]");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_grads(false);
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        check_grads(true);
    }
}
