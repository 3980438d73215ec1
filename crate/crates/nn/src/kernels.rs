//! Raw forward/backward kernels shared by the tape ops.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4};

use crate::Elem;

/// Output spatial size of a convolution.
pub(crate) fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

pub(crate) fn im2col<F: Elem>(
    x: ArrayView3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let mut col = Array2::<F>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

pub(crate) fn col2im<F: Elem>(
    dcol: ArrayView2<F>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let mut dx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcol[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dx
}

/// Forward convolution, NCHW, weight (Cout, Cin, kh, kw).
pub(crate) fn conv2d_fwd<F: Elem>(
    x: ArrayView4<F>,
    w: ArrayView4<F>,
    b: &Array1<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(wd, kw, stride, pad);
    let w_mat = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight contiguous")
        .to_owned();
    let mut out = Array4::<F>::zeros((n, cout, oh, ow));
    for ni in 0..n {
        let col = im2col(x.index_axis(ndarray::Axis(0), ni), kh, kw, stride, pad);
        let o = w_mat.dot(&col); // (cout, oh*ow)
        for co in 0..cout {
            let bias = b[co];
            for (idx, v) in o.row(co).iter().enumerate() {
                out[[ni, co, idx / ow, idx % ow]] = *v + bias;
            }
        }
    }
    out
}

/// Backward convolution. Returns (dx, dw, db).
pub(crate) fn conv2d_bwd<F: Elem>(
    x: ArrayView4<F>,
    w: ArrayView4<F>,
    dout: ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = dout.dim();
    let w_mat = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight contiguous")
        .to_owned();
    let mut dx = Array4::<F>::zeros((n, cin, h, wd));
    let mut dw_mat = Array2::<F>::zeros((cout, cin * kh * kw));
    let mut db = Array1::<F>::zeros(cout);
    for ni in 0..n {
        let col = im2col(x.index_axis(ndarray::Axis(0), ni), kh, kw, stride, pad);
        let dout_n = dout.index_axis(ndarray::Axis(0), ni);
        let dout_mat = dout_n
            .to_shape((cout, oh * ow))
            .expect("dout contiguous")
            .to_owned();
        dw_mat += &dout_mat.dot(&col.t());
        let dcol = w_mat.t().dot(&dout_mat);
        let dxn = col2im(dcol.view(), cin, h, wd, kh, kw, stride, pad);
        dx.index_axis_mut(ndarray::Axis(0), ni).assign(&dxn);
        for co in 0..cout {
            db[co] += dout_mat.row(co).iter().fold(F::zero(), |a, &v| a + v);
        }
    }
    let dw = dw_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("dw reshape");
    (dx, dw, db)
}

/// Transposed convolution 2x2 / stride 2 (exact upsample-by-2), weight (Cin, Cout, 2, 2).
pub(crate) fn convt2x2_fwd<F: Elem>(x: ArrayView4<F>, w: ArrayView4<F>, b: &Array1<F>) -> Array4<F> {
    let (n, cin, h, wd) = x.dim();
    let (cin_w, cout, _, _) = w.dim();
    assert_eq!(cin, cin_w, "conv_transpose channel mismatch");
    let w_mat = w
        .to_shape((cin, cout * 4))
        .expect("convT weight contiguous")
        .to_owned();
    let mut out = Array4::<F>::zeros((n, cout, 2 * h, 2 * wd));
    for ni in 0..n {
        let xn = x.index_axis(ndarray::Axis(0), ni);
        let x_mat = xn.to_shape((cin, h * wd)).expect("x contiguous").to_owned();
        let scatter = w_mat.t().dot(&x_mat); // (cout*4, h*wd)
        for co in 0..cout {
            let bias = b[co];
            for ky in 0..2 {
                for kx in 0..2 {
                    let row = (co * 2 + ky) * 2 + kx;
                    for y in 0..h {
                        for xcol in 0..wd {
                            out[[ni, co, 2 * y + ky, 2 * xcol + kx]] =
                                scatter[[row, y * wd + xcol]] + bias;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn convt2x2_bwd<F: Elem>(
    x: ArrayView4<F>,
    w: ArrayView4<F>,
    dout: ArrayView4<F>,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (n, cin, h, wd) = x.dim();
    let (_, cout, _, _) = w.dim();
    let w_mat = w
        .to_shape((cin, cout * 4))
        .expect("convT weight contiguous")
        .to_owned();
    let mut dx = Array4::<F>::zeros((n, cin, h, wd));
    let mut dw_mat = Array2::<F>::zeros((cin, cout * 4));
    let mut db = Array1::<F>::zeros(cout);
    for ni in 0..n {
        let mut dscatter = Array2::<F>::zeros((cout * 4, h * wd));
        for co in 0..cout {
            for ky in 0..2 {
                for kx in 0..2 {
                    let row = (co * 2 + ky) * 2 + kx;
                    for y in 0..h {
                        for xcol in 0..wd {
                            let g = dout[[ni, co, 2 * y + ky, 2 * xcol + kx]];
                            dscatter[[row, y * wd + xcol]] = g;
                            db[co] += g;
                        }
                    }
                }
            }
        }
        let xn = x.index_axis(ndarray::Axis(0), ni);
        let x_mat = xn.to_shape((cin, h * wd)).expect("x contiguous").to_owned();
        let dxn = w_mat.dot(&dscatter); // (cin, h*wd)
        dw_mat += &x_mat.dot(&dscatter.t());
        dx.index_axis_mut(ndarray::Axis(0), ni).assign(
            &dxn.into_shape_with_order((cin, h, wd)).expect("dx reshape"),
        );
    }
    let dw = dw_mat
        .into_shape_with_order((cin, cout, 2, 2))
        .expect("dw reshape");
    (dx, dw, db)
}

/// Two-tap sampling weights along one axis, pixel centers at integer
/// coordinates, taps clamped to the border.
pub(crate) fn line_taps(coords: &[f64], size: usize) -> Vec<(usize, usize, f64)> {
    coords
        .iter()
        .map(|&c| {
            let c = c.clamp(0.0, (size - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(size - 1);
            (lo, hi, c - lo as f64)
        })
        .collect()
}

/// Evenly spaced sample coordinates mapping `out_n` output pixels onto `in_n`
/// input pixels (half-pixel centers, the align_corners=false convention).
pub(crate) fn resize_coords(in_n: usize, out_n: usize) -> Vec<f64> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|i| (i as f64 + 0.5) * scale - 0.5)
        .collect()
}

/// Bilinear grid sample of a (N,C,H,W) tensor at the outer product of
/// `ys` × `xs` coordinates.
pub(crate) fn bilinear_sample_fwd<F: Elem>(x: ArrayView4<F>, ys: &[f64], xs: &[f64]) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let ty = line_taps(ys, h);
    let tx = line_taps(xs, w);
    let mut out = Array4::<F>::zeros((n, c, ys.len(), xs.len()));
    for ni in 0..n {
        for ci in 0..c {
            for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v00 = x[[ni, ci, y0, x0]].as_f64();
                    let v01 = x[[ni, ci, y0, x1]].as_f64();
                    let v10 = x[[ni, ci, y1, x0]].as_f64();
                    let v11 = x[[ni, ci, y1, x1]].as_f64();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    out[[ni, ci, i, j]] = F::c(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out
}

pub(crate) fn bilinear_sample_bwd<F: Elem>(
    dout: ArrayView4<F>,
    in_hw: (usize, usize),
    ys: &[f64],
    xs: &[f64],
) -> Array4<F> {
    let (n, c, oh, ow) = dout.dim();
    let (h, w) = in_hw;
    let ty = line_taps(ys, h);
    let tx = line_taps(xs, w);
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                let (y0, y1, fy) = ty[i];
                for j in 0..ow {
                    let (x0, x1, fx) = tx[j];
                    let g = dout[[ni, ci, i, j]].as_f64();
                    dx[[ni, ci, y0, x0]] += F::c(g * (1.0 - fy) * (1.0 - fx));
                    dx[[ni, ci, y0, x1]] += F::c(g * (1.0 - fy) * fx);
                    dx[[ni, ci, y1, x0]] += F::c(g * fy * (1.0 - fx));
                    dx[[ni, ci, y1, x1]] += F::c(g * fy * fx);
                }
            }
        }
    }
    dx
}

/// Standalone bilinear resize of a 2-D map (used outside the tape as well).
pub fn bilinear_resize_array(x: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let ys = resize_coords(h, oh);
    let xs = resize_coords(w, ow);
    let ty = line_taps(&ys, h);
    let tx = line_taps(&xs, w);
    let mut out = Array2::<f64>::zeros((oh, ow));
    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = x[[y0, x0]] * (1.0 - fx) + x[[y0, x1]] * fx;
            let bot = x[[y1, x0]] * (1.0 - fx) + x[[y1, x1]] * fx;
            out[[i, j]] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}
