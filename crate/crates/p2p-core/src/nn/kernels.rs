//! Raw array kernels behind the tape ops: im2col convolution, nearest
//! upsampling, and bilinear ROI sampling. Layout is HWC throughout.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4};

/// Output spatial size of a 'same-ish' convolution.
pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfold (H,W,Cin) into (Ho*Wo, K*K*Cin) patches.
pub fn im2col(x: &ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (h, w, c) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((ho * wo, k * k * c));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (ky * k + kx) * c;
                    for ci in 0..c {
                        cols[[row, base + ci]] = x[[iy as usize, ix as usize, ci]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold (Ho*Wo, K*K*Cin) patch gradients back onto an (H,W,Cin) grid.
pub fn col2im(
    cols: &ArrayView2<f64>,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut x = Array3::<f64>::zeros((h, w, c));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (ky * k + kx) * c;
                    for ci in 0..c {
                        x[[iy as usize, ix as usize, ci]] += cols[[row, base + ci]];
                    }
                }
            }
        }
    }
    x
}

/// Convolution forward: x (H,W,Cin) * w (K,K,Cin,Cout) + b (Cout).
pub fn conv2d(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    b: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (h, wd, cin) = x.dim();
    let (k, k2, cin_w, cout) = w.dim();
    assert_eq!(k, k2, "square kernels only");
    assert_eq!(cin, cin_w, "channel mismatch");
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(wd, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let wmat = w
        .to_shape((k * k * cin, cout))
        .expect("weight reshape")
        .to_owned();
    let mut out2 = cols.dot(&wmat);
    for mut row in out2.rows_mut() {
        row += b;
    }
    out2.into_shape_with_order((ho, wo, cout)).expect("output reshape")
}

/// Convolution backward. Returns (dx, dw, db).
pub fn conv2d_backward(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    dout: &ArrayView3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (h, wd, cin) = x.dim();
    let (k, _, _, cout) = w.dim();
    let (ho, wo, _) = dout.dim();
    let dout2 = dout
        .to_shape((ho * wo, cout))
        .expect("dout reshape")
        .to_owned();
    let cols = im2col(x, k, stride, pad);
    let dw2 = cols.t().dot(&dout2);
    let dw = dw2
        .into_shape_with_order((k, k, cin, cout))
        .expect("dw reshape");
    let db = dout2.sum_axis(ndarray::Axis(0));
    let wmat = w
        .to_shape((k * k * cin, cout))
        .expect("weight reshape")
        .to_owned();
    let dcols = dout2.dot(&wmat.t());
    let dx = col2im(&dcols.view(), h, wd, cin, k, stride, pad);
    (dx, dw, db)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x(x: &ArrayView3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::<f64>::zeros((2 * h, 2 * w, c));
    for y in 0..h {
        for x_ in 0..w {
            for ci in 0..c {
                let v = x[[y, x_, ci]];
                out[[2 * y, 2 * x_, ci]] = v;
                out[[2 * y + 1, 2 * x_, ci]] = v;
                out[[2 * y, 2 * x_ + 1, ci]] = v;
                out[[2 * y + 1, 2 * x_ + 1, ci]] = v;
            }
        }
    }
    out
}

pub fn upsample2x_backward(dout: &ArrayView3<f64>) -> Array3<f64> {
    let (h2, w2, c) = dout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<f64>::zeros((h, w, c));
    for y in 0..h2 {
        for x_ in 0..w2 {
            for ci in 0..c {
                dx[[y / 2, x_ / 2, ci]] += dout[[y, x_, ci]];
            }
        }
    }
    dx
}

/// One bilinear sample with border-replicate clamping.
///
/// Returns the four (y, x, weight) taps; coordinates are in feature index
/// space where integer positions are cell centers.
fn bilinear_taps(fy: f64, fx: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let y0f = fy.floor();
    let x0f = fx.floor();
    let wy = fy - y0f;
    let wx = fx - x0f;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let y0 = clamp(y0f as isize, h);
    let y1 = clamp(y0f as isize + 1, h);
    let x0 = clamp(x0f as isize, w);
    let x1 = clamp(x0f as isize + 1, w);
    [
        (y0, x0, (1.0 - wy) * (1.0 - wx)),
        (y0, x1, (1.0 - wy) * wx),
        (y1, x0, wy * (1.0 - wx)),
        (y1, x1, wy * wx),
    ]
}

/// Bilinear sampling of `grid` locations (feature index space) from x (H,W,C).
/// Output is (grid.len(), C); the caller reshapes to (S,S,C).
pub fn roi_sample(x: &ArrayView3<f64>, grid: &[(f64, f64)]) -> Array2<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array2::<f64>::zeros((grid.len(), c));
    for (gi, &(fy, fx)) in grid.iter().enumerate() {
        for (y, xx, wt) in bilinear_taps(fy, fx, h, w) {
            if wt == 0.0 {
                continue;
            }
            for ci in 0..c {
                out[[gi, ci]] += wt * x[[y, xx, ci]];
            }
        }
    }
    out
}

pub fn roi_sample_backward(
    dout: &ArrayView2<f64>,
    grid: &[(f64, f64)],
    h: usize,
    w: usize,
    c: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((h, w, c));
    for (gi, &(fy, fx)) in grid.iter().enumerate() {
        for (y, xx, wt) in bilinear_taps(fy, fx, h, w) {
            if wt == 0.0 {
                continue;
            }
            for ci in 0..c {
                dx[[y, xx, ci]] += wt * dout[[gi, ci]];
            }
        }
    }
    dx
}
