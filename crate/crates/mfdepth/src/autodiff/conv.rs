//! Convolution and resampling kernels. Dense conv goes through im2col and a
//! GEMM so both directions ride on the threaded matrix multiply.

use ndarray::{Array2, Array3, Array4};

pub fn conv_out_size(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// (C, H, W) -> (C*k*k, Ho*Wo) patch matrix with zero padding.
pub fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = conv_out_size(h, w, k, stride, pad);
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ci * k * k + ky * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        cols[(row, oy * wo + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter patch-matrix gradients back to the image.
pub fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (ho, wo) = conv_out_size(h, w, k, stride, pad);
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ci * k * k + ky * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += cols[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    x
}

pub fn conv2d_forward(x: &Array3<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array3<f64> {
    let (ci, h, wd) = x.dim();
    let (co, ci_w, k, k2) = w.dim();
    assert_eq!(ci, ci_w, "conv2d input channels");
    assert_eq!(k, k2, "conv2d square kernel");
    let (ho, wo) = conv_out_size(h, wd, k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let w_mat = w
        .view()
        .into_shape_with_order((co, ci * k * k))
        .unwrap()
        .to_owned();
    let y = w_mat.dot(&cols);
    y.into_shape_with_order((co, ho, wo)).unwrap()
}

pub fn conv2d_backward(
    x: &Array3<f64>,
    w: &Array4<f64>,
    gout: &Array3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array4<f64>) {
    let (ci, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let (go_c, ho, wo) = gout.dim();
    assert_eq!(go_c, co);
    let g_mat = gout
        .view()
        .into_shape_with_order((co, ho * wo))
        .unwrap()
        .to_owned();
    let cols = im2col(x, k, stride, pad);
    let gw_mat = g_mat.dot(&cols.t());
    let gw = gw_mat.into_shape_with_order((co, ci, k, k)).unwrap();
    let w_mat = w
        .view()
        .into_shape_with_order((co, ci * k * k))
        .unwrap()
        .to_owned();
    let gcols = w_mat.t().dot(&g_mat);
    let gx = col2im(&gcols, ci, h, wd, k, stride, pad);
    (gx, gw)
}

/// Depthwise 3x3, stride 1, zero padding 1; weight laid out (C, 3, 3).
pub fn dwconv3x3_forward(x: &Array3<f64>, w: &Array3<f64>) -> Array3<f64> {
    let (c, h, wd) = x.dim();
    assert_eq!(w.dim(), (c, 3, 3), "dwconv weight shape");
    let mut out = Array3::zeros((c, h, wd));
    for ci in 0..c {
        for r in 0..h {
            for cc in 0..wd {
                let mut acc = 0.0;
                for ky in 0..3usize {
                    let iy = r as i64 + ky as i64 - 1;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = cc as i64 + kx as i64 - 1;
                        if ix < 0 || ix >= wd as i64 {
                            continue;
                        }
                        acc += x[(ci, iy as usize, ix as usize)] * w[(ci, ky, kx)];
                    }
                }
                out[(ci, r, cc)] = acc;
            }
        }
    }
    out
}

pub fn dwconv3x3_backward(
    x: &Array3<f64>,
    w: &Array3<f64>,
    gout: &Array3<f64>,
) -> (Array3<f64>, Array3<f64>) {
    let (c, h, wd) = x.dim();
    let mut gx = Array3::zeros((c, h, wd));
    let mut gw = Array3::zeros((c, 3, 3));
    for ci in 0..c {
        for r in 0..h {
            for cc in 0..wd {
                let g = gout[(ci, r, cc)];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..3usize {
                    let iy = r as i64 + ky as i64 - 1;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = cc as i64 + kx as i64 - 1;
                        if ix < 0 || ix >= wd as i64 {
                            continue;
                        }
                        gx[(ci, iy as usize, ix as usize)] += g * w[(ci, ky, kx)];
                        gw[(ci, ky, kx)] += g * x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Bilinear x2 upsampling, half-pixel convention, clamped borders.
pub fn upsample2_forward(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (h2, w2) = (h * 2, w * 2);
    let mut out = Array3::zeros((c, h2, w2));
    for r in 0..h2 {
        let (v0, v1, bw) = lerp_index(r, h);
        for cc in 0..w2 {
            let (u0, u1, aw) = lerp_index(cc, w);
            for ci in 0..c {
                out[(ci, r, cc)] = (1.0 - bw) * (1.0 - aw) * x[(ci, v0, u0)]
                    + (1.0 - bw) * aw * x[(ci, v0, u1)]
                    + bw * (1.0 - aw) * x[(ci, v1, u0)]
                    + bw * aw * x[(ci, v1, u1)];
            }
        }
    }
    out
}

pub fn upsample2_backward(gout: &Array3<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let (_, h2, w2) = gout.dim();
    let mut gx = Array3::zeros((c, h, w));
    for r in 0..h2 {
        let (v0, v1, bw) = lerp_index(r, h);
        for cc in 0..w2 {
            let (u0, u1, aw) = lerp_index(cc, w);
            for ci in 0..c {
                let g = gout[(ci, r, cc)];
                gx[(ci, v0, u0)] += (1.0 - bw) * (1.0 - aw) * g;
                gx[(ci, v0, u1)] += (1.0 - bw) * aw * g;
                gx[(ci, v1, u0)] += bw * (1.0 - aw) * g;
                gx[(ci, v1, u1)] += bw * aw * g;
            }
        }
    }
    gx
}

/// Source indices and interpolation weight for output index `o` at factor 2.
fn lerp_index(o: usize, n: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) / 2.0 - 0.5;
    let s = s.clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}
