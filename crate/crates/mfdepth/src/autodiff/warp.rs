//! Depth-and-pose-differentiable reprojection sampling and the backward pass
//! of the SO(3) exponential map.

use ndarray::{Array1, Array2, Array3};

use crate::geometry::se3::{self, Mat3, Vec3};
use crate::geometry::{CameraIntrinsics, Z_MIN};

/// Forward reprojection: sample `src` at coordinates induced by per-pixel
/// `depth` under the pose (rot, trans). Matches the pure geometry path.
pub fn reproject_forward(
    src: &Array3<f64>,
    depth: &Array2<f64>,
    rot: &Array2<f64>,
    trans: &Array1<f64>,
    k_t: &CameraIntrinsics,
    k_r: &CameraIntrinsics,
) -> (Array3<f64>, Array2<bool>) {
    let r = mat3_of(rot);
    let t = vec3_of(trans);
    let (u, v, _z, zvalid) =
        crate::geometry::reproject_coords(depth, None, k_t, k_r, &r, &t);
    crate::geometry::bilinear_gather(src, &u, &v, &zvalid)
}

pub struct ReprojectNeeds {
    pub src: bool,
    pub depth: bool,
    pub rot: bool,
    pub trans: bool,
}

pub struct ReprojectGrads {
    pub src: Option<Array3<f64>>,
    pub depth: Option<Array2<f64>>,
    pub rot: Option<Array2<f64>>,
    pub trans: Option<Array1<f64>>,
}

pub fn reproject_backward(
    src: &Array3<f64>,
    depth: &Array2<f64>,
    rot: &Array2<f64>,
    trans: &Array1<f64>,
    k_t: &CameraIntrinsics,
    k_r: &CameraIntrinsics,
    gout: &Array3<f64>,
    need: ReprojectNeeds,
) -> ReprojectGrads {
    let rmat = mat3_of(rot);
    let tvec = vec3_of(trans);
    let (ch, sh, sw) = src.dim();
    let (h, w) = depth.dim();

    let mut g_src = need.src.then(|| Array3::zeros((ch, sh, sw)));
    let mut g_depth = need.depth.then(|| Array2::zeros((h, w)));
    let mut g_rot = need.rot.then(|| Array2::zeros((3, 3)));
    let mut g_trans = need.trans.then(|| Array1::zeros(3));
    let need_coords = need.depth || need.rot || need.trans;

    for r in 0..h {
        for c in 0..w {
            let d = depth[(r, c)];
            let ray = [
                (c as f64 - k_t.cx) / k_t.fx,
                (r as f64 - k_t.cy) / k_t.fy,
                1.0,
            ];
            let rr = se3::mat_vec(&rmat, &ray);
            let x = d * rr[0] + tvec[0];
            let y = d * rr[1] + tvec[1];
            let z = d * rr[2] + tvec[2];
            if z < Z_MIN {
                continue;
            }
            let su = k_r.fx * x / z + k_r.cx;
            let sv = k_r.fy * y / z + k_r.cy;

            let (u0, a) = crate::geometry::split_coord(su);
            let (v0, b) = crate::geometry::split_coord(sv);

            let inb = |vy: i64, ux: i64| vy >= 0 && ux >= 0 && vy < sh as i64 && ux < sw as i64;

            let mut gs_du = 0.0;
            let mut gs_dv = 0.0;
            for ci in 0..ch {
                let g = gout[(ci, r, c)];
                if g == 0.0 {
                    continue;
                }
                let fetch = |vy: i64, ux: i64| -> f64 {
                    if inb(vy, ux) {
                        src[(ci, vy as usize, ux as usize)]
                    } else {
                        0.0
                    }
                };
                let p00 = fetch(v0, u0);
                let p01 = fetch(v0, u0 + 1);
                let p10 = fetch(v0 + 1, u0);
                let p11 = fetch(v0 + 1, u0 + 1);
                if let Some(gs) = g_src.as_mut() {
                    let mut scatter = |vy: i64, ux: i64, wgt: f64| {
                        if inb(vy, ux) {
                            gs[(ci, vy as usize, ux as usize)] += g * wgt;
                        }
                    };
                    scatter(v0, u0, (1.0 - a) * (1.0 - b));
                    scatter(v0, u0 + 1, a * (1.0 - b));
                    scatter(v0 + 1, u0, (1.0 - a) * b);
                    scatter(v0 + 1, u0 + 1, a * b);
                }
                if need_coords {
                    gs_du += g * ((1.0 - b) * (p01 - p00) + b * (p11 - p10));
                    gs_dv += g * ((1.0 - a) * (p10 - p00) + a * (p11 - p01));
                }
            }

            if need_coords && (gs_du != 0.0 || gs_dv != 0.0) {
                // du/dX = [fx/z, 0, -fx x / z^2], dv/dX = [0, fy/z, -fy y / z^2].
                let gx_vec = [
                    gs_du * k_r.fx / z,
                    gs_dv * k_r.fy / z,
                    -(gs_du * k_r.fx * x + gs_dv * k_r.fy * y) / (z * z),
                ];
                if let Some(gd) = g_depth.as_mut() {
                    gd[(r, c)] += gx_vec[0] * rr[0] + gx_vec[1] * rr[1] + gx_vec[2] * rr[2];
                }
                if let Some(gt) = g_trans.as_mut() {
                    gt[0] += gx_vec[0];
                    gt[1] += gx_vec[1];
                    gt[2] += gx_vec[2];
                }
                if let Some(gr) = g_rot.as_mut() {
                    for i in 0..3 {
                        for j in 0..3 {
                            gr[(i, j)] += gx_vec[i] * d * ray[j];
                        }
                    }
                }
            }
        }
    }

    ReprojectGrads {
        src: g_src,
        depth: g_depth,
        rot: g_rot,
        trans: g_trans,
    }
}

/// Pull a loss gradient on R = exp([w]x) back to the axis-angle vector.
pub fn rotation_exp_backward(w: &Vec3, gout: &Array2<f64>) -> Vec3 {
    let theta2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let theta = theta2.sqrt();
    // a = sin(t)/t, b = (1-cos(t))/t^2 and their derivatives over theta,
    // with series expansions below the switch point.
    let (a, b, da_over_t, db_over_t) = if theta < 1e-4 {
        (
            1.0 - theta2 / 6.0,
            0.5 - theta2 / 24.0,
            -1.0 / 3.0 + theta2 / 30.0,
            -1.0 / 12.0 + theta2 / 180.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (1.0 - c) / theta2;
        let da = (theta * c - s) / theta2;
        let db = (theta * s - 2.0 * (1.0 - c)) / (theta2 * theta);
        (a, b, da / theta, db / theta)
    };
    let wx = se3::skew(w);
    let wx2 = se3::mat_mul(&wx, &wx);
    let mut grad = [0.0; 3];
    for k in 0..3 {
        let mut e = [0.0; 3];
        e[k] = 1.0;
        let ek = se3::skew(&e);
        let ek_wx = se3::mat_mul(&ek, &wx);
        let wx_ek = se3::mat_mul(&wx, &ek);
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dr = da_over_t * w[k] * wx[i][j]
                    + a * ek[i][j]
                    + db_over_t * w[k] * wx2[i][j]
                    + b * (ek_wx[i][j] + wx_ek[i][j]);
                acc += gout[(i, j)] * dr;
            }
        }
        grad[k] = acc;
    }
    grad
}

fn mat3_of(m: &Array2<f64>) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[(i, j)];
        }
    }
    out
}

fn vec3_of(v: &Array1<f64>) -> Vec3 {
    [v[0], v[1], v[2]]
}
