//! Differentiable camera geometry: projection, backward warping, forward
//! splatting, static-flow computation, flow decomposition, motion masking,
//! and pseudo-static frame synthesis.
//!
//! All operations are pure functions. Pixel convention: integer coordinates
//! at pixel centers, origin top-left, `u` = column, `v` = row.

pub mod se3;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
pub use se3::{Mat3, RigidTransform, Vec3};

/// Points with z below this are treated as behind the camera.
pub const Z_MIN: f64 = 1e-9;

/// Pinhole projection parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::param("intrinsics", format!("fx={fx}, fy={fy} must be > 0")));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::param(
                "intrinsics",
                format!("principal point ({cx}, {cy}) outside {width}x{height}"),
            ));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }

    /// Rescale to a lower resolution by an integer stride, keeping pixel
    /// centers aligned (half-pixel convention).
    pub fn at_stride(&self, stride: usize) -> Result<Self> {
        if stride == 0 || self.width % stride != 0 || self.height % stride != 0 {
            return Err(Error::param(
                "stride",
                format!("{}x{} not divisible by {stride}", self.width, self.height),
            ));
        }
        let s = 1.0 / stride as f64;
        CameraIntrinsics::new(
            self.fx * s,
            self.fy * s,
            (self.cx + 0.5) * s - 0.5,
            (self.cy + 0.5) * s - 0.5,
            self.width / stride,
            self.height / stride,
        )
    }
}

/// Per-pixel metric depth with a validity channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub values: Array2<f64>,
    pub validity: Array2<bool>,
}

impl DepthMap {
    /// Every valid entry must be finite and strictly positive.
    pub fn new(values: Array2<f64>, validity: Array2<bool>) -> Result<Self> {
        if values.dim() != validity.dim() {
            return Err(Error::dim(
                "DepthMap",
                format!("{:?}", values.dim()),
                format!("{:?}", validity.dim()),
            ));
        }
        for (d, &ok) in values.iter().zip(validity.iter()) {
            if ok && !(d.is_finite() && *d > 0.0) {
                return Err(Error::InvalidDepth(format!("valid entry {d} not finite positive")));
            }
        }
        Ok(DepthMap { values, validity })
    }

    pub fn all_valid(values: Array2<f64>) -> Result<Self> {
        let validity = Array2::from_elem(values.dim(), true);
        DepthMap::new(values, validity)
    }

    pub fn constant(depth: f64, height: usize, width: usize) -> Result<Self> {
        DepthMap::all_valid(Array2::from_elem((height, width), depth))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Dense 2D pixel displacement field.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub du: Array2<f64>,
    pub dv: Array2<f64>,
}

impl FlowField {
    pub fn new(du: Array2<f64>, dv: Array2<f64>) -> Result<Self> {
        if du.dim() != dv.dim() {
            return Err(Error::dim(
                "FlowField",
                format!("{:?}", du.dim()),
                format!("{:?}", dv.dim()),
            ));
        }
        if du.iter().chain(dv.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { term: "flow".into() });
        }
        Ok(FlowField { du, dv })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            du: Array2::zeros((height, width)),
            dv: Array2::zeros((height, width)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.du.dim()
    }
}

/// Boolean motion segmentation (true = moving).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMask {
    pub mask: Array2<bool>,
}

impl MotionMask {
    pub fn all_false(height: usize, width: usize) -> Self {
        MotionMask { mask: Array2::from_elem((height, width), false) }
    }

    pub fn count_true(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Pixel coordinate grid: `u[r][c] = c`, `v[r][c] = r`.
#[derive(Debug, Clone)]
pub struct PixelGrid {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize) -> Self {
        let u = Array2::from_shape_fn((height, width), |(_, c)| c as f64);
        let v = Array2::from_shape_fn((height, width), |(r, _)| r as f64);
        PixelGrid { u, v }
    }
}

/// RGB or feature image stored channel-first (C, H, W).
pub type ImageBuf = Array3<f64>;

fn check_image_shape(context: &'static str, img: &ImageBuf, h: usize, w: usize) -> Result<()> {
    let (_, ih, iw) = img.dim();
    if ih != h || iw != w {
        return Err(Error::dim(context, format!("{h}x{w}"), format!("{ih}x{iw}")));
    }
    Ok(())
}

/// Lift valid pixels to 3D camera-frame points. Returns a (3, H, W) array
/// whose z channel equals the depth at valid pixels, plus the validity mask.
pub fn backproject(depth: &DepthMap, k: &CameraIntrinsics) -> Result<(Array3<f64>, Array2<bool>)> {
    let (h, w) = depth.shape();
    let mut points = Array3::zeros((3, h, w));
    for r in 0..h {
        for c in 0..w {
            if !depth.validity[(r, c)] {
                continue;
            }
            let d = depth.values[(r, c)];
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidDepth(format!("depth {d} at ({r}, {c})")));
            }
            points[(0, r, c)] = d * (c as f64 - k.cx) / k.fx;
            points[(1, r, c)] = d * (r as f64 - k.cy) / k.fy;
            points[(2, r, c)] = d;
        }
    }
    Ok((points, depth.validity.clone()))
}

/// Project camera-frame points to pixels. Points with z <= 0 are marked
/// invalid in the output validity channel rather than raising.
pub fn project(
    points: &Array3<f64>,
    k: &CameraIntrinsics,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<bool>) {
    let (_, h, w) = points.dim();
    let mut u = Array2::zeros((h, w));
    let mut v = Array2::zeros((h, w));
    let mut z = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for r in 0..h {
        for c in 0..w {
            let pz = points[(2, r, c)];
            if pz < Z_MIN {
                continue;
            }
            u[(r, c)] = k.fx * points[(0, r, c)] / pz + k.cx;
            v[(r, c)] = k.fy * points[(1, r, c)] / pz + k.cy;
            z[(r, c)] = pz;
            valid[(r, c)] = true;
        }
    }
    (u, v, z, valid)
}

/// Apply a rigid transform to a (3, H, W) point array.
pub fn transform_points(points: &Array3<f64>, t: &RigidTransform) -> Array3<f64> {
    let (_, h, w) = points.dim();
    let mut out = Array3::zeros((3, h, w));
    for r in 0..h {
        for c in 0..w {
            let p = [points[(0, r, c)], points[(1, r, c)], points[(2, r, c)]];
            let q = t.apply(&p);
            out[(0, r, c)] = q[0];
            out[(1, r, c)] = q[1];
            out[(2, r, c)] = q[2];
        }
    }
    out
}

/// Reference-frame sampling coordinates induced by per-pixel target depth.
///
/// For each target pixel p: X = depth * (R * K_t^{-1} p) + t, then projected
/// through K_r. Returns (u, v, z, valid) where invalid means invalid depth or
/// transformed z <= 0.
pub(crate) fn reproject_coords(
    depth_values: &Array2<f64>,
    depth_validity: Option<&Array2<bool>>,
    k_t: &CameraIntrinsics,
    k_r: &CameraIntrinsics,
    rot: &Mat3,
    trans: &Vec3,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<bool>) {
    let (h, w) = depth_values.dim();
    let mut u = Array2::zeros((h, w));
    let mut v = Array2::zeros((h, w));
    let mut z = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for r in 0..h {
        for c in 0..w {
            if let Some(val) = depth_validity {
                if !val[(r, c)] {
                    continue;
                }
            }
            let d = depth_values[(r, c)];
            // Ray through the pixel center: K_t^{-1} [u, v, 1].
            let ray = [
                (c as f64 - k_t.cx) / k_t.fx,
                (r as f64 - k_t.cy) / k_t.fy,
                1.0,
            ];
            let rr = se3::mat_vec(rot, &ray);
            let x = d * rr[0] + trans[0];
            let y = d * rr[1] + trans[1];
            let zz = d * rr[2] + trans[2];
            if zz < Z_MIN {
                continue;
            }
            u[(r, c)] = k_r.fx * x / zz + k_r.cx;
            v[(r, c)] = k_r.fy * y / zz + k_r.cy;
            z[(r, c)] = zz;
            valid[(r, c)] = true;
        }
    }
    (u, v, z, valid)
}

/// Fractional parts within this distance of an integer snap to it, keeping
/// grid-aligned warps exact under floating-point roundoff.
pub(crate) const COORD_SNAP: f64 = 1e-9;

/// Split a sampling coordinate into base index and snapped fractional part.
pub(crate) fn split_coord(x: f64) -> (i64, f64) {
    let x0 = x.floor();
    let a = x - x0;
    if a < COORD_SNAP {
        (x0 as i64, 0.0)
    } else if a > 1.0 - COORD_SNAP {
        (x0 as i64 + 1, 0.0)
    } else {
        (x0 as i64, a)
    }
}

/// Bilinear gather with zero padding outside bounds. A sample is valid when
/// its location lies within [0, W-1] x [0, H-1] and `coord_valid` holds.
pub(crate) fn bilinear_gather(
    src: &Array3<f64>,
    u: &Array2<f64>,
    v: &Array2<f64>,
    coord_valid: &Array2<bool>,
) -> (Array3<f64>, Array2<bool>) {
    let (ch, sh, sw) = src.dim();
    let (h, w) = u.dim();
    let mut out = Array3::zeros((ch, h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for r in 0..h {
        for c in 0..w {
            if !coord_valid[(r, c)] {
                continue;
            }
            let (su, sv) = (u[(r, c)], v[(r, c)]);
            valid[(r, c)] = su >= -COORD_SNAP
                && su <= (sw - 1) as f64 + COORD_SNAP
                && sv >= -COORD_SNAP
                && sv <= (sh - 1) as f64 + COORD_SNAP;
            let (u0, a) = split_coord(su);
            let (v0, b) = split_coord(sv);
            let fetch = |ci: usize, vy: i64, ux: i64| -> f64 {
                if vy < 0 || ux < 0 || vy >= sh as i64 || ux >= sw as i64 {
                    0.0
                } else {
                    src[(ci, vy as usize, ux as usize)]
                }
            };
            for ci in 0..ch {
                let p00 = fetch(ci, v0, u0);
                let p01 = fetch(ci, v0, u0 + 1);
                let p10 = fetch(ci, v0 + 1, u0);
                let p11 = fetch(ci, v0 + 1, u0 + 1);
                out[(ci, r, c)] = (1.0 - a) * (1.0 - b) * p00
                    + a * (1.0 - b) * p01
                    + (1.0 - a) * b * p10
                    + a * b * p11;
            }
        }
    }
    (out, valid)
}

/// Reconstruct the target view by sampling the reference image at the
/// locations induced by target depth and relative pose (phi in the
/// two-frame reconstruction). Differentiability w.r.t. depth, pose and
/// image values is provided by the autodiff mirror of this op.
pub fn warp_backward(
    reference: &ImageBuf,
    depth_t: &DepthMap,
    k_t: &CameraIntrinsics,
    k_r: &CameraIntrinsics,
    t_rt: &RigidTransform,
) -> Result<(ImageBuf, Array2<bool>)> {
    let (h, w) = depth_t.shape();
    check_image_shape("warp_backward reference", reference, k_r.height, k_r.width)?;
    if h != k_t.height || w != k_t.width {
        return Err(Error::dim(
            "warp_backward depth",
            format!("{}x{}", k_t.height, k_t.width),
            format!("{h}x{w}"),
        ));
    }
    let (u, v, _z, zvalid) = reproject_coords(
        &depth_t.values,
        Some(&depth_t.validity),
        k_t,
        k_r,
        &t_rt.rotation,
        &t_rt.translation,
    );
    let (out, svalid) = bilinear_gather(reference, &u, &v, &zvalid);
    Ok((out, svalid))
}

/// Depth-based (static) flow of Eq-style closed form: the displacement each
/// pixel would undergo under camera motion alone, with the reference-frame
/// depth realized as the z component of the rigidly transformed point.
pub fn compute_static_flow(
    depth_c: &DepthMap,
    k_t: &CameraIntrinsics,
    k_r: &CameraIntrinsics,
    t_rt: &RigidTransform,
) -> Result<(FlowField, Array2<bool>)> {
    let (h, w) = depth_c.shape();
    let mut du = Array2::zeros((h, w));
    let mut dv = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    let rot = &t_rt.rotation;
    let t = &t_rt.translation;
    for r in 0..h {
        for c in 0..w {
            if !depth_c.validity[(r, c)] {
                continue;
            }
            let d = depth_c.values[(r, c)];
            let ray = [
                (c as f64 - k_t.cx) / k_t.fx,
                (r as f64 - k_t.cy) / k_t.fy,
                1.0,
            ];
            // (1 / D_r) K_r (R K_t^{-1} D p_t + t) - p_t with D_r = z'.
            let rr = se3::mat_vec(rot, &ray);
            let x = d * rr[0] + t[0];
            let y = d * rr[1] + t[1];
            let z = d * rr[2] + t[2];
            if z < Z_MIN {
                continue;
            }
            du[(r, c)] = k_r.fx * x / z + k_r.cx - c as f64;
            dv[(r, c)] = k_r.fy * y / z + k_r.cy - r as f64;
            valid[(r, c)] = true;
        }
    }
    Ok((FlowField::new(du, dv)?, valid))
}

/// Dynamic flow residual f^d = f - f'.
pub fn decompose_flow(flow: &FlowField, static_flow: &FlowField) -> Result<FlowField> {
    if flow.shape() != static_flow.shape() {
        return Err(Error::dim(
            "decompose_flow",
            format!("{:?}", flow.shape()),
            format!("{:?}", static_flow.shape()),
        ));
    }
    FlowField::new(&flow.du - &static_flow.du, &flow.dv - &static_flow.dv)
}

/// Threshold the squared static/true flow discrepancy: ||f - f'||^2 > eps.
pub fn compute_motion_mask(
    flow: &FlowField,
    static_flow: &FlowField,
    epsilon: f64,
) -> Result<MotionMask> {
    if epsilon <= 0.0 {
        return Err(Error::param("epsilon", format!("{epsilon} must be > 0")));
    }
    let residual = decompose_flow(flow, static_flow)?;
    let mask = Array2::from_shape_fn(flow.shape(), |idx| {
        let du = residual.du[idx];
        let dv = residual.dv[idx];
        du * du + dv * dv > epsilon
    });
    Ok(MotionMask { mask })
}

/// Push each true target pixel through the flow to its nearest reference
/// pixel. Out-of-bounds mappings are dropped.
pub fn propagate_mask(mask_t: &MotionMask, flow: &FlowField) -> MotionMask {
    let (h, w) = mask_t.mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for r in 0..h {
        for c in 0..w {
            if !mask_t.mask[(r, c)] {
                continue;
            }
            let u = (c as f64 + flow.du[(r, c)]).round();
            let v = (r as f64 + flow.dv[(r, c)]).round();
            if u >= 0.0 && v >= 0.0 && (u as usize) < w && (v as usize) < h {
                out[(v as usize, u as usize)] = true;
            }
        }
    }
    MotionMask { mask: out }
}

/// Forward-splat the target image into the reference view (phi'), resolving
/// collisions by keeping the smallest projected depth. Behind-camera pixels
/// are dropped; uncovered pixels are flagged in the coverage mask.
pub fn forward_splat(
    target: &ImageBuf,
    depth_t: &DepthMap,
    k_t: &CameraIntrinsics,
    k_r: &CameraIntrinsics,
    t_rt: &RigidTransform,
) -> (ImageBuf, Array2<bool>) {
    let (ch, _, _) = target.dim();
    let (hr, wr) = (k_r.height, k_r.width);
    let (u, v, z, valid) = reproject_coords(
        &depth_t.values,
        Some(&depth_t.validity),
        k_t,
        k_r,
        &t_rt.rotation,
        &t_rt.translation,
    );
    let mut out = Array3::zeros((ch, hr, wr));
    let mut zbuf = Array2::from_elem((hr, wr), f64::INFINITY);
    let (h, w) = depth_t.shape();
    for r in 0..h {
        for c in 0..w {
            if !valid[(r, c)] {
                continue;
            }
            let tu = u[(r, c)].round();
            let tv = v[(r, c)].round();
            if tu < 0.0 || tv < 0.0 || tu as usize >= wr || tv as usize >= hr {
                continue;
            }
            let (tu, tv) = (tu as usize, tv as usize);
            if z[(r, c)] < zbuf[(tv, tu)] {
                zbuf[(tv, tu)] = z[(r, c)];
                for ci in 0..ch {
                    out[(ci, tv, tu)] = target[(ci, r, c)];
                }
            }
        }
    }
    let coverage = zbuf.mapv(|d| d.is_finite());
    (out, coverage)
}

/// Pseudo-static reference frame: keep the reference outside the motion
/// mask, substitute forward-splatted target content inside it, and fall
/// back to the reference where the splat left no coverage.
pub fn build_pseudo_static_frame(
    i_r: &ImageBuf,
    i_t: &ImageBuf,
    depth_t: &DepthMap,
    mask_r: &MotionMask,
    k_t: &CameraIntrinsics,
    k_r: &CameraIntrinsics,
    t_rt: &RigidTransform,
) -> Result<ImageBuf> {
    if i_r.dim() != i_t.dim() {
        return Err(Error::dim(
            "build_pseudo_static_frame",
            format!("{:?}", i_r.dim()),
            format!("{:?}", i_t.dim()),
        ));
    }
    check_image_shape("build_pseudo_static_frame mask", i_r, mask_r.mask.dim().0, mask_r.mask.dim().1)?;
    let (splat, coverage) = forward_splat(i_t, depth_t, k_t, k_r, t_rt);
    let (ch, h, w) = i_r.dim();
    let mut out = i_r.clone();
    for r in 0..h {
        for c in 0..w {
            if mask_r.mask[(r, c)] && coverage[(r, c)] {
                for ci in 0..ch {
                    out[(ci, r, c)] = splat[(ci, r, c)];
                }
            }
        }
    }
    Ok(out)
}

/// Batched variants: every operation maps over a leading batch dimension
/// represented as a slice of per-sample inputs. Inputs are immutable and the
/// operations are pure, so samples are processed in parallel.
pub mod batched {
    use super::*;
    use rayon::prelude::*;

    pub fn warp_backward(
        items: &[(&ImageBuf, &DepthMap, &CameraIntrinsics, &CameraIntrinsics, &RigidTransform)],
    ) -> Result<Vec<(ImageBuf, Array2<bool>)>> {
        items
            .par_iter()
            .map(|(img, d, kt, kr, t)| super::warp_backward(img, d, kt, kr, t))
            .collect()
    }

    pub fn compute_static_flow(
        items: &[(&DepthMap, &CameraIntrinsics, &CameraIntrinsics, &RigidTransform)],
    ) -> Result<Vec<(FlowField, Array2<bool>)>> {
        items
            .par_iter()
            .map(|(d, kt, kr, t)| super::compute_static_flow(d, kt, kr, t))
            .collect()
    }

    pub fn compute_motion_mask(
        items: &[(&FlowField, &FlowField, f64)],
    ) -> Result<Vec<MotionMask>> {
        items
            .par_iter()
            .map(|(f, fs, eps)| super::compute_motion_mask(f, fs, *eps))
            .collect()
    }
}
