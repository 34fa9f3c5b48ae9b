//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Graph`] owns a tape of eagerly evaluated nodes. Operations push a node
//! and return a [`Var`] handle; [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients for every node that requires them. The op set is
//! exactly what the depth pipeline needs: elementwise math, dense and
//! depthwise convolution, pooling and resampling, channel concatenation,
//! softmax attention, the SO(3) exponential, and depth-and-pose-differentiable
//! image reprojection.

pub mod conv;
pub mod optim;
pub mod warp;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

use crate::geometry::CameraIntrinsics;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Abs(Var),
    Exp(Var),
    Recip(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    Sigmoid(Var),
    Relu(Var),
    ClampUnit(Var),
    Affine(Var, f64, f64),
    MulBroadcast(Var, Var),
    DivBroadcast(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    DwConv3x3 {
        x: Var,
        w: Var,
    },
    AvgPool2(Var),
    AvgPool3Same(Var),
    GlobalAvgPool(Var),
    Upsample2(Var),
    ConcatC(Vec<Var>),
    SoftmaxRows(Var),
    MeanAll(Var),
    SumAll(Var),
    MeanC(Var),
    Reshape(Var),
    TransposeMat(Var),
    RotationExp(Var),
    Reproject {
        src: Var,
        depth: Var,
        rot: Var,
        trans: Var,
        k_t: CameraIntrinsics,
        k_r: CameraIntrinsics,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
    validity: Option<ndarray::Array2<bool>>,
}

/// Gradients keyed by tape position, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true, None)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0].value;
        debug_assert_eq!(n.len(), 1);
        n.iter().next().copied().unwrap()
    }

    /// Validity mask attached to a reprojection node.
    pub fn validity(&self, v: Var) -> Option<&ndarray::Array2<bool>> {
        self.nodes[v.0].validity.as_ref()
    }

    fn push(
        &mut self,
        value: ArrayD<f64>,
        op: Op,
        requires_grad: bool,
        validity: Option<ndarray::Array2<bool>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            validity,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> ArrayViewD<'_, f64> {
        self.nodes[v.0].value.view()
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "add shape");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "sub shape");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "mul shape");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg, None)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "div shape");
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg, None)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| -x);
        let rg = self.rg(a);
        self.push(value, Op::Neg(a), rg, None)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg, None)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg, None)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let rg = self.rg(a);
        self.push(value, Op::Recip(a), rg, None)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(value, Op::Sqrt(a), rg, None)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::sin);
        let rg = self.rg(a);
        self.push(value, Op::Sin(a), rg, None)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::cos);
        let rg = self.rg(a);
        self.push(value, Op::Cos(a), rg, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(stable_sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg, None)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg, None)
    }

    pub fn clamp_unit(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.clamp(0.0, 1.0));
        let rg = self.rg(a);
        self.push(value, Op::ClampUnit(a), rg, None)
    }

    /// `scale * x + offset`
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| scale * x + offset);
        let rg = self.rg(a);
        self.push(value, Op::Affine(a, scale, offset), rg, None)
    }

    /// Multiply by a single-element tensor.
    pub fn mul_broadcast(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.val(s).len(), 1, "mul_broadcast scalar");
        let sv = self.scalar(s);
        let value = self.nodes[x.0].value.mapv(|v| v * sv);
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::MulBroadcast(x, s), rg, None)
    }

    /// Divide by a single-element tensor.
    pub fn div_broadcast(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.val(s).len(), 1, "div_broadcast scalar");
        let sv = self.scalar(s);
        let value = self.nodes[x.0].value.mapv(|v| v / sv);
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::DivBroadcast(x, s), rg, None)
    }

    /// Add a per-channel bias vector to a (C, H, W) tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.val(x).into_dimensionality::<Ix3>().unwrap().to_owned();
        let bv = self.val(b).into_dimensionality::<Ix1>().unwrap().to_owned();
        assert_eq!(xv.dim().0, bv.len(), "add_bias channels");
        let mut out = xv;
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            plane += bv[c];
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out.into_dyn(), Op::AddBias(x, b), rg, None)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.val(a).into_dimensionality::<Ix2>().unwrap().to_owned();
        let bv = self.val(b).into_dimensionality::<Ix2>().unwrap().to_owned();
        assert_eq!(av.dim().1, bv.dim().0, "matmul inner dim");
        let value = av.dot(&bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg, None)
    }

    pub fn transpose_mat(&mut self, a: Var) -> Var {
        let av = self.val(a).into_dimensionality::<Ix2>().unwrap().to_owned();
        let value = av.t().to_owned().into_dyn();
        let rg = self.rg(a);
        self.push(value, Op::TransposeMat(a), rg, None)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let av = self.nodes[a.0].value.clone();
        assert_eq!(av.len(), shape.iter().product::<usize>(), "reshape size");
        let value = av
            .into_shape_with_order(IxDyn(shape))
            .expect("contiguous reshape");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg, None)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.val(a).into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut out = av;
        for mut row in out.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let rg = self.rg(a);
        self.push(out.into_dyn(), Op::SoftmaxRows(a), rg, None)
    }

    // ----- convolution and resampling -----

    /// Dense 2D convolution; x: (Ci, H, W), w: (Co, Ci, k, k).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = self.val(x).into_dimensionality::<Ix3>().unwrap().to_owned();
        let wv = self.val(w).into_dimensionality::<Ix4>().unwrap().to_owned();
        let value = conv::conv2d_forward(&xv, &wv, stride, pad).into_dyn();
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::Conv2d { x, w, stride, pad }, rg, None)
    }

    /// Depthwise 3x3 convolution, stride 1, zero padding 1; w: (C, 3, 3).
    pub fn dwconv3x3(&mut self, x: Var, w: Var) -> Var {
        let xv = self.val(x).into_dimensionality::<Ix3>().unwrap().to_owned();
        let wv = self.val(w).into_dimensionality::<Ix3>().unwrap().to_owned();
        let value = conv::dwconv3x3_forward(&xv, &wv).into_dyn();
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::DwConv3x3 { x, w }, rg, None)
    }

    /// 2x2 average pooling with stride 2; even spatial dims required.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let x = self.val(a).into_dimensionality::<Ix3>().unwrap().to_owned();
        let (c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let mut out = ndarray::Array3::zeros((c, h / 2, w / 2));
        for ci in 0..c {
            for r in 0..h / 2 {
                for cc in 0..w / 2 {
                    out[(ci, r, cc)] = 0.25
                        * (x[(ci, 2 * r, 2 * cc)]
                            + x[(ci, 2 * r, 2 * cc + 1)]
                            + x[(ci, 2 * r + 1, 2 * cc)]
                            + x[(ci, 2 * r + 1, 2 * cc + 1)]);
                }
            }
        }
        let rg = self.rg(a);
        self.push(out.into_dyn(), Op::AvgPool2(a), rg, None)
    }

    /// 3x3 mean pooling at stride 1 with inclusive window counts at borders.
    pub fn avg_pool3_same(&mut self, a: Var) -> Var {
        let x = self.val(a).into_dimensionality::<Ix3>().unwrap().to_owned();
        let (c, h, w) = x.dim();
        let mut out = ndarray::Array3::zeros((c, h, w));
        for ci in 0..c {
            for r in 0..h {
                for cc in 0..w {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let rr = r as i64 + dr;
                            let cx = cc as i64 + dc;
                            if rr >= 0 && cx >= 0 && rr < h as i64 && cx < w as i64 {
                                sum += x[(ci, rr as usize, cx as usize)];
                                n += 1.0;
                            }
                        }
                    }
                    out[(ci, r, cc)] = sum / n;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out.into_dyn(), Op::AvgPool3Same(a), rg, None)
    }

    /// (C, H, W) -> (C,) spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = self.val(a).into_dimensionality::<Ix3>().unwrap().to_owned();
        let (c, h, w) = x.dim();
        let mut out = ndarray::Array1::zeros(c);
        for ci in 0..c {
            out[ci] = x.index_axis(Axis(0), ci).sum() / (h * w) as f64;
        }
        let rg = self.rg(a);
        self.push(out.into_dyn(), Op::GlobalAvgPool(a), rg, None)
    }

    /// Bilinear x2 upsampling with the half-pixel convention.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = self.val(a).into_dimensionality::<Ix3>().unwrap().to_owned();
        let value = conv::upsample2_forward(&x).into_dyn();
        let rg = self.rg(a);
        self.push(value, Op::Upsample2(a), rg, None)
    }

    /// Concatenate (Ci, H, W) tensors along the channel axis.
    pub fn concat_c(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts
            .iter()
            .map(|p| {
                self.nodes[p.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
            })
            .collect();
        let value = ndarray::concatenate(Axis(0), &views).unwrap().into_dyn();
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatC(parts.to_vec()), rg, None)
    }

    // ----- reductions -----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.mean().unwrap();
        let rg = self.rg(a);
        self.push(
            ndarray::arr1(&[m]).into_dyn(),
            Op::MeanAll(a),
            rg,
            None,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(ndarray::arr1(&[s]).into_dyn(), Op::SumAll(a), rg, None)
    }

    /// (C, H, W) -> (1, H, W) channel mean.
    pub fn mean_c(&mut self, a: Var) -> Var {
        let x = self.val(a).into_dimensionality::<Ix3>().unwrap().to_owned();
        let (c, h, w) = x.dim();
        let mut out = ndarray::Array3::zeros((1, h, w));
        for ci in 0..c {
            for r in 0..h {
                for cc in 0..w {
                    out[(0, r, cc)] += x[(ci, r, cc)];
                }
            }
        }
        out.mapv_inplace(|v| v / c as f64);
        let rg = self.rg(a);
        self.push(out.into_dyn(), Op::MeanC(a), rg, None)
    }

    // ----- geometry -----

    /// SO(3) exponential: (3,) axis-angle -> (3, 3) rotation.
    pub fn rotation_exp(&mut self, a: Var) -> Var {
        let w = self.val(a).into_dimensionality::<Ix1>().unwrap().to_owned();
        let wv = [w[0], w[1], w[2]];
        let r = crate::geometry::se3::rotation_from_axis_angle(&wv);
        let mut value = ndarray::Array2::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                value[(i, j)] = r[i][j];
            }
        }
        let rg = self.rg(a);
        self.push(value.into_dyn(), Op::RotationExp(a), rg, None)
    }

    /// Sample `src` at the coordinates induced by per-pixel `depth` under the
    /// relative pose (`rot`, `trans`), bilinear with zero padding. Gradients
    /// flow to the source image, the depth map, and the pose. The validity
    /// mask is attached to the node.
    pub fn reproject(
        &mut self,
        src: Var,
        depth: Var,
        rot: Var,
        trans: Var,
        k_t: &CameraIntrinsics,
        k_r: &CameraIntrinsics,
    ) -> Var {
        let sv = self.val(src).into_dimensionality::<Ix3>().unwrap().to_owned();
        let dv = self.val(depth).into_dimensionality::<Ix2>().unwrap().to_owned();
        let rv = self.val(rot).into_dimensionality::<Ix2>().unwrap().to_owned();
        let tv = self.val(trans).into_dimensionality::<Ix1>().unwrap().to_owned();
        let (value, validity) = warp::reproject_forward(&sv, &dv, &rv, &tv, k_t, k_r);
        let rg = self.rg(src) || self.rg(depth) || self.rg(rot) || self.rg(trans);
        self.push(
            value.into_dyn(),
            Op::Reproject {
                src,
                depth,
                rot,
                trans,
                k_t: *k_t,
                k_r: *k_r,
            },
            rg,
            Some(validity),
        )
    }

    // ----- backward -----

    /// Gradient of a single-element root w.r.t. every grad-requiring node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(gout) = grads[id].clone() else {
                continue;
            };
            self.backward_step(id, &gout, &mut grads);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_step(&self, id: usize, gout: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        // Clones the op descriptor (cheap: Vars and scalars only).
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, a, gout.clone());
                self.acc(grads, b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, gout.clone());
                self.acc(grads, b, gout.mapv(|g| -g));
            }
            Op::Mul(a, b) => {
                self.acc(grads, a, gout * &self.nodes[b.0].value);
                self.acc(grads, b, gout * &self.nodes[a.0].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                self.acc(grads, a, gout / bv);
                let av = &self.nodes[a.0].value;
                self.acc(grads, b, -(gout * av) / (bv * bv));
            }
            Op::Neg(a) => self.acc(grads, a, gout.mapv(|g| -g)),
            Op::Abs(a) => {
                let sign = self.nodes[a.0].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.acc(grads, a, gout * &sign);
            }
            Op::Exp(a) => self.acc(grads, a, gout * &self.nodes[id].value),
            Op::Recip(a) => {
                let v = &self.nodes[id].value;
                self.acc(grads, a, -(gout * v * v));
            }
            Op::Sqrt(a) => {
                let v = &self.nodes[id].value;
                self.acc(grads, a, 0.5 * gout / v);
            }
            Op::Sin(a) => {
                let cosx = self.nodes[a.0].value.mapv(f64::cos);
                self.acc(grads, a, gout * &cosx);
            }
            Op::Cos(a) => {
                let sinx = self.nodes[a.0].value.mapv(f64::sin);
                self.acc(grads, a, -(gout * &sinx));
            }
            Op::Sigmoid(a) => {
                let v = &self.nodes[id].value;
                self.acc(grads, a, gout * v * &v.mapv(|s| 1.0 - s));
            }
            Op::Relu(a) => {
                let gate = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.acc(grads, a, gout * &gate);
            }
            Op::ClampUnit(a) => {
                let gate = self
                    .nodes[a.0]
                    .value
                    .mapv(|x| if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 });
                self.acc(grads, a, gout * &gate);
            }
            Op::Affine(a, scale, _) => self.acc(grads, a, gout.mapv(|g| g * scale)),
            Op::MulBroadcast(x, s) => {
                let sv = self.scalar(s);
                self.acc(grads, x, gout.mapv(|g| g * sv));
                let gs = (gout * &self.nodes[x.0].value).sum();
                self.acc(grads, s, ndarray::arr1(&[gs]).into_dyn());
            }
            Op::DivBroadcast(x, s) => {
                let sv = self.scalar(s);
                self.acc(grads, x, gout.mapv(|g| g / sv));
                let gs = -(gout * &self.nodes[x.0].value).sum() / (sv * sv);
                self.acc(grads, s, ndarray::arr1(&[gs]).into_dyn());
            }
            Op::AddBias(x, b) => {
                self.acc(grads, x, gout.clone());
                let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
                let c = g3.dim().0;
                let mut gb = ndarray::Array1::zeros(c);
                for ci in 0..c {
                    gb[ci] = g3.index_axis(Axis(0), ci).sum();
                }
                self.acc(grads, b, gb.into_dyn());
            }
            Op::MatMul(a, b) => {
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.val(a).into_dimensionality::<Ix2>().unwrap().to_owned();
                let bv = self.val(b).into_dimensionality::<Ix2>().unwrap().to_owned();
                self.acc(grads, a, g.dot(&bv.t()).into_dyn());
                self.acc(grads, b, av.t().dot(&g).into_dyn());
            }
            Op::TransposeMat(a) => {
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                self.acc(grads, a, g.t().to_owned().into_dyn());
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.raw_dim();
                let g = gout.clone().into_shape_with_order(shape).unwrap();
                self.acc(grads, a, g);
            }
            Op::SoftmaxRows(a) => {
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let s = self.val(id_var(id)).into_dimensionality::<Ix2>().unwrap().to_owned();
                let mut ga = ndarray::Array2::zeros(s.dim());
                for (i, row) in s.rows().into_iter().enumerate() {
                    let dot: f64 = row
                        .iter()
                        .zip(g.row(i).iter())
                        .map(|(sv, gv)| sv * gv)
                        .sum();
                    for (j, sv) in row.iter().enumerate() {
                        ga[(i, j)] = sv * (g[(i, j)] - dot);
                    }
                }
                self.acc(grads, a, ga.into_dyn());
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xv = self.val(x).into_dimensionality::<Ix3>().unwrap().to_owned();
                let wv = self.val(w).into_dimensionality::<Ix4>().unwrap().to_owned();
                let g = gout.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let (gx, gw) = conv::conv2d_backward(&xv, &wv, &g, stride, pad);
                self.acc(grads, x, gx.into_dyn());
                self.acc(grads, w, gw.into_dyn());
            }
            Op::DwConv3x3 { x, w } => {
                let xv = self.val(x).into_dimensionality::<Ix3>().unwrap().to_owned();
                let wv = self.val(w).into_dimensionality::<Ix3>().unwrap().to_owned();
                let g = gout.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let (gx, gw) = conv::dwconv3x3_backward(&xv, &wv, &g);
                self.acc(grads, x, gx.into_dyn());
                self.acc(grads, w, gw.into_dyn());
            }
            Op::AvgPool2(a) => {
                let g = gout.view().into_dimensionality::<Ix3>().unwrap();
                let (c, ho, wo) = g.dim();
                let mut ga = ndarray::Array3::zeros((c, ho * 2, wo * 2));
                for ci in 0..c {
                    for r in 0..ho {
                        for cc in 0..wo {
                            let gv = 0.25 * g[(ci, r, cc)];
                            ga[(ci, 2 * r, 2 * cc)] = gv;
                            ga[(ci, 2 * r, 2 * cc + 1)] = gv;
                            ga[(ci, 2 * r + 1, 2 * cc)] = gv;
                            ga[(ci, 2 * r + 1, 2 * cc + 1)] = gv;
                        }
                    }
                }
                self.acc(grads, a, ga.into_dyn());
            }
            Op::AvgPool3Same(a) => {
                let g = gout.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = g.dim();
                let mut ga = ndarray::Array3::zeros((c, h, w));
                for ci in 0..c {
                    for r in 0..h {
                        for cc in 0..w {
                            let r0 = r.saturating_sub(1);
                            let r1 = (r + 1).min(h - 1);
                            let c0 = cc.saturating_sub(1);
                            let c1 = (cc + 1).min(w - 1);
                            let n = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
                            let gv = g[(ci, r, cc)] / n;
                            for rr in r0..=r1 {
                                for cx in c0..=c1 {
                                    ga[(ci, rr, cx)] += gv;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, a, ga.into_dyn());
            }
            Op::GlobalAvgPool(a) => {
                let g = gout.view().into_dimensionality::<Ix1>().unwrap();
                let (c, h, w) = self
                    .val(a)
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .dim();
                let mut ga = ndarray::Array3::zeros((c, h, w));
                for ci in 0..c {
                    let gv = g[ci] / (h * w) as f64;
                    ga.index_axis_mut(Axis(0), ci).fill(gv);
                }
                self.acc(grads, a, ga.into_dyn());
            }
            Op::Upsample2(a) => {
                let g = gout.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let (c, h2, w2) = g.dim();
                let ga = conv::upsample2_backward(&g, c, h2 / 2, w2 / 2);
                self.acc(grads, a, ga.into_dyn());
            }
            Op::ConcatC(parts) => {
                let g = gout.view().into_dimensionality::<Ix3>().unwrap();
                let mut offset = 0;
                for p in parts {
                    let pc = self.val(p).into_dimensionality::<Ix3>().unwrap().dim().0;
                    let slice = g
                        .slice(ndarray::s![offset..offset + pc, .., ..])
                        .to_owned();
                    self.acc(grads, p, slice.into_dyn());
                    offset += pc;
                }
            }
            Op::MeanAll(a) => {
                let g = gout.iter().next().copied().unwrap();
                let n = self.nodes[a.0].value.len() as f64;
                let shape = self.nodes[a.0].value.raw_dim();
                self.acc(grads, a, ArrayD::from_elem(shape, g / n));
            }
            Op::SumAll(a) => {
                let g = gout.iter().next().copied().unwrap();
                let shape = self.nodes[a.0].value.raw_dim();
                self.acc(grads, a, ArrayD::from_elem(shape, g));
            }
            Op::MeanC(a) => {
                let g = gout.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = self.val(a).into_dimensionality::<Ix3>().unwrap().dim();
                let mut ga = ndarray::Array3::zeros((c, h, w));
                for ci in 0..c {
                    for r in 0..h {
                        for cc in 0..w {
                            ga[(ci, r, cc)] = g[(0, r, cc)] / c as f64;
                        }
                    }
                }
                self.acc(grads, a, ga.into_dyn());
            }
            Op::RotationExp(a) => {
                let w = self.val(a).into_dimensionality::<Ix1>().unwrap().to_owned();
                let g = gout.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let gw = warp::rotation_exp_backward(&[w[0], w[1], w[2]], &g);
                self.acc(grads, a, ndarray::arr1(&gw).into_dyn());
            }
            Op::Reproject {
                src,
                depth,
                rot,
                trans,
                k_t,
                k_r,
            } => {
                let sv = self.val(src).into_dimensionality::<Ix3>().unwrap().to_owned();
                let dv = self.val(depth).into_dimensionality::<Ix2>().unwrap().to_owned();
                let rv = self.val(rot).into_dimensionality::<Ix2>().unwrap().to_owned();
                let tv = self.val(trans).into_dimensionality::<Ix1>().unwrap().to_owned();
                let g = gout.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let need = warp::ReprojectNeeds {
                    src: self.rg(src),
                    depth: self.rg(depth),
                    rot: self.rg(rot),
                    trans: self.rg(trans),
                };
                let out = warp::reproject_backward(&sv, &dv, &rv, &tv, &k_t, &k_r, &g, need);
                if let Some(gs) = out.src {
                    self.acc(grads, src, gs.into_dyn());
                }
                if let Some(gd) = out.depth {
                    self.acc(grads, depth, gd.into_dyn());
                }
                if let Some(gr) = out.rot {
                    self.acc(grads, rot, gr.into_dyn());
                }
                if let Some(gt) = out.trans {
                    self.acc(grads, trans, gt.into_dyn());
                }
            }
        }
    }
}

fn id_var(id: usize) -> Var {
    Var(id)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
