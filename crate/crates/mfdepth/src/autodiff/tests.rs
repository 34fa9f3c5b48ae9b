use super::*;
use crate::geometry::{self, DepthMap, RigidTransform};
use crate::testsupport::{max_rel_err, numeric_grad};
use approx::assert_abs_diff_eq;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.random::<f64>() - 0.5)
}

fn k_test(w: usize, h: usize) -> geometry::CameraIntrinsics {
    geometry::CameraIntrinsics::new(
        0.7 * w as f64,
        0.7 * w as f64,
        (w as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        w,
        h,
    )
    .unwrap()
}

#[test]
fn elementwise_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = rand_arr(&mut rng, &[3, 4]).mapv(|v| v + 1.5); // keep positive for sqrt
    let y0 = rand_arr(&mut rng, &[3, 4]).mapv(|v| v + 2.0);

    let eval = |x: &ArrayD<f64>, y: &ArrayD<f64>| -> (f64, Option<(ArrayD<f64>, ArrayD<f64>)>) {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let yv = g.leaf(y.clone());
        let a = g.mul(xv, yv);
        let b = g.sqrt(xv);
        let c = g.div(a, yv);
        let d = g.sub(c, b);
        let e = g.sigmoid(d);
        let f = g.exp(e);
        let h = g.abs(f);
        let s = g.sin(h);
        let co = g.cos(s);
        let r = g.recip(yv);
        let m1 = g.add(co, r);
        let m2 = g.affine(m1, 1.7, -0.3);
        let loss = g.mean_all(m2);
        let grads = g.backward(loss);
        (
            g.scalar(loss),
            Some((
                grads.get(xv).unwrap().clone(),
                grads.get(yv).unwrap().clone(),
            )),
        )
    };

    let (_, got) = eval(&x0, &y0);
    let (gx, gy) = got.unwrap();
    let ngx = numeric_grad(|x| eval(x, &y0).0, &x0, 1e-6);
    let ngy = numeric_grad(|y| eval(&x0, y).0, &y0, 1e-6);
    assert!(max_rel_err(&gx, &ngx, 1e-8) < 1e-6);
    assert!(max_rel_err(&gy, &ngy, 1e-8) < 1e-6);
}

#[test]
fn gradient_accumulates_when_var_is_reused() {
    let mut g = Graph::new();
    let x = g.leaf(ndarray::arr1(&[3.0]).into_dyn());
    let y = g.mul(x, x); // x^2
    let z = g.add(y, x); // x^2 + x
    let loss = g.sum_all(z);
    let grads = g.backward(loss);
    // d/dx (x^2 + x) = 2x + 1 = 7.
    assert_abs_diff_eq!(grads.get(x).unwrap()[0], 7.0, epsilon = 1e-12);
}

#[test]
fn matmul_and_transpose_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a0 = rand_arr(&mut rng, &[3, 5]);
    let b0 = rand_arr(&mut rng, &[5, 2]);
    let eval = |a: &ArrayD<f64>, b: &ArrayD<f64>| {
        let mut g = Graph::new();
        let av = g.leaf(a.clone());
        let bv = g.leaf(b.clone());
        let at = g.transpose_mat(av);
        let att = g.transpose_mat(at);
        let y = g.matmul(att, bv);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        (g.scalar(loss), grads.get(av).cloned(), grads.get(bv).cloned())
    };
    let (_, ga, gb) = eval(&a0, &b0);
    let na = numeric_grad(|a| eval(a, &b0).0, &a0, 1e-6);
    let nb = numeric_grad(|b| eval(&a0, b).0, &b0, 1e-6);
    assert!(max_rel_err(&ga.unwrap(), &na, 1e-8) < 1e-6);
    assert!(max_rel_err(&gb.unwrap(), &nb, 1e-6) < 1e-6);
}

#[test]
fn conv2d_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Array3::from_shape_fn((2, 5, 6), |_| rng.random::<f64>() - 0.5);
    let w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.random::<f64>() - 0.5);
    let y = conv::conv2d_forward(&x, &w, 1, 1);
    assert_eq!(y.dim(), (3, 5, 6));
    // Direct triple loop.
    for co in 0..3 {
        for r in 0..5 {
            for c in 0..6 {
                let mut acc = 0.0;
                for ci in 0..2 {
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let iy = r as i64 + ky - 1;
                            let ix = c as i64 + kx - 1;
                            if iy >= 0 && ix >= 0 && iy < 5 && ix < 6 {
                                acc += x[(ci, iy as usize, ix as usize)]
                                    * w[(co, ci, ky as usize, kx as usize)];
                            }
                        }
                    }
                }
                assert_abs_diff_eq!(y[(co, r, c)], acc, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn conv2d_strided_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = rand_arr(&mut rng, &[2, 6, 8]);
    let w0 = rand_arr(&mut rng, &[3, 2, 3, 3]);
    let eval = |x: &ArrayD<f64>, w: &ArrayD<f64>| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let y = g.conv2d(xv, wv, 2, 1);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        (g.scalar(loss), grads.get(xv).cloned(), grads.get(wv).cloned())
    };
    let (_, gx, gw) = eval(&x0, &w0);
    let nx = numeric_grad(|x| eval(x, &w0).0, &x0, 1e-6);
    let nw = numeric_grad(|w| eval(&x0, w).0, &w0, 1e-6);
    assert!(max_rel_err(&gx.unwrap(), &nx, 1e-8) < 1e-6);
    assert!(max_rel_err(&gw.unwrap(), &nw, 1e-8) < 1e-6);
}

#[test]
fn dwconv3x3_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_arr(&mut rng, &[3, 5, 7]);
    let w0 = rand_arr(&mut rng, &[3, 3, 3]);
    let eval = |x: &ArrayD<f64>, w: &ArrayD<f64>| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let y = g.dwconv3x3(xv, wv);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        (g.scalar(loss), grads.get(xv).cloned(), grads.get(wv).cloned())
    };
    let (_, gx, gw) = eval(&x0, &w0);
    let nx = numeric_grad(|x| eval(x, &w0).0, &x0, 1e-6);
    let nw = numeric_grad(|w| eval(&x0, w).0, &w0, 1e-6);
    assert!(max_rel_err(&gx.unwrap(), &nx, 1e-8) < 1e-6);
    assert!(max_rel_err(&gw.unwrap(), &nw, 1e-8) < 1e-6);
}

#[test]
fn pooling_and_resampling_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = rand_arr(&mut rng, &[2, 4, 6]);
    let eval = |x: &ArrayD<f64>| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let p2 = g.avg_pool2(xv);
        let p3 = g.avg_pool3_same(p2);
        let up = g.upsample2(p3);
        let gap = g.global_avg_pool(up);
        let s = g.sum_all(gap);
        let grads = g.backward(s);
        (g.scalar(s), grads.get(xv).cloned())
    };
    let (_, gx) = eval(&x0);
    let nx = numeric_grad(|x| eval(x).0, &x0, 1e-6);
    assert!(max_rel_err(&gx.unwrap(), &nx, 1e-8) < 1e-6);
}

#[test]
fn avg_pool3_same_counts_border_windows() {
    let mut g = Graph::new();
    let x = g.constant(Array3::from_elem((1, 2, 2), 1.0).into_dyn());
    let y = g.avg_pool3_same(x);
    // All windows cover exactly the 4 ones -> mean 1 everywhere.
    assert!(g.value(y).iter().all(|&v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn concat_bias_meanc_softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a0 = rand_arr(&mut rng, &[2, 3, 4]);
    let b0 = rand_arr(&mut rng, &[1, 3, 4]);
    let bias0 = rand_arr(&mut rng, &[3]);
    let eval = |a: &ArrayD<f64>, b: &ArrayD<f64>, bias: &ArrayD<f64>| {
        let mut g = Graph::new();
        let av = g.leaf(a.clone());
        let bv = g.leaf(b.clone());
        let biasv = g.leaf(bias.clone());
        let cat = g.concat_c(&[av, bv]);
        let biased = g.add_bias(cat, biasv);
        let mc = g.mean_c(biased);
        let flat = g.reshape(mc, &[3, 4]);
        let sm = g.softmax_rows(flat);
        let sq = g.mul(sm, sm);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        (
            g.scalar(loss),
            grads.get(av).cloned(),
            grads.get(bv).cloned(),
            grads.get(biasv).cloned(),
        )
    };
    let (_, ga, gb, gbias) = eval(&a0, &b0, &bias0);
    let na = numeric_grad(|a| eval(a, &b0, &bias0).0, &a0, 1e-6);
    let nb = numeric_grad(|b| eval(&a0, b, &bias0).0, &b0, 1e-6);
    let nbias = numeric_grad(|bias| eval(&a0, &b0, bias).0, &bias0, 1e-6);
    assert!(max_rel_err(&ga.unwrap(), &na, 1e-8) < 1e-5);
    assert!(max_rel_err(&gb.unwrap(), &nb, 1e-8) < 1e-5);
    assert!(max_rel_err(&gbias.unwrap(), &nbias, 1e-8) < 1e-5);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_arr(&mut rng, &[5, 7]).mapv(|v| v * 10.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let sm = g.softmax_rows(xv);
    let v = g.value(sm).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    for row in v.rows() {
        assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
    }
}

#[test]
fn broadcast_scalar_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = rand_arr(&mut rng, &[3, 3]).mapv(|v| v + 2.0);
    let eval = |x: &ArrayD<f64>| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let m = g.mean_all(xv);
        let norm = g.div_broadcast(xv, m); // x / mean(x)
        let scaled = g.mul_broadcast(norm, m); // back to x, through both ops
        let sq = g.mul(scaled, norm);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        (g.scalar(loss), grads.get(xv).cloned())
    };
    let (_, gx) = eval(&x0);
    let nx = numeric_grad(|x| eval(x).0, &x0, 1e-6);
    assert!(max_rel_err(&gx.unwrap(), &nx, 1e-8) < 1e-5);
}

#[test]
fn rotation_exp_forward_matches_rodrigues() {
    let w = [0.3, -0.4, 0.2];
    let mut g = Graph::new();
    let wv = g.constant(ndarray::arr1(&w).into_dyn());
    let r = g.rotation_exp(wv);
    let expect = geometry::se3::rotation_from_axis_angle(&w);
    let got = g.value(r);
    for i in 0..3 {
        for j in 0..3 {
            assert_abs_diff_eq!(got[[i, j]], expect[i][j], epsilon = 1e-12);
        }
    }
}

#[test]
fn rotation_exp_gradients_match_finite_differences() {
    for (seed, scale) in [(10u64, 0.5), (11, 1e-5)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = rand_arr(&mut rng, &[3]).mapv(|v| v * scale);
        let dir = rand_arr(&mut rng, &[3, 3]);
        let eval = |w: &ArrayD<f64>| {
            let mut g = Graph::new();
            let wv = g.leaf(w.clone());
            let r = g.rotation_exp(wv);
            let d = g.constant(dir.clone());
            let prod = g.mul(r, d);
            let loss = g.sum_all(prod);
            let grads = g.backward(loss);
            (g.scalar(loss), grads.get(wv).cloned())
        };
        let (_, gw) = eval(&w0);
        let nw = numeric_grad(|w| eval(w).0, &w0, 1e-7);
        assert!(
            max_rel_err(&gw.unwrap(), &nw, 1e-7) < 1e-5,
            "scale {scale}"
        );
    }
}

#[test]
fn reproject_forward_matches_pure_geometry_warp() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let k = k_test(10, 8);
    let src = Array3::from_shape_fn((2, 8, 10), |_| rng.random::<f64>());
    let depth = Array2::from_shape_fn((8, 10), |_| 3.0 + 2.0 * rng.random::<f64>());
    let pose = RigidTransform::from_axis_angle([0.01, -0.02, 0.015], [0.2, -0.1, 0.05]);

    let mut g = Graph::new();
    let sv = g.constant(src.clone().into_dyn());
    let dv = g.constant(depth.clone().into_dyn());
    let rv = g.constant(
        Array2::from_shape_fn((3, 3), |(i, j)| pose.rotation[i][j]).into_dyn(),
    );
    let tv = g.constant(Array1::from_vec(pose.translation.to_vec()).into_dyn());
    let out = g.reproject(sv, dv, rv, tv, &k, &k);

    let dm = DepthMap::all_valid(depth).unwrap();
    let (expect, evalid) = geometry::warp_backward(&src, &dm, &k, &k, &pose).unwrap();
    assert_eq!(g.value(out).view().into_dimensionality::<Ix3>().unwrap(), expect.view());
    assert_eq!(g.validity(out).unwrap(), &evalid);
}

#[test]
fn reproject_depth_gradient_matches_finite_differences_on_8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let k = k_test(8, 8);
    let src = Array3::from_shape_fn((1, 8, 8), |(_, r, c)| {
        0.5 + 0.3 * ((r as f64) * 0.7).sin() * ((c as f64) * 0.9).cos()
            + 0.1 * rng.random::<f64>()
    });
    let depth0 = Array2::from_shape_fn((8, 8), |_| 3.0 + rng.random::<f64>()).into_dyn();
    let pose = RigidTransform::from_axis_angle([0.02, -0.01, 0.03], [0.15, 0.08, -0.02]);
    let rmat = Array2::from_shape_fn((3, 3), |(i, j)| pose.rotation[i][j]).into_dyn();
    let tvec = Array1::from_vec(pose.translation.to_vec()).into_dyn();

    let eval = |d: &ArrayD<f64>| {
        let mut g = Graph::new();
        let sv = g.constant(src.clone().into_dyn());
        let dv = g.leaf(d.clone());
        let rv = g.constant(rmat.clone());
        let tv = g.constant(tvec.clone());
        let out = g.reproject(sv, dv, rv, tv, &k, &k);
        let loss = g.mean_all(out);
        let grads = g.backward(loss);
        (g.scalar(loss), grads.get(dv).cloned())
    };
    let (_, gd) = eval(&depth0);
    let nd = numeric_grad(|d| eval(d).0, &depth0, 1e-6);
    assert!(max_rel_err(&gd.unwrap(), &nd, 1e-7) <= 1e-3);
}

#[test]
fn reproject_source_and_pose_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let k = k_test(8, 6);
    let src0 = rand_arr(&mut rng, &[2, 6, 8]).mapv(|v| v + 0.5);
    let depth = Array2::from_shape_fn((6, 8), |_| 2.5 + rng.random::<f64>()).into_dyn();
    let axis0 = ndarray::arr1(&[0.03, -0.02, 0.01]).into_dyn();
    let trans0 = ndarray::arr1(&[0.1, -0.05, 0.02]).into_dyn();

    let eval = |s: &ArrayD<f64>, ax: &ArrayD<f64>, tr: &ArrayD<f64>| {
        let mut g = Graph::new();
        let sv = g.leaf(s.clone());
        let dv = g.constant(depth.clone());
        let axv = g.leaf(ax.clone());
        let rv = g.rotation_exp(axv);
        let tv = g.leaf(tr.clone());
        let out = g.reproject(sv, dv, rv, tv, &k, &k);
        let sq = g.mul(out, out);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        (
            g.scalar(loss),
            grads.get(sv).cloned(),
            grads.get(axv).cloned(),
            grads.get(tv).cloned(),
        )
    };
    let (_, gs, gax, gtr) = eval(&src0, &axis0, &trans0);
    let ns = numeric_grad(|s| eval(s, &axis0, &trans0).0, &src0, 1e-6);
    let nax = numeric_grad(|ax| eval(&src0, ax, &trans0).0, &axis0, 1e-7);
    let ntr = numeric_grad(|tr| eval(&src0, &axis0, tr).0, &trans0, 1e-7);
    assert!(max_rel_err(&gs.unwrap(), &ns, 1e-7) <= 1e-3);
    assert!(max_rel_err(&gax.unwrap(), &nax, 1e-7) <= 1e-3);
    assert!(max_rel_err(&gtr.unwrap(), &ntr, 1e-7) <= 1e-3);
}

#[test]
fn constants_do_not_receive_gradients() {
    let mut g = Graph::new();
    let x = g.leaf(ndarray::arr1(&[2.0]).into_dyn());
    let c = g.constant(ndarray::arr1(&[5.0]).into_dyn());
    let y = g.mul(x, c);
    let loss = g.sum_all(y);
    let grads = g.backward(loss);
    assert!(grads.get(c).is_none());
    assert_abs_diff_eq!(grads.get(x).unwrap()[0], 5.0, epsilon = 1e-12);
}

#[test]
fn adam_converges_on_quadratic() {
    use super::optim::Adam;
    use std::collections::BTreeMap;
    let mut params = BTreeMap::new();
    params.insert("x".to_string(), ndarray::arr1(&[5.0, -3.0]).into_dyn());
    let mut opt = Adam::new(0.1);
    for _ in 0..500 {
        let x = params["x"].clone();
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), x.mapv(|v| 2.0 * v));
        opt.step(&mut params, &grads);
    }
    assert!(params["x"].iter().all(|v| v.abs() < 1e-3));
}
