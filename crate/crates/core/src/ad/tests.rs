//! Finite-difference checks for every differentiable op. These are the
//! gradient oracles the rest of the crate leans on.

use super::{Arr, ParamStore, Tape, Var};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(1e-12);
            let v: f64 = rng.gen();
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        })
        .collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Central finite differences against the tape gradient for a scalar-valued
/// graph. Checks every element of every input.
fn check_grad(build: &dyn Fn(&Tape, &[Var]) -> Var, inputs: &[Arr], tol: f64) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let root = build(&tape, &vars);
    let grads = tape.backward(root);

    let eval = |perturbed: &[Arr]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|a| t.leaf(a.clone())).collect();
        t.scalar_value(build(&t, &vs))
    };

    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        let ad = grads
            .get(vars[i])
            .unwrap_or_else(|| panic!("no gradient for input {i}"));
        for flat in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[flat] += h;
            minus[i].as_slice_mut().unwrap()[flat] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = ad.as_slice().unwrap()[flat];
            let denom = a.abs().max(fd.abs()).max(1.0);
            assert!(
                (a - fd).abs() / denom < tol,
                "input {i} element {flat}: ad={a} fd={fd}"
            );
        }
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, &[3, 4]);
    let y = randn(&mut rng, &[3, 4]);
    check_grad(
        &|t, v| {
            let s = t.add(v[0], v[1]);
            let s = t.mul(s, v[0]);
            let s = t.sub(s, v[1]);
            let s = t.scale(s, 0.7);
            let s = t.add_scalar(s, 0.3);
            t.sum_all(s)
        },
        &[x.clone(), y.clone()],
        1e-6,
    );
    check_grad(
        &|t, v| {
            let a = t.leaky_relu(v[0], 0.2);
            let b = t.tanh(a);
            let c = t.softplus(b);
            let d = t.square(c);
            t.mean_all(d)
        },
        &[x.clone()],
        1e-6,
    );
    let denom = x.mapv(|v| v.abs() + 1.0);
    check_grad(
        &|t, v| t.sum_all(t.div(v[0], v[1])),
        &[y.clone(), denom],
        1e-6,
    );
    // abs away from the kink, sqrt_guard on positives, rsqrt_eps anywhere
    let pos = x.mapv(|v| v.abs() + 0.5);
    check_grad(
        &|t, v| {
            let a = t.sqrt_guard(v[0]);
            let b = t.rsqrt_eps(a, 1e-3);
            let c = t.abs(b);
            t.sum_all(c)
        },
        &[pos],
        1e-6,
    );
}

#[test]
fn matmul_variants_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    check_grad(
        &|t, v| {
            let y = t.matmul(v[0], v[1]);
            t.sum_all(t.square(y))
        },
        &[a, b],
        1e-6,
    );
    let x = randn(&mut rng, &[3, 5]);
    let w = randn(&mut rng, &[2, 5]);
    let bias = randn(&mut rng, &[2]);
    check_grad(
        &|t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            t.mean_all(t.square(y))
        },
        &[x, w, bias],
        1e-6,
    );
}

#[test]
fn conv_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[2, 3, 6, 6]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    for stride in [1usize, 2] {
        check_grad(
            &|t, v| {
                let y = t.conv2d(v[0], v[1], stride, 1);
                t.sum_all(t.square(y))
            },
            &[x.clone(), w.clone()],
            1e-5,
        );
    }
    // transposed conv: adjoint shapes
    let g = randn(&mut rng, &[2, 4, 3, 3]);
    check_grad(
        &|t, v| {
            let y = t.conv2d_transpose(v[0], v[1], 2, 1, (6, 6));
            t.sum_all(t.square(y))
        },
        &[g, w.clone()],
        1e-5,
    );
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, convT(y)> for all x, y
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[1, 2, 8, 8]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    let y = randn(&mut rng, &[1, 3, 4, 4]);
    let t = Tape::new();
    let (vx, vw, vy) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(y.clone()));
    let cx = t.conv2d(vx, vw, 2, 1);
    let cty = t.conv2d_transpose(vy, vw, 2, 1, (8, 8));
    let lhs = (&*t.value(cx) * &y).sum();
    let rhs = (&*t.value(cty) * &x).sum();
    assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
}

#[test]
fn structured_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    let bias = randn(&mut rng, &[3]);
    let s = randn(&mut rng, &[2, 3]);
    check_grad(
        &|t, v| {
            let y = t.add_bias_ch(v[0], v[1]);
            let y = t.scale_channels(y, v[2]);
            t.sum_all(t.square(y))
        },
        &[x.clone(), bias, s],
        1e-6,
    );
    let m = randn(&mut rng, &[4, 3]);
    let rb = randn(&mut rng, &[3]);
    let rs = randn(&mut rng, &[4]);
    check_grad(
        &|t, v| {
            let y = t.add_bias_row(v[0], v[1]);
            let y = t.scale_rows(y, v[2]);
            let y = t.sum_rows(y);
            t.sum_all(t.square(y))
        },
        &[m, rb, rs],
        1e-6,
    );
    check_grad(
        &|t, v| {
            let y = t.upsample2x(v[0]);
            let y = t.avg_downsample(y, 4);
            let y = t.reshape(y, &[2, 3 * 2 * 2]);
            let y = t.slice_cols(y, 2, 5);
            t.mean_all(t.square(y))
        },
        &[x.clone()],
        1e-6,
    );
    let table = randn(&mut rng, &[6, 3]);
    check_grad(
        &|t, v| {
            let y = t.gather_rows(v[0], &[5, 0, 0, 3]);
            t.sum_all(t.square(y))
        },
        &[table],
        1e-6,
    );
    let strength = randn(&mut rng, &[]);
    check_grad(
        &|t, v| {
            let y = t.add_noise(v[0], noise_fixture(), v[1]);
            t.sum_all(t.square(y))
        },
        &[x.clone(), strength],
        1e-6,
    );
}

fn noise_fixture() -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    randn(&mut rng, &[4, 4])
}

#[test]
fn rigid_transform_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = randn(&mut rng, &[5, 3]);
    let rot = ndarray::arr1(&[0.4, -0.6, 0.3]).into_dyn();
    let t = ndarray::arr1(&[0.1, 0.2, -0.3]).into_dyn();
    check_grad(
        &|tp, vars| {
            let y = tp.rigid_transform(vars[0], vars[1], vars[2]);
            tp.sum_all(tp.square(y))
        },
        &[v.clone(), rot, t.clone()],
        1e-6,
    );
    // tiny-angle branch
    let rot0 = ndarray::arr1(&[1e-9, -2e-9, 5e-10]).into_dyn();
    check_grad(
        &|tp, vars| {
            let y = tp.rigid_transform(vars[0], vars[1], vars[2]);
            tp.sum_all(tp.square(y))
        },
        &[v, rot0, t],
        1e-4,
    );
}

#[test]
fn rotation_preserves_pairwise_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = randn(&mut rng, &[8, 3]);
    let t = Tape::new();
    let vv = t.leaf(v.clone());
    let rot = t.constant(ndarray::arr1(&[0.9, 0.1, -0.4]).into_dyn());
    let tr = t.constant(ndarray::arr1(&[1.0, -2.0, 0.5]).into_dyn());
    let y = t.rigid_transform(vv, rot, tr);
    let yv = t.value(y);
    for i in 0..8 {
        for j in (i + 1)..8 {
            let d0: f64 = (0..3)
                .map(|k| (v[[i, k]] - v[[j, k]]).powi(2))
                .sum::<f64>()
                .sqrt();
            let d1: f64 = (0..3)
                .map(|k| (yv[[i, k]] - yv[[j, k]]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((d0 - d1).abs() < 1e-10);
        }
    }
}

#[test]
fn param_used_twice_accumulates_one_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", ndarray::arr1(&[2.0, 3.0]).into_dyn());
    let t = Tape::new();
    let w = t.param(&store, id);
    let w_again = t.param(&store, id);
    assert_eq!(w, w_again);
    let y = t.sum_all(t.mul(w, w_again)); // y = Σ w², dy/dw = 2w
    let grads = t.backward(y);
    let g = t.param_grads(&grads);
    let gw = g.get(&id.index()).unwrap();
    assert_eq!(gw.as_slice().unwrap(), &[4.0, 6.0]);
}

#[test]
fn adam_with_zero_beta1_is_sign_scaled_descent() {
    let mut store = ParamStore::new();
    let id = store.add("p", ndarray::arr1(&[1.0]).into_dyn());
    let mut opt = super::Adam::new(&store, vec![id], 0.1, (0.0, 0.99));
    let mut grads = std::collections::HashMap::new();
    grads.insert(id.index(), ndarray::arr1(&[0.5]).into_dyn());
    opt.step(&mut store, &grads);
    // beta1 = 0 => m = g; first step: vhat = g², update ≈ lr * sign(g)
    let p = store.value(id).as_slice().unwrap()[0];
    assert!((p - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
}
