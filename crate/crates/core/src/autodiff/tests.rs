use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> crate::Result<Var> + 'a;

fn eval_scalar(leaves: &[Array], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|a| g.param(a.clone()).unwrap()).collect();
    let root = build(&mut g, &vars).unwrap();
    g.forward(root).unwrap().item()
}

/// Max relative error between analytic and central-difference gradients.
fn fd_check(leaves: &[Array], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|a| g.param(a.clone()).unwrap()).collect();
    let root = build(&mut g, &vars).unwrap();
    g.forward(root).unwrap();
    let grads = g.backward(root).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[li], leaf.rows(), leaf.cols());
        for k in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[k] += h;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[k] -= h;
            let fd = (eval_scalar(&plus, build) - eval_scalar(&minus, build)) / (2.0 * h);
            let a = analytic.data()[k];
            worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array {
    let data = (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect();
    Array::matrix(r, c, data).unwrap()
}

#[test]
fn square_value_and_gradient() {
    let mut g = Graph::new();
    let x = g.param(Array::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    assert_eq!(g.forward(y).unwrap().item(), 9.0);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let i2 = g.constant(Array::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
    let v = g.constant(Array::column(&[1.0, 2.0])).unwrap();
    let y = g.matmul(i2, v).unwrap();
    assert_eq!(g.forward(y).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn backward_before_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.param(Array::scalar(1.0)).unwrap();
    let y = g.square(x);
    assert!(matches!(g.backward(y), Err(crate::Error::NotEvaluated(_))));
}

#[test]
fn shape_errors_name_the_operation() {
    let mut g = Graph::new();
    let a = g.constant(Array::zeros(2, 3)).unwrap();
    let b = g.constant(Array::zeros(2, 3)).unwrap();
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    assert!(g.add_row(a, b).is_err());
}

#[test]
fn non_finite_leaves_rejected() {
    let mut g = Graph::new();
    assert!(g.constant(Array::scalar(f64::NAN)).is_err());
    assert!(g.param(Array::scalar(f64::INFINITY)).is_err());
}

#[test]
fn softmax_cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = Array::from_rows(&[[0.3, -1.2, 2.0]]).unwrap();
    let mut g = Graph::new();
    let x = g.param(logits.clone()).unwrap();
    let ce = g.cross_entropy(x, &[1]).unwrap();
    let loss = g.sum(ce);
    g.forward(loss).unwrap();
    let grad = g.backward(loss).unwrap().get(x).unwrap().clone();
    let p = softmax_rows(&logits);
    let expected: Vec<f64> = p.data().iter().enumerate().map(|(j, &v)| v - if j == 1 { 1.0 } else { 0.0 }).collect();
    for (a, b) in grad.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-14);
    }
    let build: Box<Build> = Box::new(|g, v| {
        let ce = g.cross_entropy(v[0], &[1])?;
        Ok(g.sum(ce))
    });
    assert!(fd_check(&[logits], &*build) < 1e-4);
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let x0 = Array::from_rows(&[[0.4, -0.7]]).unwrap();
    let f1: Box<Build> = Box::new(|g, v| {
        let e = g.exp(v[0]);
        Ok(g.sum(e))
    });
    let f2: Box<Build> = Box::new(|g, v| {
        let s = g.square(v[0]);
        Ok(g.mean(s))
    });
    let grad_of = |f: &Build| {
        let mut g = Graph::new();
        let x = g.param(x0.clone()).unwrap();
        let y = f(&mut g, &[x]).unwrap();
        g.forward(y).unwrap();
        g.backward(y).unwrap().get(x).unwrap().clone()
    };
    let both: Box<Build> = Box::new(|g, v| {
        let a = f1(g, v)?;
        let b = f2(g, v)?;
        g.add(a, b)
    });
    let (a, b, c) = (grad_of(&*f1), grad_of(&*f2), grad_of(&*both));
    for k in 0..2 {
        assert!((a.data()[k] + b.data()[k] - c.data()[k]).abs() < 1e-15);
    }
}

#[test]
fn stop_gradient_blocks() {
    let mut g = Graph::new();
    let x = g.param(Array::scalar(2.0)).unwrap();
    let s = g.stop_gradient(x);
    let y = g.mul(s, s).unwrap();
    let z = g.add(y, x).unwrap();
    assert_eq!(g.forward(z).unwrap().item(), 6.0);
    assert_eq!(g.backward(z).unwrap().get(x).unwrap().item(), 1.0);
    assert!(!g.requires_grad(y));
}

#[test]
fn entropy_of_uniform_two_class_is_ln2() {
    let mut g = Graph::new();
    let x = g.constant(Array::from_rows(&[[0.7, 0.7]]).unwrap()).unwrap();
    let h = g.entropy(x);
    assert!((g.forward(h).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn elu_limits() {
    let mut g = Graph::new();
    let x = g.constant(Array::row(&[0.0, -1e3, 2.0])).unwrap();
    let y = g.elu(x);
    assert_eq!(g.forward(y).unwrap().data(), &[0.0, -1.0, 2.0]);
}

#[test]
fn softmax_rows_sum_to_one_and_entropy_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for k in 2..7 {
        let x = randn(&mut rng, 5, k).map(|v| v * 10.0);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let p = g.softmax(xv);
        let h = g.entropy(xv);
        let pv = g.forward(p).unwrap().clone();
        for r in pv.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for &e in g.forward(h).unwrap().data() {
            assert!((-1e-12..=(k as f64).ln() + 1e-12).contains(&e));
        }
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, 3, 4);
    let b = randn(&mut rng, 4, 2);
    let c = randn(&mut rng, 3, 4);
    let row = randn(&mut rng, 1, 4);
    let pos = a.map(|v| v.abs() + 0.5);
    let s = Array::scalar(0.8);
    let cases: Vec<(&str, Vec<Array>, Box<Build>)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|g, v| {
            let m = g.matmul(v[0], v[1])?;
            let q = g.square(m);
            Ok(g.sum(q))
        })),
        ("add/sub/mul", vec![a.clone(), c.clone()], Box::new(|g, v| {
            let x = g.add(v[0], v[1])?;
            let y = g.sub(v[0], v[1])?;
            let z = g.mul(x, y)?;
            Ok(g.mean(z))
        })),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|g, v| {
            let x = g.add_row(v[0], v[1])?;
            let e = g.elu(x);
            Ok(g.sum(e))
        })),
        ("mul_scalar", vec![a.clone(), s.clone()], Box::new(|g, v| {
            let x = g.mul_scalar(v[0], v[1])?;
            let e = g.exp(x);
            Ok(g.mean(e))
        })),
        ("scale/shift/neg", vec![a.clone()], Box::new(|g, v| {
            let x = g.scale(v[0], 1.7);
            let y = g.shift(x, -0.3);
            let z = g.neg(y);
            let q = g.square(z);
            Ok(g.sum(q))
        })),
        ("relu/abs", vec![a.clone()], Box::new(|g, v| {
            let r = g.relu(v[0]);
            let b = g.abs(v[0]);
            let m = g.mul(r, b)?;
            Ok(g.sum(m))
        })),
        ("log", vec![pos.clone()], Box::new(|g, v| {
            let l = g.log(v[0]);
            Ok(g.sum(l))
        })),
        ("softmax", vec![a.clone(), c.clone()], Box::new(|g, v| {
            let p = g.softmax(v[0]);
            let m = g.mul(p, v[1])?;
            Ok(g.sum(m))
        })),
        ("log_softmax", vec![a.clone(), c.clone()], Box::new(|g, v| {
            let p = g.log_softmax(v[0]);
            let m = g.mul(p, v[1])?;
            Ok(g.sum(m))
        })),
        ("entropy", vec![a.clone()], Box::new(|g, v| {
            let h = g.entropy(v[0]);
            Ok(g.mean(h))
        })),
        ("cross_entropy", vec![a.clone()], Box::new(|g, v| {
            let ce = g.cross_entropy(v[0], &[0, 3, 1])?;
            Ok(g.mean(ce))
        })),
        ("pick/max", vec![a.clone()], Box::new(|g, v| {
            let p = g.pick(v[0], &[2, 0, 1])?;
            let m = g.max_cols(v[0]);
            let s = g.mul(p, m)?;
            Ok(g.sum(s))
        })),
        ("sum_cols", vec![a.clone()], Box::new(|g, v| {
            let s = g.sum_cols(v[0]);
            let q = g.square(s);
            Ok(g.sum(q))
        })),
        ("log_mean_exp", vec![a.clone()], Box::new(|g, v| Ok(g.log_mean_exp(v[0])))),
        ("concat/slice/gather", vec![a.clone(), c.clone()], Box::new(|g, v| {
            let cc = g.concat_cols(&[v[0], v[1]])?;
            let cr = g.concat_rows(&[cc, cc])?;
            let sl = g.slice_rows(cr, 1, 5)?;
            let ga = g.gather_rows(sl, &[3, 0, 0, 2])?;
            let q = g.square(ga);
            Ok(g.sum(q))
        })),
    ];
    for (name, leaves, build) in cases {
        let err = fd_check(&leaves, &*build);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}
