use super::*;
use proptest::prelude::*;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
struct Pair {
    w: Tensor,
    b: Tensor,
}

impl Parameterized<Tensor> for Pair {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a Tensor, ParamKind)) {
        f(&join_path(path, "w"), &self.w, ParamKind::Weight);
        f(&join_path(path, "b"), &self.b, ParamKind::Bias);
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join_path(path, "w"), &mut self.w, ParamKind::Weight);
        f(&join_path(path, "b"), &mut self.b, ParamKind::Bias);
    }
}

#[test]
fn analytic_values() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let t = tape.tanh(z).unwrap();
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(t).item(), 0.0);
    assert_eq!(tape.value(s).item(), 0.5);
}

#[test]
fn identity_matmul_and_mismatch() {
    let mut tape = Tape::new();
    let a = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let i3 = tape.constant(Tensor::identity(3));
    let av = tape.constant(a.clone());
    let out = tape.matmul(i3, av).unwrap();
    assert_eq!(tape.value(out), &a);

    let x = tape.constant(Tensor::zeros(2, 3));
    let y = tape.constant(Tensor::zeros(4, 2));
    assert!(matches!(tape.matmul(x, y), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::row_vector(vec![1.0, -2.0]));
    let unused = tape.param(Tensor::row_vector(vec![3.0, 4.0, 5.0]));
    let sq = tape.square(x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).data(), &[2.0, -4.0]);
    assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    assert!(grads.get(unused).is_none());
}

#[test]
fn backward_needs_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
    let y = tape.square(x).unwrap();
    assert!(matches!(tape.backward(y), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn non_finite_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1e308));
    assert!(matches!(tape.scale(x, 10.0), Err(AutodiffError::NonFinite { op: "affine" })));
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = seeded_rng(7);
        let mut tape = Tape::new();
        let a = tape.param(init_uniform(&mut rng, 5, 4, 4));
        let b = tape.param(init_uniform(&mut rng, 4, 3, 4));
        let c = tape.matmul(a, b).unwrap();
        let t = tape.tanh(c).unwrap();
        let sq = tape.square(t).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.value(loss).item().to_bits(), g.wrt(a).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

/// Builds `sum(op(inputs) ⊙ R)` and checks every input's gradient against
/// central differences.
fn check_op(
    shapes: &[(usize, usize)],
    seed: u64,
    positive: bool,
    op: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> GradCheckReport {
    let mut rng = seeded_rng(seed);
    let mut draw = |r: usize, c: usize| {
        let data = (0..r * c)
            .map(|_| {
                let v: f64 = rng.gen_range(-1.5..1.5);
                // Keep clear of the ReLU kink.
                let v = if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v };
                if positive { v.abs() + 0.1 } else { v }
            })
            .collect();
        Tensor::matrix(r, c, data)
    };
    let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| draw(r, c)).collect();
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = op(&mut tape, &vars);
        let v = tape.value(out);
        (v.rows(), v.cols())
    };
    let weights = draw(probe.0, probe.1);

    let eval = |flat: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let data = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                tape.param(Tensor::matrix(t.rows(), t.cols(), data))
            })
            .collect();
        let out = op(&mut tape, &vars);
        let r = tape.constant(weights.clone());
        let prod = tape.mul(out, r).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).item();
        if !want_grad {
            return (value, Vec::new());
        }
        let g = tape.backward(loss).unwrap();
        (value, vars.iter().flat_map(|&v| g.wrt(v).into_data()).collect())
    };
    let x: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let (_, analytic) = eval(&x, true);
    grad_check(|p| eval(p, false).0, &x, &analytic, 1e-6, 1e-4)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<(usize, usize)>, OpFn)> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]).unwrap())),
        ("add", vec![(3, 4), (3, 4)], Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]).unwrap())),
        ("add_broadcast", vec![(3, 4), (1, 4)], Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]).unwrap())),
        ("sub_broadcast", vec![(3, 4), (1, 4)], Box::new(|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![(2, 5), (2, 5)], Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]).unwrap())),
        ("mul_col", vec![(3, 1), (3, 4)], Box::new(|t: &mut Tape, v: &[Var]| t.mul_col(v[0], v[1]).unwrap())),
        ("tanh", vec![(3, 3)], Box::new(|t: &mut Tape, v: &[Var]| t.tanh(v[0]).unwrap())),
        ("sigmoid", vec![(3, 3)], Box::new(|t: &mut Tape, v: &[Var]| t.sigmoid(v[0]).unwrap())),
        ("relu", vec![(3, 3)], Box::new(|t: &mut Tape, v: &[Var]| t.relu(v[0]).unwrap())),
        ("softplus", vec![(3, 3)], Box::new(|t: &mut Tape, v: &[Var]| t.softplus(v[0]).unwrap())),
        ("square", vec![(3, 3)], Box::new(|t: &mut Tape, v: &[Var]| t.square(v[0]).unwrap())),
        ("sum", vec![(3, 3)], Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0]).unwrap())),
        ("affine", vec![(2, 3)], Box::new(|t: &mut Tape, v: &[Var]| t.affine(v[0], -1.7, 0.3).unwrap())),
        ("concat_cols", vec![(2, 3), (2, 1)], Box::new(|t: &mut Tape, v: &[Var]| t.concat_cols(&[v[0], v[1], v[0]]).unwrap())),
        ("concat_rows", vec![(2, 3), (1, 3)], Box::new(|t: &mut Tape, v: &[Var]| t.concat_rows(&[v[1], v[0]]).unwrap())),
        ("slice_rows", vec![(5, 2)], Box::new(|t: &mut Tape, v: &[Var]| t.slice_rows(v[0], 1, 4).unwrap())),
        ("slice_cols", vec![(2, 5)], Box::new(|t: &mut Tape, v: &[Var]| t.slice_cols(v[0], 2, 5).unwrap())),
        ("gather_rows", vec![(4, 2)], Box::new(|t: &mut Tape, v: &[Var]| t.gather_rows(v[0], &[3, 0, 3]).unwrap())),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn primitives_match_finite_differences(seed in 0u64..1_000_000) {
        for (name, shapes, op) in primitive_cases() {
            let report = check_op(&shapes, seed, false, op.as_ref());
            prop_assert!(report.passed, "{name}: {report:?}");
        }
    }
}

#[test]
fn fused_lstm_like_expression_matches_finite_differences() {
    let report = check_op(&[(2, 3), (3, 4), (1, 4), (2, 4)], 11, false, &|t, v| {
        let z = t.matmul(v[0], v[1]).unwrap();
        let z = t.add(z, v[2]).unwrap();
        let g = t.sigmoid(z).unwrap();
        let c = t.tanh(v[3]).unwrap();
        t.mul(g, c).unwrap()
    });
    assert!(report.passed, "{report:?}");
}

#[test]
fn grad_check_on_quadratic_and_negative_control() {
    let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>();
    let x = vec![0.3, -1.2, 2.0];
    let grad: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
    let report = grad_check(f, &x, &grad, 1e-5, 1e-4);
    assert!(report.passed);
    assert!(report.max_relative_error < 1e-9, "{report:?}");

    let mut corrupted = grad.clone();
    corrupted[1] *= 1.01;
    let report = grad_check(f, &x, &corrupted, 1e-5, 1e-4);
    assert!(!report.passed);
    assert_eq!(report.worst_index, 1);
}

fn pair() -> Pair {
    Pair {
        w: Tensor::matrix(2, 2, vec![0.5, -0.25, 1.0, 2.0]),
        b: Tensor::row_vector(vec![0.1, -0.1]),
    }
}

#[test]
fn adam_zero_gradient_is_fixed_point() {
    let mut p = pair();
    let before = p.clone();
    let mut state = AdamState::new(AdamConfig::default());
    let zeros = vec![Tensor::zeros(2, 2), Tensor::zeros(1, 2)];
    adam_step(&mut p, &zeros, &mut state).unwrap();
    assert_eq!(p, before);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut p = pair();
    let before = p.clone();
    let mut state = AdamState::new(AdamConfig::default());
    let grads = vec![
        Tensor::matrix(2, 2, vec![3.0, -0.01, 250.0, -7.0]),
        Tensor::row_vector(vec![1e-3, -2.0]),
    ];
    adam_step(&mut p, &grads, &mut state).unwrap();
    // m̂ = g and v̂ = g² after one step, so Δ = -lr·g/(|g| + ε).
    for (after, (orig, g)) in flatten(&p).iter().zip(flatten(&before).iter().zip(grads.iter().flat_map(|t| t.data().to_vec()))) {
        let expected = -0.001 * g / (g.abs() + 1e-8);
        assert!((after - orig - expected).abs() < 1e-15, "{after} {orig} {g}");
        assert!(((after - orig).abs() - 0.001).abs() < 1e-8);
    }
}

#[test]
fn adam_is_deterministic_and_checks_shapes() {
    let grads = vec![Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]), Tensor::row_vector(vec![0.5, 0.6])];
    let run = || {
        let mut p = pair();
        let mut s = AdamState::new(AdamConfig::default());
        adam_step(&mut p, &grads, &mut s).unwrap();
        adam_step(&mut p, &grads, &mut s).unwrap();
        (p, s)
    };
    assert_eq!(run(), run());

    let mut p = pair();
    let mut s = AdamState::new(AdamConfig::default());
    let bad = vec![Tensor::zeros(2, 2), Tensor::zeros(1, 3)];
    assert!(matches!(adam_step(&mut p, &bad, &mut s), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = seeded_rng(3);
    let original = Pair {
        w: init_uniform(&mut rng, 3, 4, 3),
        b: Tensor::row_vector(vec![1.0 / 3.0, std::f64::consts::PI, -0.0, 5e-324]),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    write_checkpoint(&original, &path).unwrap();
    let mut restored = Pair {
        w: Tensor::zeros(3, 4),
        b: Tensor::zeros(1, 4),
    };
    read_checkpoint(&mut restored, &path).unwrap();
    let bits = |p: &Pair| flatten(p).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&restored), bits(&original));

    let mut wrong = Pair {
        w: Tensor::zeros(4, 3),
        b: Tensor::zeros(1, 4),
    };
    assert!(read_checkpoint(&mut wrong, &path).is_err());
}

#[test]
fn penalty_excludes_biases() {
    let p = pair();
    assert_eq!(weight_penalty_value(&p), 0.25 + 0.0625 + 1.0 + 4.0);
    let mut tape = Tape::new();
    let w = tape.param(p.w.clone());
    let b = tape.param(p.b.clone());
    struct Bound(Var, Var);
    impl Parameterized<Var> for Bound {
        fn visit<'a>(&'a self, _: &str, f: &mut dyn FnMut(&str, &'a Var, ParamKind)) {
            f("w", &self.0, ParamKind::Weight);
            f("b", &self.1, ParamKind::Bias);
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Var, ParamKind)) {
            f("w", &mut self.0, ParamKind::Weight);
            f("b", &mut self.1, ParamKind::Bias);
        }
    }
    let pen = weight_penalty(&mut tape, &Bound(w, b)).unwrap();
    assert_eq!(tape.value(pen).item(), weight_penalty_value(&p));
    assert_eq!(param_count(&p), 6);
}
