//! Every tape primitive against central differences, plus softmax and log-sum-exp laws.

use graded_core::tape::{central_difference, max_relative_error, FD_EPS_ABS};
use graded_core::{Act, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

fn cfg() -> Config {
    Config {
        cases: 100,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    }
}

fn mat(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

/// Selects output coordinate `j` as the scalar loss.
fn probe(t: &mut Tape, y: Var, j: usize) -> Result<Var> {
    let v = t.value(y);
    let mut w = v.map(|_| 0.0);
    w.data_mut()[j] = 1.0;
    let wv = t.constant(w);
    let m = t.mul(y, wv)?;
    Ok(t.sum(m))
}

/// Worst relative error over every row of the Jacobian, against Richardson-extrapolated
/// central differences so that the comparison is not limited by cancellation at h.
fn check(theta: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    let mut t = Tape::new();
    let x = t.leaf(theta.clone());
    let y = f(&mut t, x).unwrap();
    let outputs = t.value(y).len();
    let mut worst: f64 = 0.0;
    for j in 0..outputs {
        let mut t = Tape::new();
        let x = t.leaf(theta.clone());
        let y = f(&mut t, x).unwrap();
        let l = probe(&mut t, y, j).unwrap();
        let analytic = t.backward(l).unwrap().wrt(x);
        let eval = |th: &Tensor| {
            let mut t = Tape::new();
            let x = t.leaf(th.clone());
            let y = f(&mut t, x).unwrap();
            let l = probe(&mut t, y, j).unwrap();
            t.scalar(l)
        };
        let h = 2e-3;
        let coarse = central_difference(eval, theta, h);
        let fine = central_difference(eval, theta, h / 2.0);
        let numeric = fine.zip_map(&coarse, |a, b| (4.0 * a - b) / 3.0).unwrap();
        worst = worst.max(max_relative_error(&analytic, &numeric, FD_EPS_ABS));
    }
    worst
}

const TOL: f64 = 1e-5;

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn matmul_and_linear(a in mat(3, 4, -10.0, 10.0), b in mat(4, 2, -10.0, 10.0)) {
        let bc = b.clone();
        { let e = check(&a, move |t, x| { let c = t.constant(bc.clone()); t.matmul(x, c) }); prop_assert!(e < TOL, "{}", e); }
        let ac = a.clone();
        { let e = check(&b, move |t, x| { let c = t.constant(ac.clone()); t.matmul(c, x) }); prop_assert!(e < TOL, "{}", e); }
        let w = b.transpose();
        { let e = check(&a, move |t, x| { let c = t.constant(w.clone()); t.linear(x, c) }); prop_assert!(e < TOL, "{}", e); }
    }

    #[test]
    fn elementwise_binary(a in mat(2, 3, -10.0, 10.0), b in mat(2, 3, -10.0, 10.0)) {
        for kind in 0..3 {
            let bc = b.clone();
            let e = check(&a, move |t, x| {
                let c = t.constant(bc.clone());
                match kind { 0 => t.add(x, c), 1 => t.sub(c, x), _ => t.mul(x, c) }
            });
            prop_assert!(e < TOL, "kind {kind}: {e}");
        }
    }

    #[test]
    fn broadcasts(a in mat(3, 4, -10.0, 10.0), r in mat(1, 4, -10.0, 10.0), c in mat(3, 1, -10.0, 10.0)) {
        let (rc, cc, ac) = (r.clone(), c.clone(), a.clone());
        { let e = check(&a, move |t, x| { let k = t.constant(rc.clone()); t.add_row(x, k) }); prop_assert!(e < TOL, "{}", e); }
        let rc = r.clone();
        { let e = check(&a, move |t, x| { let k = t.constant(rc.clone()); t.mul_row(x, k) }); prop_assert!(e < TOL, "{}", e); }
        let a2 = a.clone();
        { let e = check(&r, move |t, x| { let k = t.constant(a2.clone()); t.mul_row(k, x) }); prop_assert!(e < TOL, "{}", e); }
        { let e = check(&a, move |t, x| { let k = t.constant(cc.clone()); t.mul_col(x, k) }); prop_assert!(e < TOL, "{}", e); }
        { let e = check(&c, move |t, x| { let k = t.constant(ac.clone()); t.mul_col(k, x) }); prop_assert!(e < TOL, "{}", e); }
    }

    #[test]
    fn scalar_ops_and_reductions(a in mat(3, 3, -10.0, 10.0)) {
        { let e = check(&a, |t, x| Ok(t.scale(x, -2.5))); prop_assert!(e < TOL, "{}", e); }
        { let e = check(&a, |t, x| Ok(t.add_scalar(x, 1.5))); prop_assert!(e < TOL, "{}", e); }
        { let e = check(&a, |t, x| Ok(t.transpose(x))); prop_assert!(e < TOL, "{}", e); }
        { let e = check(&a, |t, x| Ok(t.sum_rows(x))); prop_assert!(e < TOL, "{}", e); }
        { let e = check(&a, |t, x| Ok(t.mean(x))); prop_assert!(e < TOL, "{}", e); }
        { let e = check(&a, |t, x| Ok(t.sum(x))); prop_assert!(e < TOL, "{}", e); }
    }

    #[test]
    fn nonlinearities(a in mat(2, 4, -10.0, 10.0), pos in mat(2, 4, 0.5, 10.0)) {
        for f in [Act::Tanh, Act::Sigmoid, Act::Exp, Act::Softplus(0.7), Act::Square] {
            let e = check(&a, move |t, x| Ok(t.act(x, f)));
            prop_assert!(e < TOL, "{f:?}: {e}");
        }
        for f in [Act::Log, Act::XLogX, Act::Relu, Act::Sqrt] {
            let e = check(&pos, move |t, x| Ok(t.act(x, f)));
            prop_assert!(e < TOL, "{f:?}: {e}");
        }
    }

    #[test]
    fn softmax_family(a in mat(3, 5, -10.0, 10.0)) {
        { let e = check(&a, |t, x| Ok(t.softmax(x))); prop_assert!(e < TOL, "{}", e); }
        { let e = check(&a, |t, x| Ok(t.logsumexp(x))); prop_assert!(e < TOL, "{}", e); }
        let targets = [0usize, 4, 2];
        { let e = check(&a, move |t, x| t.cross_entropy(x, &targets)); prop_assert!(e < TOL, "{}", e); }
    }

    #[test]
    fn normalizations(a in mat(3, 6, -10.0, 10.0)) {
        { let e = check(&a, |t, x| Ok(t.layer_norm(x, 1e-5))); prop_assert!(e < TOL, "{}", e); }
        { let e = check(&a, |t, x| Ok(t.rms_norm(x, 1e-5))); prop_assert!(e < TOL, "{}", e); }
    }

    #[test]
    fn grade_concat_and_slice(a in mat(2, 3, -10.0, 10.0), b in mat(2, 2, -10.0, 10.0)) {
        let bc = b.clone();
        { let e = check(&a, move |t, x| { let k = t.constant(bc.clone()); t.concat_cols(&[k, x, x]) }); prop_assert!(e < TOL, "{}", e); }
        { let e = check(&a, |t, x| t.slice_cols(x, 1, 2)); prop_assert!(e < TOL, "{}", e); }
    }

    #[test]
    fn softmax_rows_sum_to_one(a in mat(4, 6, -10.0, 10.0)) {
        let mut t = Tape::new();
        let x = t.constant(a);
        let p = t.softmax(x);
        for i in 0..4 {
            let row = t.value(p).row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn logsumexp_is_shift_invariant(a in mat(3, 5, -10.0, 10.0), c in -50.0f64..50.0) {
        let mut t = Tape::new();
        let x = t.constant(a);
        let xs = t.add_scalar(x, c);
        let l0 = t.logsumexp(x);
        let l1 = t.logsumexp(xs);
        for i in 0..3 {
            let d = t.value(l1).get(i, 0) - t.value(l0).get(i, 0) - c;
            prop_assert!(d.abs() <= 1e-12, "{d}");
        }
    }
}

#[test]
fn central_difference_oracle_on_cubic() {
    // f(x) = Σ x³ has gradient 3x²; central differences carry error h²·x-independent 1·h² per coordinate.
    let theta = Tensor::row_vector(&[0.3, -1.2, 2.0]);
    let numeric = central_difference(|t| t.data().iter().map(|x| x * x * x).sum(), &theta, 1e-4);
    let analytic = theta.map(|x| 3.0 * x * x);
    assert!(max_relative_error(&analytic, &numeric, FD_EPS_ABS) < 1e-7);
}
