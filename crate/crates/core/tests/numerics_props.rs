//! Reverse-mode gradients of every primitive against central differences.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajmoe::numerics::{
    grad_check, GradCheckConfig, NumericsError, Objective, ParamStore, Tape, Tensor, Var,
};

type Build = fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>;

/// Loss = sum(primitive(inputs) * fixed random weights), so every output entry
/// contributes with a distinct coefficient.
struct Weighted {
    build: Build,
    weights: Vec<f64>,
}

impl Objective for Weighted {
    fn record(&self, tape: &mut Tape, _: &ParamStore, vars: &[Var]) -> Result<Var, NumericsError> {
        let out = (self.build)(tape, vars)?;
        let shape = tape.value(out).shape().to_vec();
        let w = tape.leaf(Tensor::new(shape, self.weights[..tape.value(out).len()].to_vec())?);
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    }
}

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
}

fn sample(rng: &mut ChaCha8Rng, n: usize, domain: Domain) -> Vec<f64> {
    (0..n)
        .map(|_| match domain {
            Domain::Any => rng.random_range(-2.0..2.0),
            Domain::Positive => rng.random_range(0.2..3.0),
        })
        .collect()
}

fn check_primitive(name: &str, build: Build, shapes: &[&[usize]], domain: Domain) {
    let mut runner = TestRunner::new(Config {
        cases: 100,
        failure_persistence: None,
        rng_seed: proptest::test_runner::RngSeed::Fixed(7),
        ..Config::default()
    });
    runner
        .run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ParamStore::new();
            for (i, s) in shapes.iter().enumerate() {
                let n = s.iter().product();
                params.push(format!("in{i}"), Tensor::new(s.to_vec(), sample(&mut rng, n, domain)).unwrap());
            }
            let weights = sample(&mut rng, 64, Domain::Any);
            let objective = Weighted { build, weights };
            let report = grad_check(&objective, &mut params, &GradCheckConfig::default()).unwrap();
            prop_assert!(report.passed(), "{name}: {:?}", report.failures);
            Ok(())
        })
        .unwrap();
}

#[test]
fn matmul_matches_finite_differences() {
    check_primitive("matmul", |t, v| t.matmul(v[0], v[1]), &[&[3, 4], &[4, 2]], Domain::Any);
    check_primitive("matmul3d", |t, v| t.matmul(v[0], v[1]), &[&[2, 2, 3], &[3, 2]], Domain::Any);
}

#[test]
fn elementwise_binary_matches_finite_differences() {
    check_primitive("add", |t, v| t.add(v[0], v[1]), &[&[2, 3], &[3]], Domain::Any);
    check_primitive("sub", |t, v| t.sub(v[0], v[1]), &[&[2, 3], &[2, 3]], Domain::Any);
    check_primitive("mul", |t, v| t.mul(v[0], v[1]), &[&[2, 3], &[3]], Domain::Any);
    check_primitive("div", |t, v| t.div(v[0], v[1]), &[&[2, 3], &[3]], Domain::Positive);
    check_primitive("minimum", |t, v| t.minimum(v[0], v[1]), &[&[5], &[5]], Domain::Any);
}

#[test]
fn unary_matches_finite_differences() {
    check_primitive("relu", |t, v| Ok(t.relu(v[0])), &[&[8]], Domain::Any);
    check_primitive("abs", |t, v| Ok(t.abs(v[0])), &[&[8]], Domain::Any);
    check_primitive("exp", |t, v| Ok(t.exp(v[0])), &[&[6]], Domain::Any);
    check_primitive("log", |t, v| Ok(t.log(v[0])), &[&[6]], Domain::Positive);
    check_primitive("sigmoid", |t, v| Ok(t.sigmoid(v[0])), &[&[6]], Domain::Any);
    check_primitive("softplus", |t, v| Ok(t.softplus(v[0])), &[&[6]], Domain::Any);
    check_primitive("recip", |t, v| Ok(t.recip(v[0])), &[&[6]], Domain::Positive);
    check_primitive("clamp", |t, v| Ok(t.clamp(v[0], -0.5, 0.7)), &[&[8]], Domain::Any);
    check_primitive("scale", |t, v| Ok(t.scale(v[0], -1.7)), &[&[4]], Domain::Any);
    check_primitive("add_scalar", |t, v| Ok(t.add_scalar(v[0], 3.0)), &[&[4]], Domain::Any);
}

#[test]
fn normalisations_match_finite_differences() {
    check_primitive("layer_norm", |t, v| Ok(t.layer_norm(v[0], 1e-5)), &[&[3, 5]], Domain::Any);
    check_primitive("softmax", |t, v| Ok(t.softmax(v[0])), &[&[3, 4]], Domain::Any);
}

#[test]
fn reductions_match_finite_differences() {
    check_primitive("sum", |t, v| Ok(t.sum(v[0])), &[&[2, 3]], Domain::Any);
    check_primitive("mean", |t, v| Ok(t.mean(v[0])), &[&[2, 3]], Domain::Any);
    check_primitive("row_sums", |t, v| Ok(t.row_sums(v[0])), &[&[3, 4]], Domain::Any);
    check_primitive("col_sums", |t, v| Ok(t.col_sums(v[0])), &[&[3, 4]], Domain::Any);
}

#[test]
fn indexing_matches_finite_differences() {
    check_primitive("transpose", |t, v| t.transpose(v[0]), &[&[3, 4]], Domain::Any);
    check_primitive("scale_rows", |t, v| t.scale_rows(v[0], v[1]), &[&[3, 4], &[3]], Domain::Any);
    check_primitive("gather_rows", |t, v| t.gather_rows(v[0], &[2, 0, 2]), &[&[3, 4]], Domain::Any);
    check_primitive("scatter_rows", |t, v| t.scatter_rows(v[0], &[4, 1, 4], 5), &[&[3, 2]], Domain::Any);
    check_primitive("gather", |t, v| t.gather(v[0], &[5, 0, 5, 3]), &[&[2, 3]], Domain::Any);
    check_primitive("slice_cols", |t, v| t.slice_cols(v[0], 1, 2), &[&[3, 4]], Domain::Any);
    check_primitive("concat_cols", |t, v| t.concat_cols(&[v[0], v[1], v[0]]), &[&[3, 2], &[3, 1]], Domain::Any);
    check_primitive("reshape", |t, v| t.reshape(v[0], vec![6, 2]), &[&[3, 4]], Domain::Any);
}

fn grads_of(build: impl Fn(&mut Tape, Var) -> Var, x: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = build(&mut tape, v);
    tape.backward(loss).unwrap().get(v).unwrap().to_vec()
}

fn f_loss(t: &mut Tape, x: Var) -> Var {
    let s = t.softmax(x);
    let l = t.log(s);
    t.sum(l)
}

fn g_loss(t: &mut Tape, x: Var) -> Var {
    let e = t.exp(x);
    let m = t.mul(e, x).unwrap();
    t.mean(m)
}

proptest! {
    #![proptest_config(Config { cases: 100, failure_persistence: None, ..Config::default() })]

    #[test]
    fn backward_is_linear(
        xs in prop::collection::vec(-2.0f64..2.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let x = Tensor::vector(xs);
        let gf = grads_of(f_loss, &x);
        let gg = grads_of(g_loss, &x);
        let combined = grads_of(|t, v| {
            let f = f_loss(t, v);
            let g = g_loss(t, v);
            let fa = t.scale(f, a);
            let gb = t.scale(g, b);
            t.add(fa, gb).unwrap()
        }, &x);
        for k in 0..combined.len() {
            let expected = a * gf[k] + b * gg[k];
            prop_assert!((combined[k] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }
}

#[test]
fn identical_inputs_give_bit_identical_values_and_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::matrix(4, 5, sample(&mut rng, 20, Domain::Any)).unwrap();
        let w = Tensor::matrix(5, 3, sample(&mut rng, 15, Domain::Any)).unwrap();
        let mut tape = Tape::new();
        let vx = tape.leaf(x);
        let vw = tape.leaf(w);
        let h = tape.matmul(vx, vw).unwrap();
        let n = tape.layer_norm(h, 1e-5);
        let r = tape.relu(n);
        let s = tape.softmax(r);
        let loss = tape.mean(s);
        let g = tape.backward(loss).unwrap();
        (
            tape.scalar_value(loss).unwrap().to_bits(),
            g.get(vw).unwrap().clone(),
            g.get(vx).unwrap().clone(),
        )
    };
    let (v1, gw1, gx1) = run();
    let (v2, gw2, gx2) = run();
    assert_eq!(v1, v2);
    assert!(gw1.bit_eq(&gw2) && gx1.bit_eq(&gx2));
}

#[test]
fn random_two_layer_mlp_matches_finite_differences() {
    struct Mlp {
        x: Tensor,
        y: Tensor,
    }
    impl Objective for Mlp {
        fn record(&self, t: &mut Tape, _: &ParamStore, v: &[Var]) -> Result<Var, NumericsError> {
            let x = t.leaf(self.x.clone());
            let y = t.leaf(self.y.clone());
            let h = t.matmul(x, v[0])?;
            let h = t.add(h, v[1])?;
            let h = t.relu(h);
            let o = t.matmul(h, v[2])?;
            let o = t.add(o, v[3])?;
            let d = t.sub(o, y)?;
            let sq = t.mul(d, d)?;
            Ok(t.mean(sq))
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamStore::new();
    params.push("w1", Tensor::matrix(4, 8, sample(&mut rng, 32, Domain::Any)).unwrap());
    params.push("b1", Tensor::vector(sample(&mut rng, 8, Domain::Any)));
    params.push("w2", Tensor::matrix(8, 2, sample(&mut rng, 16, Domain::Any)).unwrap());
    params.push("b2", Tensor::vector(sample(&mut rng, 2, Domain::Any)));
    let mlp = Mlp {
        x: Tensor::matrix(5, 4, sample(&mut rng, 20, Domain::Any)).unwrap(),
        y: Tensor::matrix(5, 2, sample(&mut rng, 10, Domain::Any)).unwrap(),
    };
    let report = grad_check(&mlp, &mut params, &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    assert_eq!(report.checked + report.skipped_kinks, 32 + 8 + 16 + 2);
}
