//! Finite-difference checks shared by the gradient tests and the acceptance run.
//!
//! Each group returns `(case, report)` pairs instead of asserting, so callers
//! decide how to report failures.
#![allow(dead_code)]

use msbt::attention::{cross_transformer, transformer_stack, TransformerLayerParams};
use msbt::autodiff::{concat, cosine_matrix, cosine_similarity, layernorm, split, ParamStore, Var};
use msbt::gradcheck::{grad_check, grad_check_many, grad_check_params, GradCheckReport, DEFAULT_STEP};
use msbt::losses::{mil_topk_loss, tcc_loss};
use msbt::tensor::Tensor;
use num_rational::Rational64;
use msbt::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-4;

pub type Checks = Vec<(String, GradCheckReport)>;

pub fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces any output to a scalar with fixed, uneven weights so every entry matters.
fn probe<'g>(v: Var<'g, f64>) -> Result<Var<'g, f64>> {
    let w = Tensor::from_fn(v.shape(), |i| ((i as f64) * 0.7 + 0.3).sin());
    v.mul(v.graph().constant(w)).map(|p| p.sum())
}

pub fn elementwise_binary() -> Result<Checks> {
    let a = rand(&[3, 4], 1);
    let b = rand(&[3, 4], 2);
    let mut out = Vec::new();
    for (name, other) in [("same shape", b), ("row broadcast", rand(&[1, 4], 3)), ("vector broadcast", rand(&[4], 4))] {
        let inputs = [a.clone(), other];
        out.push((format!("add, {name}"), grad_check_many(|_, x| probe(x[0].add(x[1])?), &inputs, DEFAULT_STEP, OP_TOL)?));
        out.push((format!("sub, {name}"), grad_check_many(|_, x| probe(x[0].sub(x[1])?), &inputs, DEFAULT_STEP, OP_TOL)?));
        out.push((format!("mul, {name}"), grad_check_many(|_, x| probe(x[0].mul(x[1])?), &inputs, DEFAULT_STEP, OP_TOL)?));
    }
    let inputs = [a, rand(&[3, 1], 5)];
    out.push(("mul, column broadcast".into(), grad_check_many(|_, x| probe(x[0].mul(x[1])?), &inputs, DEFAULT_STEP, OP_TOL)?));
    Ok(out)
}

pub fn unary() -> Result<Checks> {
    type Op = Box<dyn for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>>>;
    let x = rand(&[3, 5], 6);
    let cases: Vec<(&str, Op)> = vec![
        ("scale", Box::new(|v| probe(v.scale(-1.7)))),
        ("neg", Box::new(|v| probe(v.neg()))),
        ("shift", Box::new(|v| probe(v.shift(0.4)))),
        ("exp", Box::new(|v| probe(v.exp()))),
        ("gelu", Box::new(|v| probe(v.gelu()))),
        ("sigmoid", Box::new(|v| probe(v.sigmoid()))),
        ("sum", Box::new(|v| Ok(v.sum().scale(0.3)))),
        ("mean", Box::new(|v| Ok(v.mean().exp()))),
        ("mean_rows", Box::new(|v| probe(v.mean_rows()?))),
        ("softmax_rows", Box::new(|v| probe(v.softmax_rows()))),
        ("log_softmax_rows", Box::new(|v| probe(v.log_softmax_rows()))),
        ("transpose", Box::new(|v| probe(v.transpose()?))),
        ("reshape", Box::new(|v| probe(v.reshape(vec![5, 3])?))),
        ("narrow rows", Box::new(|v| probe(v.narrow(0, 1, 2)?))),
        ("narrow cols", Box::new(|v| probe(v.narrow(1, 2, 3)?))),
        ("gather", Box::new(|v| probe(v.reshape(vec![15])?.gather(&[3, 0, 14, 3])?))),
        ("split", Box::new(|v| {
            let parts = split(v, 1, &[2, 3])?;
            probe(parts[0])?.add(probe(parts[1])?.scale(2.0))
        })),
    ];
    let mut out = Vec::new();
    for (name, f) in &cases {
        out.push((name.to_string(), grad_check(|v| f(v), &x, DEFAULT_STEP, OP_TOL)?));
    }
    // Inputs kept away from the kinks of log and relu.
    let pos = rand(&[2, 3], 7).map(|v| v.abs() + 0.5);
    out.push(("log".into(), grad_check(|v| probe(v.log()?), &pos, DEFAULT_STEP, OP_TOL)?));
    let x = rand(&[2, 3], 8).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    out.push(("relu".into(), grad_check(|v| probe(v.relu()), &x, DEFAULT_STEP, OP_TOL)?));
    Ok(out)
}

pub fn structural() -> Result<Checks> {
    let mut out = Vec::new();
    let inputs = [rand(&[3, 4], 9), rand(&[4, 2], 10)];
    out.push(("matmul".into(), grad_check_many(|_, x| probe(x[0].matmul(x[1])?), &inputs, DEFAULT_STEP, OP_TOL)?));
    let inputs = [rand(&[2, 3], 11), rand(&[4, 3], 12)];
    out.push(("concat rows".into(), grad_check_many(|_, x| probe(concat(x, 0)?), &inputs, DEFAULT_STEP, OP_TOL)?));
    let inputs = [rand(&[2, 3], 13), rand(&[2, 1], 14)];
    out.push(("concat cols".into(), grad_check_many(|_, x| probe(concat(x, 1)?), &inputs, DEFAULT_STEP, OP_TOL)?));
    let inputs = [rand(&[4, 6], 15), rand(&[6], 16), rand(&[6], 17)];
    out.push((
        "layernorm".into(),
        grad_check_many(|_, x| probe(layernorm(x[0], x[1], x[2], 1e-5)?), &inputs, DEFAULT_STEP, OP_TOL)?,
    ));
    let inputs = [rand(&[3, 5], 18), rand(&[4, 5], 19)];
    out.push((
        "cosine_matrix".into(),
        grad_check_many(|_, x| probe(cosine_matrix(x[0], x[1], 1e-8)?), &inputs, DEFAULT_STEP, OP_TOL)?,
    ));
    let inputs = [rand(&[5], 20), rand(&[5], 21)];
    out.push((
        "cosine_similarity".into(),
        grad_check_many(|_, x| Ok(cosine_similarity(x[0], x[1], 1e-8)?.exp().sum()), &inputs, DEFAULT_STEP, OP_TOL)?,
    ));
    Ok(out)
}

pub fn losses() -> Result<Checks> {
    let mut out = Vec::new();
    let inputs = [rand(&[4, 6], 22), rand(&[4, 6], 23), rand(&[4, 6], 24)];
    out.push(("tcc".into(), grad_check_many(|_, x| tcc_loss(x, 0.5), &inputs, DEFAULT_STEP, OP_TOL)?));
    let logits = rand(&[7], 25);
    for label in [true, false] {
        let r = grad_check(|v| mil_topk_loss(v.sigmoid(), label, 3), &logits, DEFAULT_STEP, OP_TOL)?;
        out.push((format!("mil, label {label}"), r));
    }
    Ok(out)
}

fn layer_store(seed: u64, layers: usize) -> Result<(ParamStore<f64>, Vec<TransformerLayerParams>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = (0..layers)
        .map(|l| TransformerLayerParams::init(&mut store, &format!("l{l}"), 8, 2, &mut rng))
        .collect::<Result<_>>()?;
    Ok((store, params))
}

/// A two-layer transformer and a cross-transformer, checked in their parameters and inputs.
pub fn attention() -> Result<Checks> {
    let mut out = Vec::new();
    let (mut store, layers) = layer_store(26, 2)?;
    let x = store.add("input", rand(&[5, 8], 27));
    let r = grad_check_params(|scope| probe(transformer_stack(&scope, scope.param(x), &layers)?), &store, DEFAULT_STEP, OP_TOL)?;
    out.push(("transformer".into(), r));

    let (mut store, layers) = layer_store(28, 1)?;
    let x = store.add("query input", rand(&[2, 8], 29));
    let y = store.add("key/value input", rand(&[6, 8], 30));
    let r = grad_check_params(
        |scope| probe(cross_transformer(&scope, scope.param(x), scope.param(y), &layers[0])?),
        &store,
        DEFAULT_STEP,
        OP_TOL,
    )?;
    out.push(("cross transformer".into(), r));
    Ok(out)
}

/// Every group above.
pub fn all_op_checks() -> Result<Checks> {
    let mut out = Vec::new();
    for group in [elementwise_binary, unary, structural, losses, attention] {
        out.extend(group()?);
    }
    Ok(out)
}

pub fn failures(checks: &Checks) -> Vec<String> {
    checks
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(name, r)| format!("{name}: max rel err {:.3e}", r.max_rel_err))
        .collect()
}

/// Exact AP by sweeping every distinct threshold from the top: the recall gained
/// at each threshold times the precision there.
pub fn threshold_oracle(scores: &[f64], labels: &[bool]) -> Rational64 {
    let positives = labels.iter().filter(|&&l| l).count() as i64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = Rational64::from_integer(0);
    let mut prev_recall = Rational64::from_integer(0);
    for th in thresholds {
        let (mut tp, mut fp) = (0i64, 0i64);
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= th {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let recall = Rational64::new(tp, positives);
        ap += (recall - prev_recall) * Rational64::new(tp, tp + fp);
        prev_recall = recall;
    }
    ap
}
