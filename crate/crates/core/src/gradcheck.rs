//! Central finite-difference gradient oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Scope, Var};
use crate::data::VideoSample;
use crate::modality::Modality;
use crate::model::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which gradient differences are measured absolutely.
///
/// Central differences at step 1e-5 carry roughly 1e-11·|f| of cancellation
/// noise, so components whose true value is ~0 cannot be compared relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of scalar components compared.
    pub checked: usize,
    /// Where the worst component lives: input or parameter name and flat index.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(tol: f64) -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            worst: None,
            tol,
            passed: true,
        }
    }

    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        let rel = if abs.is_nan() { f64::INFINITY } else { abs / denom };
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if self.worst.is_none() || rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some((label.to_string(), index));
        }
        self.passed = self.max_rel_err < self.tol;
    }
}

fn scalar_of<S: Scalar>(v: &Var<'_, S>) -> Result<f64> {
    let value = v.value();
    if !value.is_scalar() {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item().to_f64_lossy())
}

/// Checks the gradient of a scalar function of several tensor inputs.
pub fn grad_check_many<S, F>(f: F, inputs: &[Tensor<S>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'g> Fn(&'g Graph<S>, &[Var<'g, S>]) -> Result<Var<'g, S>>,
{
    let eval = |xs: &[Tensor<S>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        scalar_of(&f(&g, &vars)?)
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&g, &vars)?;
    scalar_of(&out)?;
    g.backward(out)?;

    let mut report = GradCheckReport::new(tol);
    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    for (n, var) in vars.iter().enumerate() {
        let analytic = var.grad().unwrap_or_else(|| Tensor::zeros(inputs[n].shape().to_vec()));
        for i in 0..inputs[n].len() {
            let orig = inputs[n].data()[i];
            work[n].data_mut()[i] = orig + S::lit(step);
            let plus = eval(&work)?;
            work[n].data_mut()[i] = orig - S::lit(step);
            let minus = eval(&work)?;
            work[n].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(&format!("input{n}"), i, analytic.data()[i].to_f64_lossy(), numeric);
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'g> Fn(Var<'g, S>) -> Result<Var<'g, S>>,
{
    grad_check_many(|_, xs| f(xs[0]), std::slice::from_ref(x), step, tol)
}

/// Checks the gradient of a scalar loss with respect to every scalar of every
/// parameter in `params`.
pub fn grad_check_params<S, F>(f: F, params: &ParamStore<S>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'g> Fn(Scope<'g, S>) -> Result<Var<'g, S>>,
{
    let g = Graph::new();
    let out = f(Scope::new(&g, params))?;
    scalar_of(&out)?;
    g.backward(out)?;
    let grads = g.param_grads();

    let mut report = GradCheckReport::new(tol);
    let mut work = params.clone();
    for id in params.ids() {
        let analytic = grads
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(params.get(id).shape().to_vec()));
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            let mut eval_at = |v: S| -> Result<f64> {
                work.get_mut(id).data_mut()[i] = v;
                let g = Graph::new();
                scalar_of(&f(Scope::new(&g, &work))?)
            };
            let plus = eval_at(orig + S::lit(step))?;
            let minus = eval_at(orig - S::lit(step))?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(params.name(id), i, analytic.data()[i].to_f64_lossy(), numeric);
        }
    }
    Ok(report)
}

/// Checks the training loss of `model` on `sample` against every parameter.
pub fn grad_check_model(model: &Model<f64>, sample: &VideoSample, step: f64, tol: f64) -> Result<GradCheckReport> {
    grad_check_params(
        |scope| {
            let fwd = model.forward_video(&scope, sample)?;
            Ok(model.video_loss(&fwd, sample.label)?.total)
        },
        &model.params,
        step,
        tol,
    )
}

/// Smallest full-model problem: the toy configuration on one random anomalous
/// video of `TOY_SNIPPETS` snippets.
pub const TOY_SNIPPETS: usize = 4;

pub fn toy_problem(seed: u64) -> Result<(Model<f64>, VideoSample)> {
    let config = ModelConfig::toy();
    let dims: Vec<(Modality, usize)> = config.modalities.iter().map(|&m| (m, 3)).collect();
    let model = Model::new(config, &dims, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let features = dims
        .iter()
        .map(|&(m, d)| (m, Tensor::randn(vec![TOY_SNIPPETS, d], 0.0, 1.0, &mut rng)))
        .collect();
    let sample = VideoSample {
        id: "toy".into(),
        features,
        label: true,
        frame_labels: None,
    };
    Ok((model, sample))
}

/// Full-model finite-difference check on [`toy_problem`].
pub fn toy_model_check(seed: u64, tol: f64) -> Result<GradCheckReport> {
    let (model, sample) = toy_problem(seed)?;
    grad_check_model(&model, &sample, DEFAULT_STEP, tol)
}
