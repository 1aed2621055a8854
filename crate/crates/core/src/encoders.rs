//! Unimodal encoders, the global encoder and the MLP regressors.

use rand::Rng;

use crate::attention::{transformer_stack, Linear, TransformerLayerParams};
use crate::autodiff::{ParamStore, Scope, Var};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::scalar::Scalar;

/// Three-layer MLP `width → width/2 → width/4 → 1` with GELU between layers
/// and a sigmoid on the output.
#[derive(Clone, Debug)]
pub struct RegressorParams {
    pub layers: [Linear; 3],
}

impl RegressorParams {
    pub fn init<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, width: usize, rng: &mut R) -> Self {
        let h1 = (width / 2).max(1);
        let h2 = (width / 4).max(1);
        Self {
            layers: [
                Linear::init(store, &format!("{name}.0"), width, h1, true, rng),
                Linear::init(store, &format!("{name}.1"), h1, h2, true, rng),
                Linear::init(store, &format!("{name}.2"), h2, 1, true, rng),
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// Maps `N×width` to `N×1` values in `(0, 1)`.
    pub fn forward<'g, S: Scalar>(&self, scope: &Scope<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let h = self.layers[0].forward(scope, x)?.gelu();
        let h = self.layers[1].forward(scope, h)?.gelu();
        Ok(self.layers[2].forward(scope, h)?.sigmoid())
    }
}

/// Modality-specific projections followed by one transformer stack shared by
/// every modality.
#[derive(Clone, Debug)]
pub struct UnimodalEncoderParams {
    pub projections: Vec<(Modality, Linear)>,
    pub shared: Vec<TransformerLayerParams>,
}

impl UnimodalEncoderParams {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        input_dims: &[(Modality, usize)],
        dim: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let projections = input_dims
            .iter()
            .map(|&(m, d)| (m, Linear::init(store, &format!("unimodal.proj.{m}"), d, dim, true, rng)))
            .collect();
        let shared = (0..layers)
            .map(|l| TransformerLayerParams::init(store, &format!("unimodal.shared.{l}"), dim, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self { projections, shared })
    }

    pub fn projection(&self, modality: Modality) -> Result<&Linear> {
        self.projections
            .iter()
            .find(|(m, _)| *m == modality)
            .map(|(_, l)| l)
            .ok_or_else(|| Error::config(format!("modality {modality} is not configured")))
    }

    /// Encodes a `T×D_m` raw feature matrix into `T×D_E` modality features.
    pub fn encode<'g, S: Scalar>(&self, scope: &Scope<'g, S>, raw: Var<'g, S>, modality: Modality) -> Result<Var<'g, S>> {
        let proj = self.projection(modality)?;
        let shape = raw.shape();
        if shape.len() != 2 || shape[1] != proj.in_dim {
            return Err(Error::dim(format!(
                "{modality} features have shape {shape:?}, expected T×{}",
                proj.in_dim
            )));
        }
        let z = proj.forward(scope, raw)?;
        transformer_stack(scope, z, &self.shared)
    }
}

/// Global transformer over the fused tokens followed by the score regressor.
#[derive(Clone, Debug)]
pub struct GlobalHeadParams {
    pub width: usize,
    pub layers: Vec<TransformerLayerParams>,
    pub regressor: RegressorParams,
}

impl GlobalHeadParams {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        width: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| TransformerLayerParams::init(store, &format!("global.layer.{l}"), width, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            width,
            layers,
            regressor: RegressorParams::init(store, "global.regressor", width, rng),
        })
    }

    /// Scores each of the `T` fused tokens; returns a length-`T` vector in `(0, 1)`.
    pub fn score<'g, S: Scalar>(&self, scope: &Scope<'g, S>, zhat: Var<'g, S>) -> Result<Var<'g, S>> {
        let shape = zhat.shape();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::dim(format!(
                "fused features have shape {shape:?}, global encoder expects T×{}",
                self.width
            )));
        }
        let h = transformer_stack(scope, zhat, &self.layers)?;
        self.regressor.forward(scope, h)?.reshape(vec![shape[0]])
    }
}
