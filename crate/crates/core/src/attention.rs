//! Multi-head attention, the pre-norm transformer layer and the cross-attention layer.
//!
//! Layer structure (pre-norm, no positional encoding):
//!
//! ```text
//! ẑ   = MSA(LN₁(z)) + z
//! out = FFN(LN₂(ẑ)) + ẑ,   FFN(x) = GELU(x·W₁ + b₁)·W₂ + b₂
//! ```
//!
//! The cross layer uses the same structure with queries from `x` and keys and
//! values from `y`; the residual stream follows `x`.

use rand::Rng;

use crate::autodiff::{concat, layernorm, ParamId, ParamStore, Scope, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Feed-forward width as a multiple of the model width.
pub const FF_MULTIPLIER: usize = 4;

/// Affine map `x·W (+ b)` applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in `±1/√in_dim`, bias zero.
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(vec![in_dim, out_dim], bound, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g, S: Scalar>(&self, scope: &Scope<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let y = x.matmul(scope.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(scope.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<'g, S: Scalar>(&self, scope: &Scope<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        layernorm(x, scope.param(self.gamma), scope.param(self.beta), S::lit(LAYERNORM_EPS))
    }
}

/// Parameters of one transformer layer.
///
/// The per-head query/key/value projections are stored side by side: head `h`
/// owns columns `[h·d_h, (h+1)·d_h)` of `wq`, `wk` and `wv`, with `d_h = dim / heads`.
#[derive(Clone, Debug)]
pub struct TransformerLayerParams {
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl TransformerLayerParams {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "{name}: width {dim} is not divisible by {heads} heads"
            )));
        }
        let ff_dim = FF_MULTIPLIER * dim;
        let bound = 1.0 / (dim as f64).sqrt();
        let mut proj = |suffix: &str, rng: &mut R| {
            store.add(format!("{name}.attn.{suffix}"), Tensor::uniform(vec![dim, dim], bound, rng))
        };
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        let wo = proj("wo", rng);
        let ff1 = Linear::init(store, &format!("{name}.ffn.0"), dim, ff_dim, true, rng);
        let ff2 = Linear::init(store, &format!("{name}.ffn.1"), ff_dim, dim, true, rng);
        Ok(Self {
            dim,
            heads,
            ff_dim,
            wq,
            wk,
            wv,
            wo,
            ff1,
            ff2,
            ln1: LayerNormParams::init(store, &format!("{name}.ln1"), dim),
            ln2: LayerNormParams::init(store, &format!("{name}.ln2"), dim),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn check_width<S: Scalar>(&self, what: &str, v: &Var<'_, S>) -> Result<()> {
        let shape = v.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::dim(format!(
                "{what} has shape {shape:?}, layer expects N×{}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Per-head attention weights `softmax(q_h k_hᵀ / √d_h)` for already-normalized
/// query and key/value sources.
pub fn attention_weights<'g, S: Scalar>(
    scope: &Scope<'g, S>,
    q_src: Var<'g, S>,
    kv_src: Var<'g, S>,
    p: &TransformerLayerParams,
) -> Result<Vec<Var<'g, S>>> {
    let q = q_src.matmul(scope.param(p.wq))?;
    let k = kv_src.matmul(scope.param(p.wk))?;
    let dh = p.head_dim();
    let scale = S::one() / S::from_usize_lossy(dh).sqrt();
    (0..p.heads)
        .map(|h| {
            let qh = q.narrow(1, h * dh, dh)?;
            let kh = k.narrow(1, h * dh, dh)?;
            Ok(qh.matmul(kh.transpose()?)?.scale(scale).softmax_rows())
        })
        .collect()
}

/// Multi-head attention with queries from `q_src` and keys/values from
/// `kv_src`, followed by the shared output projection. No residual.
pub fn multi_head_attention<'g, S: Scalar>(
    scope: &Scope<'g, S>,
    q_src: Var<'g, S>,
    kv_src: Var<'g, S>,
    p: &TransformerLayerParams,
) -> Result<Var<'g, S>> {
    let weights = attention_weights(scope, q_src, kv_src, p)?;
    let v = kv_src.matmul(scope.param(p.wv))?;
    let dh = p.head_dim();
    let heads = weights
        .into_iter()
        .enumerate()
        .map(|(h, a)| a.matmul(v.narrow(1, h * dh, dh)?))
        .collect::<Result<Vec<_>>>()?;
    concat(&heads, 1)?.matmul(scope.param(p.wo))
}

fn feed_forward_residual<'g, S: Scalar>(
    scope: &Scope<'g, S>,
    zhat: Var<'g, S>,
    p: &TransformerLayerParams,
) -> Result<Var<'g, S>> {
    let h = p.ln2.forward(scope, zhat)?;
    let h = p.ff1.forward(scope, h)?.gelu();
    p.ff2.forward(scope, h)?.add(zhat)
}

/// Pre-norm self-attention transformer layer over the rows of `z` (`N×D`).
pub fn transformer_layer<'g, S: Scalar>(
    scope: &Scope<'g, S>,
    z: Var<'g, S>,
    p: &TransformerLayerParams,
) -> Result<Var<'g, S>> {
    p.check_width("transformer input", &z)?;
    let h = p.ln1.forward(scope, z)?;
    let zhat = multi_head_attention(scope, h, h, p)?.add(z)?;
    feed_forward_residual(scope, zhat, p)
}

/// Cross-attention transformer layer: `x` (`M×D`) attends to `y` (`N×D`).
///
/// Both streams are normalized with the layer's first layer norm; the output has `M` rows.
pub fn cross_transformer<'g, S: Scalar>(
    scope: &Scope<'g, S>,
    x: Var<'g, S>,
    y: Var<'g, S>,
    p: &TransformerLayerParams,
) -> Result<Var<'g, S>> {
    p.check_width("cross-transformer query input", &x)?;
    p.check_width("cross-transformer key/value input", &y)?;
    let hx = p.ln1.forward(scope, x)?;
    let hy = p.ln1.forward(scope, y)?;
    let zhat = multi_head_attention(scope, hx, hy, p)?.add(x)?;
    feed_forward_residual(scope, zhat, p)
}

/// Applies a stack of self-attention layers in order.
pub fn transformer_stack<'g, S: Scalar>(
    scope: &Scope<'g, S>,
    z: Var<'g, S>,
    layers: &[TransformerLayerParams],
) -> Result<Var<'g, S>> {
    layers.iter().try_fold(z, |z, p| transformer_layer(scope, z, p))
}
