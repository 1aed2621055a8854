//! Multi-scale bottleneck fusion of ordered modality pairs.
//!
//! For a pair `(a, b)` and layer `l` with bottleneck tokens `B_l`:
//!
//! 1. `[A_{l+1} ‖ B̃_l] = Transformer_l([A_l ‖ B_l])`: tokens gather from `a`;
//! 2. `[Z_{l+1} ‖ _] = Transformer'_l([Z_l ‖ B̃_l])`: tokens deliver to `b`;
//! 3. `B_{l+1} = CrossTransformer_l(F_{l+1}, B̃_l)` with fresh learnable tokens
//!    `F_{l+1}` of half the size.
//!
//! The fused feature of `(a, b)` is the `b` stream after the last layer.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;

use crate::attention::{cross_transformer, transformer_layer, TransformerLayerParams};
use crate::autodiff::{concat, split, ParamId, ParamStore, Scope, Var};
use crate::error::{Error, Result};
use crate::modality::{ordered_pairs, Modality, Pair};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian the bottleneck tokens start from.
pub const TOKEN_INIT_STD: f64 = 0.15;

/// Halving schedule `[n1, ⌊n1/2⌋, …]` of length `layers`.
pub fn token_schedule(n1: usize, layers: usize) -> Result<Vec<usize>> {
    if layers == 0 {
        return Err(Error::config("the fusion stack needs at least one layer"));
    }
    if n1 == 0 {
        return Err(Error::config("layer 1 would have 0 bottleneck tokens"));
    }
    let mut schedule = Vec::with_capacity(layers);
    let mut n = n1;
    for l in 1..=layers {
        if n == 0 {
            return Err(Error::config(format!(
                "halving {n1} tokens leaves layer {l} of {layers} with 0 bottleneck tokens"
            )));
        }
        schedule.push(n);
        n /= 2;
    }
    Ok(schedule)
}

/// Constant schedule `[n, n, …]` used by the fixed-token ablation.
pub fn fixed_schedule(n: usize, layers: usize) -> Result<Vec<usize>> {
    if layers == 0 || n == 0 {
        return Err(Error::config(format!(
            "fixed schedule needs ≥1 token and ≥1 layer, got {n} tokens over {layers} layers"
        )));
    }
    Ok(vec![n; layers])
}

/// Parameters of the fusion stack of one ordered pair.
#[derive(Clone, Debug)]
pub struct PairFusionParams {
    pub pair: Pair,
    pub schedule: Vec<usize>,
    /// Layers where the tokens attend jointly with the source stream.
    pub gather: Vec<TransformerLayerParams>,
    /// Layers where the target stream attends jointly with the refined tokens.
    pub deliver: Vec<TransformerLayerParams>,
    /// Token hand-over between consecutive layers; empty when disabled.
    pub cross: Vec<TransformerLayerParams>,
    pub initial_tokens: ParamId,
    /// Fresh tokens entering layers `2..=L`.
    pub fresh_tokens: Vec<ParamId>,
}

impl PairFusionParams {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        pair: Pair,
        schedule: &[usize],
        dim: usize,
        heads: usize,
        cross_transformer: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let prefix = format!("fusion.{}", pair.label());
        let layers = schedule.len();
        let mut gather = Vec::with_capacity(layers);
        let mut deliver = Vec::with_capacity(layers);
        for l in 0..layers {
            gather.push(TransformerLayerParams::init(store, &format!("{prefix}.gather.{l}"), dim, heads, rng)?);
            deliver.push(TransformerLayerParams::init(store, &format!("{prefix}.deliver.{l}"), dim, heads, rng)?);
        }
        let cross = if cross_transformer {
            (0..layers.saturating_sub(1))
                .map(|l| TransformerLayerParams::init(store, &format!("{prefix}.cross.{l}"), dim, heads, rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let initial_tokens = store.add(
            format!("{prefix}.tokens.0"),
            Tensor::randn(vec![schedule[0], dim], 0.0, TOKEN_INIT_STD, rng),
        );
        let fresh_tokens = schedule[1..]
            .iter()
            .enumerate()
            .map(|(l, &n)| {
                store.add(
                    format!("{prefix}.tokens.{}", l + 1),
                    Tensor::randn(vec![n, dim], 0.0, TOKEN_INIT_STD, rng),
                )
            })
            .collect();
        Ok(Self {
            pair,
            schedule: schedule.to_vec(),
            gather,
            deliver,
            cross,
            initial_tokens,
            fresh_tokens,
        })
    }
}

/// Bottleneck tokens as they evolve through one pair's fusion stack.
#[derive(Clone, Debug)]
pub struct BottleneckState<'g, S> {
    pub schedule: Vec<usize>,
    /// Tokens entering each layer.
    pub tokens_per_layer: Vec<Var<'g, S>>,
    /// Refined tokens of the last layer.
    pub final_tokens: Var<'g, S>,
}

#[derive(Clone, Debug)]
pub struct PairFusion<'g, S> {
    pub fused: Var<'g, S>,
    pub state: BottleneckState<'g, S>,
}

/// Fuses the source stream `za` into the target stream `zb` (both `T×D`).
pub fn fuse_pair<'g, S: Scalar>(
    scope: &Scope<'g, S>,
    za: Var<'g, S>,
    zb: Var<'g, S>,
    p: &PairFusionParams,
) -> Result<PairFusion<'g, S>> {
    let (sa, sb) = (za.shape(), zb.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::dim(format!(
            "pair {} fuses {sa:?} with {sb:?}; both must be T×D with equal T",
            p.pair
        )));
    }
    let t = sa[0];
    let layers = p.schedule.len();
    let mut a = za;
    let mut b = zb;
    let mut tokens = scope.param(p.initial_tokens);
    let mut tokens_per_layer = Vec::with_capacity(layers);
    let mut refined = tokens;

    for l in 0..layers {
        let n = p.schedule[l];
        tokens_per_layer.push(tokens);

        let joint = transformer_layer(scope, concat(&[a, tokens], 0)?, &p.gather[l])?;
        let parts = split(joint, 0, &[t, n])?;
        a = parts[0];
        refined = parts[1];

        let joint = transformer_layer(scope, concat(&[b, refined], 0)?, &p.deliver[l])?;
        b = split(joint, 0, &[t, n])?[0];

        if l + 1 < layers {
            let fresh = scope.param(p.fresh_tokens[l]);
            tokens = match p.cross.get(l) {
                Some(cross) => cross_transformer(scope, fresh, refined, cross)?,
                None => fresh,
            };
        }
    }

    Ok(PairFusion {
        fused: b,
        state: BottleneckState {
            schedule: p.schedule.clone(),
            tokens_per_layer,
            final_tokens: refined,
        },
    })
}

/// Fusion parameters for every ordered pair of the configured modalities.
#[derive(Clone, Debug)]
pub struct MsbtParams {
    pub schedule: Vec<usize>,
    pub pairs: Vec<PairFusionParams>,
}

impl MsbtParams {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        modalities: &[Modality],
        schedule: &[usize],
        dim: usize,
        heads: usize,
        cross_transformer: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if modalities.len() < 2 {
            return Err(Error::config(format!(
                "pairwise fusion needs at least 2 modalities, got {}",
                modalities.len()
            )));
        }
        let pairs = ordered_pairs(modalities)
            .into_iter()
            .map(|pair| PairFusionParams::init(store, pair, schedule, dim, heads, cross_transformer, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            schedule: schedule.to_vec(),
            pairs,
        })
    }
}

/// Fused features of all ordered pairs, in the fixed pair order.
#[derive(Clone, Debug)]
pub struct FusedPairSet<'g, S> {
    pub pairs: Vec<Pair>,
    pub fused: Vec<Var<'g, S>>,
    pub final_bottlenecks: Vec<Var<'g, S>>,
}

impl<'g, S: Scalar> FusedPairSet<'g, S> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, pair: Pair) -> Option<(Var<'g, S>, Var<'g, S>)> {
        self.pairs
            .iter()
            .position(|&p| p == pair)
            .map(|i| (self.fused[i], self.final_bottlenecks[i]))
    }
}

static WARNED_TOKENS_VS_T: AtomicBool = AtomicBool::new(false);

/// Runs [`fuse_pair`] for every ordered pair. `features` maps each configured
/// modality to its `T×D` encoding.
pub fn fuse_all_pairs<'g, S: Scalar>(
    scope: &Scope<'g, S>,
    features: &[(Modality, Var<'g, S>)],
    params: &MsbtParams,
) -> Result<FusedPairSet<'g, S>> {
    if features.len() < 2 {
        return Err(Error::config(format!(
            "pairwise fusion needs at least 2 modalities, got {}",
            features.len()
        )));
    }
    let lookup = |m: Modality| {
        features
            .iter()
            .find(|(fm, _)| *fm == m)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::contract(format!("missing {m} features for fusion")))
    };
    if let (Some(&n1), Some((_, first))) = (params.schedule.first(), features.first()) {
        let t = first.shape()[0];
        if n1 >= t && !WARNED_TOKENS_VS_T.swap(true, Ordering::Relaxed) {
            log::warn!("{n1} bottleneck tokens for a {t}-snippet video; the bottleneck is meant to be much smaller than T");
        }
    }
    let mut set = FusedPairSet {
        pairs: Vec::with_capacity(params.pairs.len()),
        fused: Vec::with_capacity(params.pairs.len()),
        final_bottlenecks: Vec::with_capacity(params.pairs.len()),
    };
    for p in &params.pairs {
        let out = fuse_pair(scope, lookup(p.pair.source)?, lookup(p.pair.target)?, p)?;
        set.pairs.push(p.pair);
        set.fused.push(out.fused);
        set.final_bottlenecks.push(out.state.final_tokens);
    }
    Ok(set)
}
