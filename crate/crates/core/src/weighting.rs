//! Bottleneck token-based weighting of the fused pair features.

use rand::Rng;

use crate::attention::{transformer_stack, TransformerLayerParams};
use crate::autodiff::{concat, ParamStore, Scope, Var};
use crate::encoders::RegressorParams;
use crate::error::{Error, Result};
use crate::fusion::FusedPairSet;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct WeightHeadParams {
    pub layers: Vec<TransformerLayerParams>,
    pub regressor: RegressorParams,
}

impl WeightHeadParams {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        dim: usize,
        heads: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::config("the weighting transformer needs at least one layer"));
        }
        let layers = (0..layers)
            .map(|l| TransformerLayerParams::init(store, &format!("weighting.layer.{l}"), dim, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            regressor: RegressorParams::init(store, "weighting.regressor", dim, rng),
        })
    }
}

/// One weight in `(0, 1)` per fused pair, from the stacked final bottleneck tokens.
///
/// The tokens of all pairs run through the weighting transformer together;
/// each pair's block is then mean-pooled and scored by the regressor.
pub fn compute_weights<'g, S: Scalar>(
    scope: &Scope<'g, S>,
    fps: &FusedPairSet<'g, S>,
    params: &WeightHeadParams,
) -> Result<Var<'g, S>> {
    if fps.final_bottlenecks.len() != fps.pairs.len() || fps.is_empty() {
        return Err(Error::contract(format!(
            "{} pairs but {} final token sets",
            fps.pairs.len(),
            fps.final_bottlenecks.len()
        )));
    }
    let block = fps.final_bottlenecks[0].shape();
    if let Some((i, _)) = fps
        .final_bottlenecks
        .iter()
        .enumerate()
        .find(|(_, v)| v.shape() != block)
    {
        return Err(Error::contract(format!(
            "final tokens of pair {} differ in shape from {block:?}",
            fps.pairs[i]
        )));
    }
    let n = block[0];
    let stacked = concat(&fps.final_bottlenecks, 0)?;
    let h = transformer_stack(scope, stacked, &params.layers)?;
    let pooled = (0..fps.len())
        .map(|i| h.narrow(0, i * n, n)?.mean_rows())
        .collect::<Result<Vec<_>>>()?;
    let w = params.regressor.forward(scope, concat(&pooled, 0)?)?;
    w.reshape(vec![fps.len()])
}

/// Each fused feature scaled by its weight, in pair order.
pub fn weighted_pairs<'g, S: Scalar>(fps: &FusedPairSet<'g, S>, w: Var<'g, S>) -> Result<Vec<Var<'g, S>>> {
    let ws = w.shape();
    if ws.iter().product::<usize>() != fps.len() {
        return Err(Error::dim(format!(
            "{} weights for {} fused pairs",
            ws.iter().product::<usize>(),
            fps.len()
        )));
    }
    fps.fused
        .iter()
        .enumerate()
        .map(|(i, z)| z.mul(w.narrow(0, i, 1)?))
        .collect()
}

/// `[w₁·Z¹ ‖ … ‖ w_N·Zᴺ]` along the feature axis, `T×(N·D)`.
pub fn weighted_concat<'g, S: Scalar>(fps: &FusedPairSet<'g, S>, w: Var<'g, S>) -> Result<Var<'g, S>> {
    concat(&weighted_pairs(fps, w)?, 1)
}

/// Unweighted `[Z¹ ‖ … ‖ Zᴺ]`.
pub fn plain_concat<'g, S: Scalar>(fps: &FusedPairSet<'g, S>) -> Result<Var<'g, S>> {
    concat(&fps.fused, 1)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Graph;
    use crate::modality::{ordered_pairs, Modality};
    use crate::tensor::Tensor;

    fn fake_set<'g>(g: &'g Graph<f64>, t: usize, d: usize, rng: &mut ChaCha8Rng) -> FusedPairSet<'g, f64> {
        let pairs = ordered_pairs(&Modality::ALL);
        FusedPairSet {
            fused: pairs.iter().map(|_| g.constant(Tensor::uniform(vec![t, d], 1.0, rng))).collect(),
            final_bottlenecks: pairs.iter().map(|_| g.constant(Tensor::uniform(vec![2, d], 1.0, rng))).collect(),
            pairs,
        }
    }

    #[test]
    fn unit_weights_reduce_to_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g = Graph::new();
        let fps = fake_set(&g, 4, 8, &mut rng);
        let ones = g.constant(Tensor::ones(vec![6]));
        let a = weighted_concat(&fps, ones).unwrap().value();
        assert_eq!(a, plain_concat(&fps).unwrap().value());
        assert_eq!(a.shape(), &[4, 48]);
    }

    #[test]
    fn zero_weight_zeroes_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let g = Graph::new();
        let fps = fake_set(&g, 3, 8, &mut rng);
        let w = g.constant(Tensor::vector(vec![1.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap());
        let z = weighted_concat(&fps, w).unwrap().value();
        for r in 0..3 {
            assert!(z.row(r)[8..16].iter().all(|&v| v == 0.0));
        }
        let short = g.constant(Tensor::ones(vec![5]));
        assert!(matches!(weighted_concat(&fps, short), Err(Error::Dimension(_))));
    }

    #[test]
    fn weights_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut store = ParamStore::new();
        let head = WeightHeadParams::init(&mut store, 8, 4, 1, &mut rng).unwrap();
        let g = Graph::new();
        let scope = Scope::new(&g, &store);
        let fps = fake_set(&g, 3, 8, &mut rng);
        let w = compute_weights(&scope, &fps, &head).unwrap().value();
        assert_eq!(w.shape(), &[6]);
        assert!(w.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
