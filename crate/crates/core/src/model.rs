//! Model configuration and end-to-end assembly of one video's forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Scope, Var};
use crate::data::VideoSample;
use crate::encoders::{GlobalHeadParams, UnimodalEncoderParams};
use crate::error::{Error, Result};
use crate::fusion::{fixed_schedule, fuse_all_pairs, token_schedule, FusedPairSet, MsbtParams};
use crate::losses::{mil_topk_loss, tcc_loss, total_loss, LossConfig};
use crate::modality::{ordered_pairs, Modality};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::weighting::{compute_weights, plain_concat, weighted_pairs, WeightHeadParams};
use crate::autodiff::concat;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub modalities: Vec<Modality>,
    /// Encoded feature width `D_E`.
    pub dim: usize,
    pub heads: usize,
    pub unimodal_layers: usize,
    pub fusion_layers: usize,
    /// Bottleneck tokens entering the first fusion layer.
    pub bottleneck_tokens: usize,
    pub weight_layers: usize,
    pub global_layers: usize,
    pub loss: LossConfig,
    /// Pass tokens between fusion layers with a cross-attention layer.
    pub cross_transformer: bool,
    /// Scale fused pairs by bottleneck-token weights before concatenation.
    pub weighting: bool,
    /// Keep this many tokens at every fusion layer instead of halving.
    pub fixed_tokens: Option<usize>,
    /// Include the contrast term in the training objective.
    pub tcc: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: Modality::ALL.to_vec(),
            dim: 128,
            heads: 4,
            unimodal_layers: 1,
            fusion_layers: 5,
            bottleneck_tokens: 16,
            weight_layers: 1,
            global_layers: 4,
            loss: LossConfig::default(),
            cross_transformer: true,
            weighting: true,
            fixed_tokens: None,
            tcc: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model used by the synthetic experiments.
    pub fn reduced() -> Self {
        Self {
            dim: 16,
            fusion_layers: 3,
            bottleneck_tokens: 4,
            global_layers: 2,
            ..Self::default()
        }
    }

    /// Smallest configuration, used for full-model gradient checks.
    pub fn toy() -> Self {
        Self {
            modalities: vec![Modality::Rgb, Modality::Audio],
            dim: 8,
            fusion_layers: 2,
            bottleneck_tokens: 2,
            global_layers: 1,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "reduced" => Ok(Self::reduced()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::config(format!("unknown preset `{other}` (default, reduced, toy)"))),
        }
    }

    /// Bottleneck token count per fusion layer.
    pub fn schedule(&self) -> Result<Vec<usize>> {
        match self.fixed_tokens {
            Some(n) => fixed_schedule(n, self.fusion_layers),
            None => token_schedule(self.bottleneck_tokens, self.fusion_layers),
        }
    }

    /// Number of ordered fusion pairs `M(M−1)`.
    pub fn num_pairs(&self) -> usize {
        let m = self.modalities.len();
        m * m.saturating_sub(1)
    }

    pub fn fused_width(&self) -> usize {
        self.num_pairs() * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.len() < 2 {
            return Err(Error::config(format!(
                "at least 2 modalities are required, got {}",
                self.modalities.len()
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} must be a positive multiple of {} heads",
                self.dim, self.heads
            )));
        }
        if self.weight_layers == 0 {
            return Err(Error::config("the weighting transformer needs at least one layer"));
        }
        self.loss.validate()?;
        self.schedule().map(|_| ())
    }
}

/// All parameters of the detector plus the structure that addresses them.
#[derive(Clone, Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub input_dims: Vec<(Modality, usize)>,
    pub params: ParamStore<S>,
    pub encoder: UnimodalEncoderParams,
    pub fusion: MsbtParams,
    pub weighting: Option<WeightHeadParams>,
    pub head: GlobalHeadParams,
}

/// Everything one forward pass produces for a video.
#[derive(Clone, Debug)]
pub struct VideoForward<'g, S> {
    /// Per-snippet anomaly scores, length `T`.
    pub scores: Var<'g, S>,
    pub fused: FusedPairSet<'g, S>,
    /// Pair weights, absent when weighting is disabled.
    pub weights: Option<Var<'g, S>>,
    /// Per-pair features entering the contrast loss (weighted when weighting is on).
    pub weighted_pairs: Vec<Var<'g, S>>,
    /// Concatenated fused feature, `T×(N·D_E)`.
    pub zhat: Var<'g, S>,
}

#[derive(Clone, Copy, Debug)]
pub struct VideoLoss<'g, S> {
    pub mil: Var<'g, S>,
    pub tcc: Var<'g, S>,
    /// Training objective: `mil + λ·tcc`, or `mil` alone when the contrast term is disabled.
    pub total: Var<'g, S>,
}

impl<S: Scalar> Model<S> {
    /// Initializes a model deterministically from `seed`.
    pub fn new(config: ModelConfig, input_dims: &[(Modality, usize)], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut dims = Vec::with_capacity(config.modalities.len());
        for &m in &config.modalities {
            let d = input_dims
                .iter()
                .find(|(im, _)| *im == m)
                .map(|&(_, d)| d)
                .ok_or_else(|| Error::config(format!("no input width given for modality {m}")))?;
            if d == 0 {
                return Err(Error::config(format!("modality {m} has zero input width")));
            }
            dims.push((m, d));
        }
        let schedule = config.schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = UnimodalEncoderParams::init(
            &mut params,
            &dims,
            config.dim,
            config.heads,
            config.unimodal_layers,
            &mut rng,
        )?;
        let fusion = MsbtParams::init(
            &mut params,
            &config.modalities,
            &schedule,
            config.dim,
            config.heads,
            config.cross_transformer,
            &mut rng,
        )?;
        let weighting = if config.weighting {
            Some(WeightHeadParams::init(
                &mut params,
                config.dim,
                config.heads,
                config.weight_layers,
                &mut rng,
            )?)
        } else {
            None
        };
        let head = GlobalHeadParams::init(
            &mut params,
            config.fused_width(),
            config.heads,
            config.global_layers,
            &mut rng,
        )?;
        Ok(Self {
            config,
            input_dims: dims,
            params,
            encoder,
            fusion,
            weighting,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Forward pass over raw per-modality features (`T×D_m` each).
    pub fn forward_features<'g>(
        &self,
        scope: &Scope<'g, S>,
        features: &[(Modality, Var<'g, S>)],
    ) -> Result<VideoForward<'g, S>> {
        let mut encoded = Vec::with_capacity(self.config.modalities.len());
        for &m in &self.config.modalities {
            let raw = features
                .iter()
                .find(|(fm, _)| *fm == m)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::contract(format!("sample has no {m} features")))?;
            encoded.push((m, self.encoder.encode(scope, raw, m)?));
        }
        let fused = fuse_all_pairs(scope, &encoded, &self.fusion)?;
        let (weights, pairs, zhat) = match &self.weighting {
            Some(head) => {
                let w = compute_weights(scope, &fused, head)?;
                let pairs = weighted_pairs(&fused, w)?;
                let zhat = concat(&pairs, 1)?;
                (Some(w), pairs, zhat)
            }
            None => (None, fused.fused.clone(), plain_concat(&fused)?),
        };
        let scores = self.head.score(scope, zhat)?;
        Ok(VideoForward {
            scores,
            fused,
            weights,
            weighted_pairs: pairs,
            zhat,
        })
    }

    /// Forward pass over a loaded video.
    pub fn forward_video<'g>(&self, scope: &Scope<'g, S>, sample: &VideoSample) -> Result<VideoForward<'g, S>> {
        let features = self.sample_inputs(scope, sample)?;
        self.forward_features(scope, &features)
    }

    fn sample_inputs<'g>(&self, scope: &Scope<'g, S>, sample: &VideoSample) -> Result<Vec<(Modality, Var<'g, S>)>> {
        self.config
            .modalities
            .iter()
            .map(|&m| {
                let t = sample.feature(m).ok_or_else(|| {
                    Error::contract(format!("video `{}` has no {m} features", sample.id))
                })?;
                Ok((m, scope.constant(t.cast::<S>())))
            })
            .collect()
    }

    /// MIL, contrast and total loss of one forward pass.
    pub fn video_loss<'g>(&self, fwd: &VideoForward<'g, S>, label: bool) -> Result<VideoLoss<'g, S>> {
        let loss = &self.config.loss;
        let mil = mil_topk_loss(fwd.scores, label, loss.k)?;
        let tcc = tcc_loss(&fwd.weighted_pairs, loss.tau)?;
        let total = if self.config.tcc {
            total_loss(mil, tcc, loss.lambda)?
        } else {
            mil
        };
        Ok(VideoLoss { mil, tcc, total })
    }

    /// Snippet scores for a video, outside of any training graph.
    pub fn predict(&self, sample: &VideoSample) -> Result<Vec<f64>> {
        let g = crate::autodiff::Graph::new();
        let scope = Scope::new(&g, &self.params);
        Ok(self.forward_video(&scope, sample)?.scores.value().to_f64_vec())
    }

    /// Pair labels in concatenation order.
    pub fn pair_labels(&self) -> Vec<String> {
        ordered_pairs(&self.config.modalities).iter().map(|p| p.label()).collect()
    }

    /// Copies parameter values from `other`, which must have identical structure.
    pub fn load_values<T: Scalar>(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::contract(format!(
                "parameter count {} differs from {}",
                other.len(),
                self.params.len()
            )));
        }
        for (id, name, value) in other.iter() {
            let own = self
                .params
                .id_of(name)
                .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
            let _ = id;
            if self.params.get(own).shape() != value.shape() {
                return Err(Error::contract(format!("shape mismatch for `{name}`")));
            }
            *self.params.get_mut(own) = value.cast::<S>();
        }
        Ok(())
    }

    /// Converts the model to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let mut params = ParamStore::new();
        for (_, name, value) in self.params.iter() {
            params.add(name, value.cast::<T>());
        }
        Model {
            config: self.config.clone(),
            input_dims: self.input_dims.clone(),
            params,
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            weighting: self.weighting.clone(),
            head: self.head.clone(),
        }
    }
}

/// Converts per-modality `f64` tensors into graph constants.
pub fn feature_constants<'g, S: Scalar>(
    scope: &Scope<'g, S>,
    features: &[(Modality, Tensor<f64>)],
) -> Vec<(Modality, Var<'g, S>)> {
    features
        .iter()
        .map(|(m, t)| (*m, scope.constant(t.cast::<S>())))
        .collect()
}
