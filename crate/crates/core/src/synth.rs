//! Synthetic multimodal videos with planted, optionally asynchronous events.
//!
//! Each modality gets a fixed random unit direction. Snippet features are
//! Gaussian noise around a per-video offset; inside an event every modality
//! receives a bump along its direction with a shared random amplitude. Audio
//! bumps are delayed by the event's asynchrony offset.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{VideoSample, DEFAULT_FRAMES_PER_SNIPPET};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub dims: Vec<(Modality, usize)>,
    /// Fraction of anomalous videos; exactly `round(num_videos · rate)` are planted.
    pub anomaly_rate: f64,
    pub event_len_min: usize,
    pub event_len_max: usize,
    pub max_events: usize,
    /// Bump size along the modality direction, in units of per-dimension noise times `√D`.
    pub signal_strength: f64,
    pub noise_std: f64,
    /// Standard deviation of the per-video feature offset.
    pub video_offset_std: f64,
    /// Audio delay range in snippets, inclusive.
    pub async_min: usize,
    pub async_max: usize,
    pub frames_per_snippet: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 200,
            t_min: 16,
            t_max: 32,
            dims: vec![(Modality::Rgb, 8), (Modality::Flow, 8), (Modality::Audio, 8)],
            anomaly_rate: 0.5,
            event_len_min: 3,
            event_len_max: 6,
            max_events: 2,
            signal_strength: 1.0,
            noise_std: 1.0,
            video_offset_std: 0.5,
            async_min: 0,
            async_max: 0,
            frames_per_snippet: DEFAULT_FRAMES_PER_SNIPPET,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.t_min == 0 || self.t_min > self.t_max {
            return bad(format!("snippet range {}..={} is empty", self.t_min, self.t_max));
        }
        if self.dims.is_empty() || self.dims.iter().any(|&(_, d)| d == 0) {
            return bad("every modality needs a positive width".into());
        }
        let mut ms: Vec<Modality> = self.dims.iter().map(|(m, _)| *m).collect();
        ms.sort();
        ms.dedup();
        if ms.len() != self.dims.len() {
            return bad("a modality is listed twice".into());
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad(format!("anomaly rate {} outside [0, 1]", self.anomaly_rate));
        }
        if self.event_len_min == 0 || self.event_len_min > self.event_len_max || self.event_len_max > self.t_min {
            return bad(format!(
                "event lengths {}..={} must be positive and fit in {} snippets",
                self.event_len_min, self.event_len_max, self.t_min
            ));
        }
        if self.max_events == 0 {
            return bad("anomalous videos need at least one event".into());
        }
        if self.async_min > self.async_max || self.async_max >= self.event_len_min {
            return bad(format!(
                "asynchrony {}..={} must be shorter than the shortest event ({})",
                self.async_min, self.async_max, self.event_len_min
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.video_offset_std >= 0.0) || !self.signal_strength.is_finite() {
            return bad("noise and signal parameters must be finite and non-negative".into());
        }
        if self.frames_per_snippet == 0 {
            return bad("frames_per_snippet must be positive".into());
        }
        Ok(())
    }
}

/// A planted event over snippets `[start, end)` of the visual streams.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedEvent {
    pub start: usize,
    pub end: usize,
    pub audio_offset: usize,
    pub amplitude: f64,
}

impl PlantedEvent {
    /// Audio span, shifted by the offset (may extend past the video end).
    pub fn audio_span(&self) -> (usize, usize) {
        (self.start + self.audio_offset, self.end + self.audio_offset)
    }

    pub fn span(&self, m: Modality) -> (usize, usize) {
        match m {
            Modality::Audio => self.audio_span(),
            _ => (self.start, self.end),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub sample: VideoSample,
    pub events: Vec<PlantedEvent>,
}

/// Unit direction per modality, drawn first so it is shared by all videos.
fn directions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    cfg.dims
        .iter()
        .map(|&(_, d)| {
            let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn plant_events(cfg: &SynthConfig, t: usize, rng: &mut ChaCha8Rng) -> Vec<PlantedEvent> {
    let wanted = rng.random_range(1..=cfg.max_events);
    let mut events: Vec<PlantedEvent> = Vec::new();
    let mut attempts = 0;
    while events.len() < wanted && attempts < 64 {
        attempts += 1;
        let len = rng.random_range(cfg.event_len_min..=cfg.event_len_max);
        let start = rng.random_range(0..=t - len);
        let offset = rng.random_range(cfg.async_min..=cfg.async_max);
        let amplitude = rng.random_range(0.75..1.25);
        let candidate = PlantedEvent {
            start,
            end: start + len,
            audio_offset: offset,
            amplitude,
        };
        // Keep a one-snippet gap so labels of separate events never touch.
        let clash = events
            .iter()
            .any(|e| candidate.start <= e.end + e.audio_offset && e.start <= candidate.end + candidate.audio_offset);
        if !clash {
            events.push(candidate);
        }
    }
    events.sort_by_key(|e| e.start);
    events
}

/// Generates the videos and the events planted in each.
pub fn generate_synthetic_detailed(cfg: &SynthConfig) -> Result<Vec<SyntheticVideo>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dirs = directions(cfg, &mut rng);
    let n_anomalous = ((cfg.num_videos as f64) * cfg.anomaly_rate).round() as usize;
    let mut anomalous = vec![false; cfg.num_videos];
    anomalous[..n_anomalous].fill(true);
    anomalous.shuffle(&mut rng);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let offset = Normal::new(0.0, cfg.video_offset_std).map_err(|e| Error::config(e.to_string()))?;
    let width = (cfg.num_videos.max(1) - 1).to_string().len();

    let mut videos = Vec::with_capacity(cfg.num_videos);
    for (v, &is_anomalous) in anomalous.iter().enumerate() {
        let t = rng.random_range(cfg.t_min..=cfg.t_max);
        let events = if is_anomalous { plant_events(cfg, t, &mut rng) } else { Vec::new() };
        let mut features = Vec::with_capacity(cfg.dims.len());
        for (k, &(m, d)) in cfg.dims.iter().enumerate() {
            let base: Vec<f64> = (0..d).map(|_| offset.sample(&mut rng)).collect();
            let mut x = Tensor::from_fn(vec![t, d], |i| base[i % d] + noise.sample(&mut rng));
            let scale = cfg.signal_strength * (d as f64).sqrt();
            for e in &events {
                let (s, end) = e.span(m);
                for r in s..end.min(t) {
                    for c in 0..d {
                        x.data_mut()[r * d + c] += scale * e.amplitude * dirs[k][c];
                    }
                }
            }
            // Stored features are f32, so generate exactly representable values.
            features.push((m, x.map(|val| val as f32 as f64)));
        }
        features.sort_by_key(|(m, _)| *m);
        let mut frames = vec![false; t * cfg.frames_per_snippet];
        for e in &events {
            frames[e.start * cfg.frames_per_snippet..e.end * cfg.frames_per_snippet].fill(true);
        }
        let sample = VideoSample {
            id: format!("vid{v:0width$}"),
            features,
            label: is_anomalous,
            frame_labels: Some(frames),
        };
        debug_assert_eq!(sample.label, sample.frame_labels.as_ref().is_some_and(|f| f.iter().any(|&b| b)));
        videos.push(SyntheticVideo { sample, events });
    }
    Ok(videos)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<VideoSample>> {
    Ok(generate_synthetic_detailed(cfg)?.into_iter().map(|v| v.sample).collect())
}

/// Frame labels implied by planted events, for checking generator output.
pub fn labels_from_events(events: &[PlantedEvent], t: usize, frames_per_snippet: usize) -> Vec<bool> {
    (0..t * frames_per_snippet)
        .map(|f| {
            let s = f / frames_per_snippet;
            events.iter().any(|e| e.start <= s && s < e.end)
        })
        .collect()
}
