//! Frame-level average precision and dataset evaluation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_traits::{FromPrimitive, Num};
use serde::Serialize;

use crate::data::{expand_scores_to_frames, VideoSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

/// Non-interpolated average precision.
///
/// Scores are ranked in descending order and tied scores form one block, so
/// the value equals `Σ (R_i − R_{i−1}) · P_i` over distinct score thresholds.
/// A constant scorer gets the positive fraction. The result type only needs
/// exact division of counts, so rationals give an exact value.
pub fn average_precision<R>(scores: &[f64], labels: &[bool]) -> Result<R>
where
    R: Num + FromPrimitive + Clone,
{
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score {s} cannot be ranked")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Metric("average precision needs at least one positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let count = |n: usize| R::from_usize(n).expect("count fits the result type");
    let total = count(positives);
    let mut ap = R::zero();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let block_tp = tp;
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        if tp > block_tp {
            ap = ap + count(tp - block_tp) * (count(tp) / count(seen));
        }
    }
    // One division at the end keeps a float sum from rounding above 1.
    Ok(ap / total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub frame_ap: f64,
    pub num_videos: usize,
    pub num_frames: usize,
    pub num_positive_frames: usize,
    /// One `frame_index,score,label` file per video, when written.
    pub score_csvs: Vec<PathBuf>,
}

/// Per-video frame scores and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFrames {
    pub id: String,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

pub fn frame_scores<S: Scalar>(model: &Model<S>, sample: &VideoSample) -> Result<VideoFrames> {
    let labels = sample
        .frame_labels
        .clone()
        .ok_or_else(|| Error::contract(format!("video `{}` has no frame labels", sample.id)))?;
    let fps = sample
        .frames_per_snippet()
        .ok_or_else(|| Error::contract(format!("video `{}` has no snippets", sample.id)))?;
    let scores = expand_scores_to_frames(&model.predict(sample)?, fps);
    Ok(VideoFrames {
        id: sample.id.clone(),
        scores,
        labels,
    })
}

pub fn write_frame_csv(path: &Path, frames: &VideoFrames) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "frame_index,score,label")?;
        for (i, (s, l)) in frames.scores.iter().zip(&frames.labels).enumerate() {
            writeln!(w, "{i},{s},{}", *l as u8)?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(ctx(), e))
}

/// Global AP over all frames of all videos. With `csv_dir`, also writes
/// `<csv_dir>/<id>.csv` per video.
pub fn evaluate<S: Scalar>(model: &Model<S>, samples: &[VideoSample], csv_dir: Option<&Path>) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    if let Some(dir) = csv_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut score_csvs = Vec::new();
    for sample in samples {
        let frames = frame_scores(model, sample)?;
        if let Some(dir) = csv_dir {
            let p = dir.join(format!("{}.csv", frames.id));
            write_frame_csv(&p, &frames)?;
            score_csvs.push(p);
        }
        scores.extend_from_slice(&frames.scores);
        labels.extend_from_slice(&frames.labels);
    }
    let frame_ap: f64 = average_precision(&scores, &labels)?;
    Ok(EvalReport {
        frame_ap,
        num_videos: samples.len(),
        num_frames: labels.len(),
        num_positive_frames: labels.iter().filter(|&&l| l).count(),
        score_csvs,
    })
}
