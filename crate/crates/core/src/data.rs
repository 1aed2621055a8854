//! Feature files, manifests and frame labels.
//!
//! A feature file holds one `T×D` matrix: the 4-byte magic `MSBF`, then
//! little-endian `u32` version, `T` and `D`, then `T·D` little-endian `f32`
//! values in row-major order.
//!
//! A manifest is a tab-separated text file with one video per line:
//! `id  rgb  flow  audio  label`. A modality column holds a feature-file path
//! or `-` when the modality is absent. The label column is `0`, `1`, or the
//! path of a frame-label file (one `0`/`1` per line; the video label is 1 when
//! any frame is positive). Relative paths resolve against the manifest's
//! directory. Lines starting with `#` are comments, except the directive
//! `#! frames_per_snippet = N`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"MSBF";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 16;

pub const DEFAULT_FRAMES_PER_SNIPPET: usize = 16;

/// One video: per-modality `T×D_m` features and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// Sorted by modality, each `T×D_m`.
    pub features: Vec<(Modality, Tensor<f64>)>,
    /// Video-level label (anomalous or not).
    pub label: bool,
    /// Per-frame ground truth, a multiple of `T` long when present.
    pub frame_labels: Option<Vec<bool>>,
}

impl VideoSample {
    pub fn feature(&self, m: Modality) -> Option<&Tensor<f64>> {
        self.features.iter().find(|(fm, _)| *fm == m).map(|(_, t)| t)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.features.iter().map(|(m, _)| *m).collect()
    }

    /// Number of snippets `T`.
    pub fn num_snippets(&self) -> usize {
        self.features.first().map_or(0, |(_, t)| t.rows())
    }

    pub fn frames_per_snippet(&self) -> Option<usize> {
        let t = self.num_snippets();
        self.frame_labels.as_ref().filter(|_| t > 0).map(|f| f.len() / t)
    }

    /// Checks shape invariants; errors name the video.
    pub fn validate(&self) -> Result<()> {
        let Some((_, first)) = self.features.first() else {
            return Err(Error::load(&self.id, "no modality features"));
        };
        let t = first.rows();
        for (m, f) in &self.features {
            if f.ndim() != 2 {
                return Err(Error::load(&self.id, format!("{m} features are not a matrix")));
            }
            if f.rows() != t {
                return Err(Error::load(
                    &self.id,
                    format!("{m} features have {} snippets, expected {t}", f.rows()),
                ));
            }
            if !f.all_finite() {
                return Err(Error::load(&self.id, format!("{m} features contain non-finite values")));
            }
        }
        let mut seen = HashSet::new();
        if let Some((m, _)) = self.features.iter().find(|(m, _)| !seen.insert(*m)) {
            return Err(Error::load(&self.id, format!("{m} features given twice")));
        }
        if let Some(fl) = &self.frame_labels {
            if fl.is_empty() || fl.len() % t != 0 {
                return Err(Error::load(
                    &self.id,
                    format!("{} frame labels is not a multiple of {t} snippets", fl.len()),
                ));
            }
        }
        Ok(())
    }
}

/// Repeats each snippet score over its frames.
pub fn expand_scores_to_frames(scores: &[f64], frames_per_snippet: usize) -> Vec<f64> {
    scores
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, frames_per_snippet))
        .collect()
}

/// Encodes a `T×D` matrix in the feature-file format. Values are stored as `f32`.
pub fn encode_features(t: &Tensor<f64>) -> Result<Vec<u8>> {
    if t.ndim() != 2 {
        return Err(Error::dim(format!("feature files hold matrices, got {:?}", t.shape())));
    }
    let (rows, cols) = (t.rows(), t.cols());
    let rows32 = u32::try_from(rows).map_err(|_| Error::dim("too many snippets"))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::dim("feature width too large"))?;
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * t.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a feature file. `id` only labels errors.
pub fn decode_features(bytes: &[u8], id: &str) -> Result<Tensor<f64>> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::load(id, format!("feature file truncated at {} bytes", bytes.len())));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::load(id, "not a feature file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::load(id, format!("unsupported feature file version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if rows == 0 || cols == 0 {
        return Err(Error::load(id, format!("empty feature matrix {rows}×{cols}")));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(FEATURE_HEADER_LEN))
        .ok_or_else(|| Error::load(id, "feature header overflows"))?;
    if bytes.len() != expected {
        return Err(Error::load(
            id,
            format!("feature file has {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let data = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Tensor::matrix(rows, cols, data).map_err(|e| Error::load(id, e.to_string()))
}

pub fn write_features(path: &Path, t: &Tensor<f64>) -> Result<()> {
    let bytes = encode_features(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_features(path: &Path, id: &str) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::load(id, format!("reading {}: {e}", path.display())))?;
    decode_features(&bytes, id)
}

/// Parses a frame-label file: one `0` or `1` per frame. Whitespace is ignored,
/// so both one label per line and a single run of digits are accepted.
pub fn parse_frame_labels(text: &str, id: &str) -> Result<Vec<bool>> {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .enumerate()
        .map(|(i, c)| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::load(id, format!("frame label {i} is `{other}`, expected 0 or 1"))),
        })
        .collect()
}

pub fn format_frame_labels(labels: &[bool]) -> String {
    let mut s = String::with_capacity(labels.len() * 2);
    for &l in labels {
        s.push(if l { '1' } else { '0' });
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelSpec {
    Video(bool),
    Frames(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Feature paths indexed like [`Modality::ALL`].
    pub paths: [Option<PathBuf>; 3],
    pub label: LabelSpec,
}

impl ManifestEntry {
    pub fn path(&self, m: Modality) -> Option<&Path> {
        self.paths[m as usize].as_deref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub frames_per_snippet: usize,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut frames_per_snippet = DEFAULT_FRAMES_PER_SNIPPET;
        let mut entries = Vec::new();
        let mut ids = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if let Some(directive) = line.strip_prefix("#!") {
                let (key, value) = directive
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("manifest line {}: malformed directive", lineno + 1)))?;
                match key.trim() {
                    "frames_per_snippet" => {
                        frames_per_snippet = value
                            .trim()
                            .parse()
                            .ok()
                            .filter(|&n: &usize| n > 0)
                            .ok_or_else(|| {
                                Error::config(format!("manifest line {}: bad frames_per_snippet", lineno + 1))
                            })?;
                    }
                    other => {
                        return Err(Error::config(format!(
                            "manifest line {}: unknown directive `{other}`",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::config(format!(
                    "manifest line {}: expected 5 tab-separated columns, got {}",
                    lineno + 1,
                    cols.len()
                )));
            }
            let id = cols[0].trim().to_string();
            if id.is_empty() {
                return Err(Error::config(format!("manifest line {}: empty video id", lineno + 1)));
            }
            if !ids.insert(id.clone()) {
                return Err(Error::load(&id, "duplicate video id in manifest"));
            }
            let path = |s: &str| match s.trim() {
                "-" | "" => None,
                p => Some(PathBuf::from(p)),
            };
            let label = match cols[4].trim() {
                "0" => LabelSpec::Video(false),
                "1" => LabelSpec::Video(true),
                "" => return Err(Error::load(&id, "missing label")),
                p => LabelSpec::Frames(PathBuf::from(p)),
            };
            entries.push(ManifestEntry {
                paths: [path(cols[1]), path(cols[2]), path(cols[3])],
                id,
                label,
            });
        }
        Ok(Self {
            entries,
            frames_per_snippet,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("#! frames_per_snippet = {}\n", self.frames_per_snippet);
        for e in &self.entries {
            s.push_str(&e.id);
            for p in &e.paths {
                s.push('\t');
                match p {
                    Some(p) => s.push_str(&p.to_string_lossy()),
                    None => s.push('-'),
                }
            }
            s.push('\t');
            match &e.label {
                LabelSpec::Video(l) => s.push(if *l { '1' } else { '0' }),
                LabelSpec::Frames(p) => s.push_str(&p.to_string_lossy()),
            }
            s.push('\n');
        }
        s
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a manifest and every video it lists.
///
/// All videos must carry the same modalities with the same widths.
pub fn load_manifest(path: &Path) -> Result<(Manifest, Vec<VideoSample>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest = Manifest::parse(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut widths: Option<Vec<(Modality, usize)>> = None;
    for entry in &manifest.entries {
        let mut features = Vec::new();
        for m in Modality::ALL {
            if let Some(p) = entry.path(m) {
                features.push((m, read_features(&resolve(base, p), &entry.id)?));
            }
        }
        let (label, frame_labels) = match &entry.label {
            LabelSpec::Video(l) => (*l, None),
            LabelSpec::Frames(p) => {
                let p = resolve(base, p);
                let text = fs::read_to_string(&p)
                    .map_err(|e| Error::load(&entry.id, format!("reading {}: {e}", p.display())))?;
                let fl = parse_frame_labels(&text, &entry.id)?;
                (fl.iter().any(|&l| l), Some(fl))
            }
        };
        let sample = VideoSample {
            id: entry.id.clone(),
            features,
            label,
            frame_labels,
        };
        sample.validate()?;
        let w: Vec<(Modality, usize)> = sample.features.iter().map(|(m, t)| (*m, t.cols())).collect();
        match &widths {
            None => widths = Some(w),
            Some(expected) if *expected != w => {
                return Err(Error::load(
                    &entry.id,
                    format!("modalities/widths {w:?} differ from earlier videos {expected:?}"),
                ))
            }
            Some(_) => {}
        }
        samples.push(sample);
    }
    Ok((manifest, samples))
}

/// Modalities and input widths shared by a loaded dataset.
pub fn dataset_dims(samples: &[VideoSample]) -> Vec<(Modality, usize)> {
    samples
        .first()
        .map(|s| s.features.iter().map(|(m, t)| (*m, t.cols())).collect())
        .unwrap_or_default()
}

/// Writes every sample under `dir` (feature files in `features/`, frame labels
/// in `labels/`) plus `dir/manifest.tsv`; returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[VideoSample], frames_per_snippet: usize) -> Result<PathBuf> {
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e));
    mkdir(&dir.join("features"))?;
    mkdir(&dir.join("labels"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        let mut paths: [Option<PathBuf>; 3] = [None, None, None];
        for (m, t) in &s.features {
            let rel = PathBuf::from("features").join(format!("{}.{}.msbf", s.id, m.name()));
            write_features(&dir.join(&rel), t)?;
            paths[*m as usize] = Some(rel);
        }
        let label = match &s.frame_labels {
            Some(fl) => {
                let rel = PathBuf::from("labels").join(format!("{}.txt", s.id));
                let p = dir.join(&rel);
                fs::write(&p, format_frame_labels(fl)).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
                LabelSpec::Frames(rel)
            }
            None => LabelSpec::Video(s.label),
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            paths,
            label,
        });
    }
    let manifest = Manifest {
        entries,
        frames_per_snippet,
    };
    let path = dir.join("manifest.tsv");
    let file = fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(manifest.to_text().as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f64> {
        Tensor::from_rows(&[&[0.5, -1.25, 3.0], &[0.1, 2.0, -0.0]]).unwrap()
    }

    #[test]
    fn feature_bytes_layout() {
        let bytes = encode_features(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"MSBF");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..12], 2u32.to_le_bytes());
        assert_eq!(bytes[12..16], 3u32.to_le_bytes());
        assert_eq!(bytes[16..20], 0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 4);
    }

    #[test]
    fn feature_round_trip_of_f32_values_is_exact() {
        let t = sample().map(|v| v as f32 as f64);
        let back = decode_features(&encode_features(&t).unwrap(), "v").unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_features(&back).unwrap(), encode_features(&t).unwrap());
    }

    #[test]
    fn corrupt_feature_files_name_the_video() {
        let bytes = encode_features(&sample()).unwrap();
        let err = decode_features(&bytes[..20], "clip7").unwrap_err();
        assert!(err.to_string().contains("clip7"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad, "clip7"), Err(Error::Load { .. })));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(decode_features(&v2, "clip7").unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn manifest_parse_and_print() {
        let text = "#! frames_per_snippet = 8\n# comment\na\tr.msbf\t-\tx.msbf\t1\nb\tr2.msbf\t-\ty.msbf\tlabels/b.txt\n";
        let m = Manifest::parse(text).unwrap();
        assert_eq!(m.frames_per_snippet, 8);
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].path(Modality::Flow), None);
        assert_eq!(m.entries[0].label, LabelSpec::Video(true));
        assert_eq!(m.entries[1].label, LabelSpec::Frames("labels/b.txt".into()));
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn manifest_rejects_duplicates_and_bad_rows() {
        assert!(Manifest::parse("a\t-\t-\t-\t0\na\t-\t-\t-\t1\n").is_err());
        assert!(Manifest::parse("a\t-\t-\t0\n").is_err());
        assert!(Manifest::parse("#! frames_per_snippet = 0\n").is_err());
    }

    #[test]
    fn frame_label_length_must_divide() {
        let s = VideoSample {
            id: "v9".into(),
            features: vec![(Modality::Rgb, Tensor::zeros(vec![3, 2]))],
            label: true,
            frame_labels: Some(vec![true; 7]),
        };
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("v9"), "{err}");
    }

    #[test]
    fn expand_repeats() {
        assert_eq!(expand_scores_to_frames(&[0.1, 0.9], 3), vec![0.1, 0.1, 0.1, 0.9, 0.9, 0.9]);
    }

    #[test]
    fn frame_labels_text() {
        let l = vec![false, true, true];
        assert_eq!(parse_frame_labels(&format_frame_labels(&l), "v").unwrap(), l);
        assert!(parse_frame_labels("0\n2\n", "v").is_err());
        assert_eq!(parse_frame_labels("0110\n", "v").unwrap(), [false, true, true, false]);
    }
}
