//! k-means over frame embeddings and the pseudo-label files it produces.
//!
//! Codebook file: one JSON document
//! `{"id", "k", "dim", "centroids": [[..]], "inertia", "inertia_trace", "provenance"}`.
//! The id is a SHA-256 prefix of the canonical JSON of everything except the
//! id itself, so any change to centroids or provenance changes the id.
//!
//! Pseudo-label file: JSON lines, a header
//! `{"format": "flea-pseudo-labels", "version": 1, "codebook_id", "k", "num_sequences"}`
//! followed by one `{"utterance_id", "codebook_id", "codes"}` record per utterance.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{json_line, EmotionLabel, Utterance};
use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Tensor};

const LABELS_FORMAT: &str = "flea-pseudo-labels";
const LABELS_VERSION: u32 = 1;
const ID_HEX_CHARS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Hidden states of a transformer layer.
    TransformerLayer,
    /// Raw corpus frame features (the TAPT stand-in for MFCC clustering).
    BaseFeatures,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookProvenance {
    pub feature_kind: FeatureKind,
    /// 1-based transformer layer; `None` for base features.
    pub tap_layer: Option<usize>,
    /// Id of the checkpoint the embeddings came from.
    pub source_checkpoint: Option<String>,
    pub seed: u64,
    /// Speakers whose frames were clustered, sorted.
    pub fit_speakers: Vec<String>,
    /// Set when clustering deliberately included held-out speakers.
    pub leaky: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 4,
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

/// Lloyd run with its per-iteration history.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// k-means++ seeding the Lloyd iterations started from.
    pub initial_centroids: Tensor,
    pub centroids: Tensor,
    /// Final assignment of every input point.
    pub assignments: Vec<usize>,
    /// Inertia after each assignment step; the last entry is the final inertia.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_trace.last().expect("at least one assignment")
    }
}

fn check_points(points: &Tensor, k: usize) -> Result<()> {
    if points.rank() != 2 {
        return Err(Error::Dimension {
            op: "kmeans_fit",
            lhs: points.shape().to_vec(),
            rhs: vec![points.rows(), points.row_width()],
        });
    }
    if k == 0 {
        return Err(Error::Config("k-means needs k ≥ 1".into()));
    }
    if points.rows() < k {
        return Err(Error::Config(format!(
            "k-means with k = {k} needs at least {k} points, got {}",
            points.rows()
        )));
    }
    if !points.is_finite() {
        return Err(Error::Numeric {
            op: "kmeans_fit input".into(),
        });
    }
    Ok(())
}

/// Nearest centroid per point (lowest index on ties) and its squared distance.
fn nearest(points: &Tensor, centroids: &Tensor) -> Vec<(usize, f64)> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| {
            let p = points.row(i);
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter_rows().enumerate() {
                let d = squared_distance(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

fn kmeans_plus_plus(points: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            // Every point coincides with a chosen centroid.
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| points.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).expect("uniform rows")
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Stops once no centroid moves by `tol` or more (Euclidean), or after
/// `max_iters` updates. A cluster left empty by an update is moved onto the
/// point currently farthest from its centroid.
pub fn kmeans_fit_traced(points: &Tensor, config: &KMeansConfig) -> Result<KMeansFit> {
    check_points(points, config.k)?;
    if !(config.tol >= 0.0) {
        return Err(Error::Config(format!("k-means tol {} must be ≥ 0", config.tol)));
    }
    let (n, dim, k) = (points.rows(), points.cols(), config.k);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial_centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut centroids = initial_centroids.clone();
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iters {
        let nearest_now = nearest(points, &centroids);
        trace.push(nearest_now.iter().map(|&(_, d)| d).sum());

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(j, _)) in nearest_now.iter().enumerate() {
            counts[j] += 1;
            for (s, &x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut updated = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in updated.row_mut(j).iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
        let mut dist_to_own: Vec<f64> = nearest_now
            .iter()
            .enumerate()
            .map(|(i, &(j, _))| squared_distance(points.row(i), updated.row(j)))
            .collect();
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..n).fold(0, |best, i| if dist_to_own[i] > dist_to_own[best] { i } else { best });
            updated.row_mut(j).copy_from_slice(points.row(far));
            dist_to_own[far] = 0.0;
        }

        let movement = centroids
            .iter_rows()
            .zip(updated.iter_rows())
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        iterations += 1;
        if movement < config.tol {
            converged = true;
            break;
        }
    }

    let last = nearest(points, &centroids);
    trace.push(last.iter().map(|&(_, d)| d).sum());
    if !centroids.is_finite() {
        return Err(Error::Numeric {
            op: "kmeans_fit centroid update".into(),
        });
    }
    Ok(KMeansFit {
        initial_centroids,
        centroids,
        assignments: last.into_iter().map(|(j, _)| j).collect(),
        inertia_trace: trace,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Codebook {
    pub id: String,
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub inertia_trace: Vec<f64>,
    pub provenance: CodebookProvenance,
}

#[derive(Serialize)]
struct CodebookContent<'a> {
    k: usize,
    dim: usize,
    centroids: &'a [Vec<f64>],
    inertia: f64,
    inertia_trace: &'a [f64],
    provenance: &'a CodebookProvenance,
}

impl Codebook {
    fn new(fit: &KMeansFit, provenance: CodebookProvenance) -> Result<Self> {
        let mut book = Self {
            id: String::new(),
            k: fit.centroids.rows(),
            dim: fit.centroids.cols(),
            centroids: fit.centroids.iter_rows().map(<[f64]>::to_vec).collect(),
            inertia: fit.inertia(),
            inertia_trace: fit.inertia_trace.clone(),
            provenance,
        };
        book.id = book.content_hash()?;
        Ok(book)
    }

    /// Hash of the canonical content; equals `id` for an untampered codebook.
    pub fn content_hash(&self) -> Result<String> {
        let content = CodebookContent {
            k: self.k,
            dim: self.dim,
            centroids: &self.centroids,
            inertia: self.inertia,
            inertia_trace: &self.inertia_trace,
            provenance: &self.provenance,
        };
        let bytes = serde_json::to_vec(&content)
            .map_err(|e| Error::Config(format!("codebook serialization: {e}")))?;
        Ok(hex::encode(Sha256::digest(&bytes))[..ID_HEX_CHARS].to_string())
    }

    pub fn centroid_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.centroids).expect("validated rows")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.centroids.len() != self.k {
            return Err(Error::Config(format!(
                "codebook declares k = {} but has {} centroids",
                self.k,
                self.centroids.len()
            )));
        }
        if self.centroids.iter().any(|c| c.len() != self.dim) {
            return Err(Error::Config("codebook centroid width differs from dim".into()));
        }
        if self.centroids.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "codebook centroids".into(),
            });
        }
        let hash = self.content_hash()?;
        if hash != self.id {
            return Err(Error::Provenance(format!(
                "codebook id {} does not match its content hash {hash}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("codebook serialization: {e}")))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let book: Self =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, "codebook", e))?;
        book.validate()?;
        Ok(book)
    }
}

/// Fits k-means and packages the result with its provenance.
pub fn kmeans_fit(
    points: &Tensor,
    config: &KMeansConfig,
    provenance: CodebookProvenance,
) -> Result<Codebook> {
    let fit = kmeans_fit_traced(points, config)?;
    Codebook::new(&fit, provenance)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelSeq {
    pub utterance_id: String,
    pub codebook_id: String,
    pub codes: Vec<usize>,
}

/// Nearest-centroid codes for every frame (ties go to the lower index).
pub fn kmeans_assign(codebook: &Codebook, utterance_id: &str, frames: &Tensor) -> Result<PseudoLabelSeq> {
    if frames.rank() != 2 || frames.cols() != codebook.dim {
        return Err(Error::Config(format!(
            "frames of shape {:?} cannot be assigned with a {}-dimensional codebook",
            frames.shape(),
            codebook.dim
        )));
    }
    let centroids = codebook.centroid_tensor();
    Ok(PseudoLabelSeq {
        utterance_id: utterance_id.to_string(),
        codebook_id: codebook.id.clone(),
        codes: nearest(frames, &centroids).into_iter().map(|(j, _)| j).collect(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsHeader {
    format: String,
    version: u32,
    codebook_id: String,
    k: usize,
    num_sequences: usize,
}

/// Label set bound to one codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub codebook_id: String,
    pub k: usize,
    pub sequences: Vec<PseudoLabelSeq>,
}

impl PseudoLabels {
    pub fn new(codebook: &Codebook, sequences: Vec<PseudoLabelSeq>) -> Result<Self> {
        let labels = Self {
            codebook_id: codebook.id.clone(),
            k: codebook.k,
            sequences,
        };
        labels.validate()?;
        Ok(labels)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.sequences {
            if s.codebook_id != self.codebook_id {
                return Err(Error::Provenance(format!(
                    "labels for `{}` reference codebook {} instead of {}",
                    s.utterance_id, s.codebook_id, self.codebook_id
                )));
            }
            if let Some(&c) = s.codes.iter().find(|&&c| c >= self.k) {
                return Err(Error::Label(format!(
                    "code {c} for `{}` is outside [0, {})",
                    s.utterance_id, self.k
                )));
            }
            if !seen.insert(s.utterance_id.as_str()) {
                return Err(Error::Input(format!("duplicate labels for `{}`", s.utterance_id)));
            }
        }
        Ok(())
    }

    pub fn by_utterance(&self) -> BTreeMap<&str, &[usize]> {
        self.sequences
            .iter()
            .map(|s| (s.utterance_id.as_str(), s.codes.as_slice()))
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = LabelsHeader {
            format: LABELS_FORMAT.into(),
            version: LABELS_VERSION,
            codebook_id: self.codebook_id.clone(),
            k: self.k,
            num_sequences: self.sequences.len(),
        };
        let mut out = json_line(&header)?;
        for s in &self.sequences {
            out.push_str(&json_line(s)?);
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, "line 1 (header)", "empty file"))?;
        let header: LabelsHeader = serde_json::from_str(first)
            .map_err(|e| Error::parse(origin, "line 1 (header)", e))?;
        if header.format != LABELS_FORMAT || header.version != LABELS_VERSION {
            return Err(Error::parse(
                origin,
                "line 1 (header)",
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let mut sequences = Vec::with_capacity(header.num_sequences);
        for (i, line) in lines {
            let seq: PseudoLabelSeq = serde_json::from_str(line)
                .map_err(|e| Error::parse(origin, format!("line {}", i + 1), e))?;
            sequences.push(seq);
        }
        if sequences.len() != header.num_sequences {
            return Err(Error::parse(
                origin,
                "end of file",
                format!(
                    "header announces {} sequences, found {} (truncated file?)",
                    header.num_sequences,
                    sequences.len()
                ),
            ));
        }
        let labels = Self {
            codebook_id: header.codebook_id,
            k: header.k,
            sequences,
        };
        labels.validate()?;
        Ok(labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDiagnostics {
    /// Σ_k max_e |cluster k ∩ emotion e| / total frames.
    pub purity: f64,
    /// Frame counts per cluster, indexed by emotion class.
    pub label_histograms: Vec<[usize; EmotionLabel::COUNT]>,
    /// Fraction of adjacent frame pairs (within an utterance) whose codes differ.
    pub transition_rate: f64,
    pub total_frames: usize,
}

/// Cluster quality against the emotion of each frame (`frame_truth` when the
/// corpus carries it, otherwise the utterance label).
pub fn cluster_diagnostics<'a, I>(labels: &[PseudoLabelSeq], utterances: I) -> Result<ClusterDiagnostics>
where
    I: IntoIterator<Item = &'a Utterance>,
{
    let by_id: BTreeMap<&str, &[usize]> = labels
        .iter()
        .map(|s| (s.utterance_id.as_str(), s.codes.as_slice()))
        .collect();
    let num_clusters = labels
        .iter()
        .flat_map(|s| s.codes.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    let mut hist = vec![[0usize; EmotionLabel::COUNT]; num_clusters];
    let mut missing = Vec::new();
    let (mut pairs, mut changes, mut total) = (0usize, 0usize, 0usize);

    for u in utterances {
        let Some(codes) = by_id.get(u.id.as_str()) else {
            missing.push(u.id.clone());
            continue;
        };
        if codes.len() != u.num_frames() {
            return Err(Error::Length(format!(
                "`{}` has {} frames but {} codes",
                u.id,
                u.num_frames(),
                codes.len()
            )));
        }
        for (t, &c) in codes.iter().enumerate() {
            let emotion = u.frame_truth.as_ref().map_or(u.label, |ft| ft[t]);
            hist[c][emotion.index()] += 1;
        }
        total += codes.len();
        pairs += codes.len().saturating_sub(1);
        changes += codes.windows(2).filter(|w| w[0] != w[1]).count();
    }
    if !missing.is_empty() {
        return Err(Error::Coverage { missing });
    }
    if total == 0 {
        return Err(Error::Input("no frames to diagnose".into()));
    }
    let majority: usize = hist.iter().map(|h| *h.iter().max().expect("non-empty")).sum();
    Ok(ClusterDiagnostics {
        purity: majority as f64 / total as f64,
        label_histograms: hist,
        transition_rate: if pairs == 0 { 0.0 } else { changes as f64 / pairs as f64 },
        total_frames: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn provenance() -> CodebookProvenance {
        CodebookProvenance {
            feature_kind: FeatureKind::BaseFeatures,
            tap_layer: None,
            source_checkpoint: None,
            seed: 0,
            fit_speakers: vec!["Ses01F".into()],
            leaky: false,
        }
    }

    fn pts(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let p = pts(&[[0.0, 0.0], [2.0, 0.0], [1.0, 3.0]]);
        let fit = kmeans_fit_traced(&p, &KMeansConfig { k: 1, ..Default::default() }).unwrap();
        assert!((fit.centroids.row(0)[0] - 1.0).abs() < 1e-12);
        assert!((fit.centroids.row(0)[1] - 1.0).abs() < 1e-12);
        // Σ‖x − μ‖² = 2 + 2 + 4.
        assert!((fit.inertia() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn one_cluster_per_point_has_zero_inertia() {
        let p = pts(&[[0.0, 0.0], [5.0, 1.0], [-3.0, 2.0], [1.0, -4.0]]);
        let fit = kmeans_fit_traced(&p, &KMeansConfig { k: 4, ..Default::default() }).unwrap();
        assert_eq!(fit.inertia(), 0.0);
        let mut a = fit.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_few_points_is_a_config_error() {
        let p = pts(&[[0.0, 0.0]]);
        let err = kmeans_fit_traced(&p, &KMeansConfig { k: 2, ..Default::default() }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [7.0, 7.0]]);
        let mut book = kmeans_fit(&p, &KMeansConfig { k: 3, ..Default::default() }, provenance()).unwrap();
        book.centroids = vec![vec![9.0, 9.0], vec![1.0, 0.0], vec![-1.0, 0.0]];
        let seq = kmeans_assign(&book, "u", &pts(&[[0.0, 0.0], [-1.0, 0.0]])).unwrap();
        assert_eq!(seq.codes, vec![1, 2]);
        assert!(kmeans_assign(&book, "u", &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn codebook_id_tracks_content() {
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]]);
        let mut book = kmeans_fit(&p, &KMeansConfig { k: 2, ..Default::default() }, provenance()).unwrap();
        book.validate().unwrap();
        book.provenance.leaky = true;
        assert!(matches!(book.validate(), Err(Error::Provenance(_))));
    }

    #[test]
    fn label_file_round_trip_and_truncation() {
        let p = pts(&[[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]]);
        let book = kmeans_fit(&p, &KMeansConfig { k: 2, ..Default::default() }, provenance()).unwrap();
        let seqs = vec![
            kmeans_assign(&book, "a", &pts(&[[0.0, 0.0], [10.0, 0.0]])).unwrap(),
            kmeans_assign(&book, "b", &pts(&[[11.0, 0.0]])).unwrap(),
        ];
        let labels = PseudoLabels::new(&book, seqs).unwrap();
        let text = labels.to_jsonl().unwrap();
        assert_eq!(PseudoLabels::from_jsonl(&text, Path::new("mem")).unwrap(), labels);
        let cut: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            PseudoLabels::from_jsonl(&cut, Path::new("mem")),
            Err(Error::Parse { .. })
        ));
    }
}
