//! Utterance-level emotion classification on top of the encoder.
//!
//! Soft attention pooling over frames `x_i`:
//!
//! ```text
//! α_i = softmax_i(tanh(W · x_i))      W ∈ ℝ^{1×D}
//! Z   = Σ_i α_i x_i
//! ```
//!
//! Because the score is squashed by tanh, any two frames' weights differ by at
//! most a factor e² ≈ 7.39. The attention weight starts at zero, so training
//! begins from exactly average pooling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_assign, Codebook, FeatureKind, PseudoLabels};
use crate::corpus::{Corpus, EmotionLabel, FoldPlan, Utterance};
use crate::encoder::{forward_graph, linear, EncoderConfig, InputKind, HEAD_PREFIX};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, Metrics};
use crate::numerics::{AdamWConfig, BoundParams, Graph, OptimizerState, ParamStore, Schedule, Tensor, Var};
use crate::pretrain::{argmax, run_pretrain, PretrainConfig, TrajectoryPoint};

pub use crate::eval::Pooling;

pub const ATTENTION_WEIGHT: &str = "pool.attention.weight";
pub const CLASSIFIER_PREFIX: &str = "classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledOutput {
    pub z: Vec<f64>,
    /// One weight per input frame; exactly 0 for invalid frames.
    pub weights: Vec<f64>,
}

impl PooledOutput {
    pub fn num_frames(&self) -> usize {
        self.weights.len()
    }
}

fn check_valid(n: usize, valid: Option<&[bool]>) -> Result<()> {
    match valid {
        Some(v) if v.len() != n => Err(Error::Dimension {
            op: "pooling validity mask",
            lhs: vec![n],
            rhs: vec![v.len()],
        }),
        Some(v) if !v.iter().any(|&b| b) => Err(Error::EmptyUtterance),
        _ if n == 0 => Err(Error::EmptyUtterance),
        _ => Ok(()),
    }
}

/// Returns `(Z [1×D], α [1×N])`.
pub fn attention_pool_graph(g: &mut Graph, x: Var, w: Var, valid: Option<&[bool]>) -> Result<(Var, Var)> {
    check_valid(g.value(x).rows(), valid)?;
    let wt = g.transpose(w)?;
    let scores = g.matmul(x, wt)?;
    let scores = g.tanh(scores)?;
    let scores = g.transpose(scores)?;
    let alpha = g.softmax_rows(scores, valid)?;
    let z = g.matmul(alpha, x)?;
    Ok((z, alpha))
}

/// Returns the mean of the valid rows as `[1×D]`.
pub fn average_pool_graph(g: &mut Graph, x: Var, valid: Option<&[bool]>) -> Result<Var> {
    let n = g.value(x).rows();
    check_valid(n, valid)?;
    let flags: Vec<bool> = valid.map_or_else(|| vec![true; n], <[bool]>::to_vec);
    let count = flags.iter().filter(|&&b| b).count() as f64;
    let weights = flags.iter().map(|&b| if b { 1.0 / count } else { 0.0 }).collect();
    let weights = g.constant(Tensor::matrix(1, n, weights)?);
    g.matmul(weights, x)
}

pub fn attention_pool(x: &Tensor, w: &Tensor, valid: Option<&[bool]>) -> Result<PooledOutput> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let (z, alpha) = attention_pool_graph(&mut g, xv, wv, valid)?;
    Ok(PooledOutput {
        z: g.value(z).data().to_vec(),
        weights: g.value(alpha).data().to_vec(),
    })
}

pub fn average_pool(x: &Tensor, valid: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let z = average_pool_graph(&mut g, xv, valid)?;
    Ok(g.value(z).data().to_vec())
}

/// `D → 4` emotion logits.
pub fn classifier_graph(g: &mut Graph, bound: &BoundParams, z: Var) -> Result<Var> {
    linear(g, bound, CLASSIFIER_PREFIX, z)
}

/// Adds (or replaces) the pooling and classifier parameters.
pub fn init_head_params(params: &mut ParamStore, embed_dim: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 1.0 / (embed_dim as f64).sqrt()).expect("positive std");
    params.insert(ATTENTION_WEIGHT, Tensor::zeros(&[1, embed_dim]));
    let w = (0..embed_dim * EmotionLabel::COUNT).map(|_| dist.sample(&mut rng)).collect();
    params.insert(
        format!("{CLASSIFIER_PREFIX}.weight"),
        Tensor::matrix(embed_dim, EmotionLabel::COUNT, w).expect("shape by construction"),
    );
    params.insert(format!("{CLASSIFIER_PREFIX}.bias"), Tensor::zeros(&[EmotionLabel::COUNT]));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub pooling: Pooling,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::Attention,
            epochs: 10,
            batch_size: 8,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                schedule: Schedule::Constant,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Full-scale settings: lr 1e-4, batch 64, 40 epochs.
    pub fn full_scale(pooling: Pooling) -> Self {
        Self {
            pooling,
            epochs: 40,
            batch_size: 64,
            optimizer: AdamWConfig {
                learning_rate: 1e-4,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// Emotion logits `[1×4]` for one utterance, plus the attention weights node.
pub fn utterance_logits(
    g: &mut Graph,
    bound: &BoundParams,
    encoder: &EncoderConfig,
    pooling: Pooling,
    frames: &Tensor,
) -> Result<(Var, Option<Var>)> {
    let enc = forward_graph(g, bound, encoder, frames, None, None, false)?;
    let (z, alpha) = match pooling {
        Pooling::Attention => {
            let w = bound.var(ATTENTION_WEIGHT)?;
            let (z, a) = attention_pool_graph(g, enc.output, w, None)?;
            (z, Some(a))
        }
        Pooling::Average => (average_pool_graph(g, enc.output, None)?, None),
    };
    Ok((classifier_graph(g, bound, z)?, alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub utterance_id: String,
    pub truth: EmotionLabel,
    pub predicted: EmotionLabel,
    /// Attention weights per frame (attention pooling only).
    pub attention: Option<Vec<f64>>,
}

/// Classifies utterances with read-only parameters; runs in parallel.
pub fn predict(
    params: &ParamStore,
    encoder: &EncoderConfig,
    pooling: Pooling,
    utterances: &[&Utterance],
) -> Result<Vec<Prediction>> {
    utterances
        .par_iter()
        .map(|u| {
            let mut g = Graph::new();
            let bound = params.bind_frozen(&mut g);
            let (logits, alpha) = utterance_logits(&mut g, &bound, encoder, pooling, &u.frames)?;
            let class = argmax(g.value(logits).data());
            Ok(Prediction {
                utterance_id: u.id.clone(),
                truth: u.label,
                predicted: EmotionLabel::from_index(class).expect("4 logits"),
                attention: alpha.map(|a| g.value(a).data().to_vec()),
            })
        })
        .collect()
}

pub fn evaluate(
    params: &ParamStore,
    encoder: &EncoderConfig,
    pooling: Pooling,
    utterances: &[&Utterance],
) -> Result<Metrics> {
    let preds = predict(params, encoder, pooling, utterances)?;
    let truth: Vec<EmotionLabel> = preds.iter().map(|p| p.truth).collect();
    let predicted: Vec<EmotionLabel> = preds.iter().map(|p| p.predicted).collect();
    compute_metrics(&truth, &predicted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ua: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters from the epoch with the best validation UA.
    pub params: ParamStore,
    pub best_epoch: usize,
    pub val_metrics: Metrics,
    pub test_metrics: Metrics,
    pub test_predictions: Vec<Prediction>,
    pub history: Vec<EpochRecord>,
}

/// Trains encoder, pooling and classifier end to end on the fold's training
/// speakers, keeps the epoch with the highest validation UA (earliest on
/// ties) and reports that model on the test speaker.
pub fn run_finetune(
    params: ParamStore,
    encoder: &EncoderConfig,
    corpus: &Corpus,
    fold: &FoldPlan,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let split = fold.split(corpus)?;
    let mut params = params;
    if !params.contains(ATTENTION_WEIGHT) {
        init_head_params(&mut params, encoder.embed_dim, config.seed);
    }
    let mut opt = OptimizerState::new(config.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut best: Option<(f64, usize, ParamStore, Metrics)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let trainable = |name: &str| !name.starts_with(HEAD_PREFIX);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let mut total = None;
            for &i in batch {
                let u = split.train[i];
                let (logits, _) = utterance_logits(&mut g, &bound, encoder, config.pooling, &u.frames)?;
                let ce = g.cross_entropy_rows(logits, &[u.label.index()])?;
                let ce = g.sum(ce)?;
                total = Some(match total {
                    None => ce,
                    Some(acc) => g.add(acc, ce)?,
                });
            }
            let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            loss_sum += g.value(loss).item() * batch.len() as f64;
            let grads = g.backward(loss)?;
            let grads = bound.collect_grads(&g, &grads, trainable);
            opt.step(&mut params, &grads)?;
        }
        let val = evaluate(&params, encoder, config.pooling, &split.val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / split.train.len() as f64,
            val_ua: val.ua,
        });
        if best.as_ref().is_none_or(|(ua, ..)| val.ua > *ua) {
            best = Some((val.ua, epoch, params.clone(), val));
        }
    }

    let (_, best_epoch, params, val_metrics) = best.expect("at least one epoch");
    let test_predictions = predict(&params, encoder, config.pooling, &split.test)?;
    let truth: Vec<EmotionLabel> = test_predictions.iter().map(|p| p.truth).collect();
    let predicted: Vec<EmotionLabel> = test_predictions.iter().map(|p| p.predicted).collect();
    Ok(FinetuneOutcome {
        params,
        best_epoch,
        val_metrics,
        test_metrics: compute_metrics(&truth, &predicted)?,
        test_predictions,
        history,
    })
}

/// Base-feature pseudo labels for the given utterances.
pub fn base_feature_labels(codebook: &Codebook, utterances: &[&Utterance]) -> Result<PseudoLabels> {
    if codebook.provenance.feature_kind != FeatureKind::BaseFeatures {
        return Err(Error::Provenance(format!(
            "codebook {} was not fit on base features",
            codebook.id
        )));
    }
    let seqs = utterances
        .iter()
        .map(|u| kmeans_assign(codebook, &u.id, &u.frames))
        .collect::<Result<Vec<_>>>()?;
    PseudoLabels::new(codebook, seqs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaptConfig {
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for TaptConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig {
                pooling: Pooling::Average,
                ..FinetuneConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaptOutcome {
    pub encoder: EncoderConfig,
    pub trajectory: Vec<TrajectoryPoint>,
    pub finetune: FinetuneOutcome,
}

/// Phase 1: continued masked prediction on base-feature pseudo labels of the
/// training speakers, then average-pooling fine-tuning.
pub fn run_tapt(
    params: ParamStore,
    encoder: &EncoderConfig,
    corpus: &Corpus,
    fold: &FoldPlan,
    base_codebook: &Codebook,
    config: &TaptConfig,
) -> Result<TaptOutcome> {
    if !matches!(encoder.input, InputKind::Frames { .. }) {
        return Err(Error::Config(
            "base-feature pseudo labels need the precomputed-frames input path".into(),
        ));
    }
    let split = fold.split(corpus)?;
    let labels = base_feature_labels(base_codebook, &split.train)?;
    let pre = run_pretrain(params, encoder, &split.train, &labels, &config.pretrain, |_, _| Ok(()))?;
    let finetune_config = FinetuneConfig {
        pooling: Pooling::Average,
        ..config.finetune.clone()
    };
    let finetune = run_finetune(pre.params, &pre.encoder, corpus, fold, &finetune_config)?;
    Ok(TaptOutcome {
        encoder: pre.encoder,
        trajectory: pre.trajectory,
        finetune,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weight_is_average_pooling() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0]).unwrap();
        let out = attention_pool(&x, &Tensor::zeros(&[1, 2]), None).unwrap();
        let avg = average_pool(&x, None).unwrap();
        for (a, b) in out.z.iter().zip(&avg) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(out.weights.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn singleton_frame() {
        let x = Tensor::matrix(1, 3, vec![0.5, -2.0, 7.0]).unwrap();
        let w = Tensor::matrix(1, 3, vec![0.3, 0.1, -0.2]).unwrap();
        let out = attention_pool(&x, &w, None).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        assert_eq!(out.z, x.data());
    }

    #[test]
    fn all_invalid_is_empty_utterance() {
        let x = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let w = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        assert!(matches!(attention_pool(&x, &w, Some(&[false, false])), Err(Error::EmptyUtterance)));
        assert!(matches!(average_pool(&x, Some(&[false, false])), Err(Error::EmptyUtterance)));
        assert!(matches!(average_pool(&Tensor::zeros(&[0, 2]), None), Err(Error::EmptyUtterance)));
    }

    #[test]
    fn padding_leaves_average_unchanged() {
        let x = Tensor::matrix(3, 1, vec![2.0, 4.0, 1000.0]).unwrap();
        assert_eq!(average_pool(&x, Some(&[true, true, false])).unwrap(), vec![3.0]);
    }
}
