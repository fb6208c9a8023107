//! Masked-prediction pretraining against frame pseudo-labels.
//!
//! `L = α·L_m + (1 − α)·L_u`, where `L_m` and `L_u` are the mean frame
//! cross-entropies over masked and unmasked frames of a whole batch.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::PseudoLabels;
use crate::corpus::Utterance;
use crate::encoder::{
    forward_graph, reset_head_if_needed, sample_mask, EncoderConfig, MaskSpec, EXTRACTOR_PREFIX,
};
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, Graph, OptimizerState, ParamStore, Schedule, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicy {
    pub mask_prob: f64,
    pub span_length: usize,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            mask_prob: 0.08,
            span_length: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub alpha: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub mask: MaskPolicy,
    pub seed: u64,
    pub freeze_extractor: bool,
    /// Invoke the checkpoint callback every this many steps (0 disables).
    pub checkpoint_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            steps: 2000,
            batch_size: 8,
            optimizer: AdamWConfig {
                learning_rate: 1e-3,
                warmup_steps: 200,
                schedule: Schedule::LinearWarmup,
                ..AdamWConfig::default()
            },
            mask: MaskPolicy::default(),
            seed: 0,
            freeze_extractor: true,
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    /// Full-scale settings: lr 5e-4, 20,000 steps, 4,000 warmup steps.
    pub fn full_scale() -> Self {
        Self {
            steps: 20_000,
            optimizer: AdamWConfig {
                learning_rate: 5e-4,
                warmup_steps: 4000,
                schedule: Schedule::LinearWarmup,
                ..AdamWConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask.mask_prob) || self.mask.span_length == 0 {
            return Err(Error::Config(format!("invalid mask policy {:?}", self.mask)));
        }
        self.optimizer.validate()
    }
}

/// Loss values of one evaluation of the masked-prediction objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmLossValue {
    pub total: f64,
    pub masked: f64,
    pub unmasked: f64,
    pub num_masked: usize,
    pub num_unmasked: usize,
}

/// Graph nodes of the objective; `total` is the one to differentiate.
#[derive(Debug, Clone, Copy)]
pub struct MlmLossVars {
    pub total: Var,
    pub masked: Var,
    pub unmasked: Var,
    pub num_masked: usize,
    pub num_unmasked: usize,
}

/// One utterance's contribution to a batch loss.
#[derive(Debug, Clone, Copy)]
pub struct MlmItem<'a> {
    pub logits: Var,
    pub labels: &'a [usize],
    pub mask: &'a MaskSpec,
}

fn mean_over(g: &mut Graph, parts: Vec<Var>, count: usize) -> Result<Var> {
    match parts.split_first() {
        None => Ok(g.constant(Tensor::scalar(0.0))),
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = g.add(acc, p)?;
            }
            g.scale(acc, 1.0 / count as f64)
        }
    }
}

/// Batch objective with means taken over all masked (unmasked) frames of
/// the batch. At α = 1 the unmasked term is not part of `total` at all, so
/// unmasked labels cannot influence the loss or its gradient.
pub fn mlm_loss_graph(g: &mut Graph, items: &[MlmItem<'_>], alpha: f64) -> Result<MlmLossVars> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let (mut masked_parts, mut unmasked_parts) = (Vec::new(), Vec::new());
    let (mut num_masked, mut num_unmasked) = (0, 0);
    for item in items {
        let t = g.value(item.logits).rows();
        if item.labels.len() != t || item.mask.num_frames != t {
            return Err(Error::Length(format!(
                "{t} logit rows, {} labels, mask over {} frames",
                item.labels.len(),
                item.mask.num_frames
            )));
        }
        let ce = g.cross_entropy_rows(item.logits, item.labels)?;
        if !item.mask.is_empty() {
            let sel = g.select_rows(ce, &item.mask.masked_indices)?;
            masked_parts.push(g.sum(sel)?);
            num_masked += item.mask.num_masked();
        }
        let unmasked = item.mask.unmasked_indices();
        if !unmasked.is_empty() {
            num_unmasked += unmasked.len();
            let sel = g.select_rows(ce, &unmasked)?;
            unmasked_parts.push(g.sum(sel)?);
        }
    }
    let masked = mean_over(g, masked_parts, num_masked)?;
    let unmasked = mean_over(g, unmasked_parts, num_unmasked)?;
    let total = if alpha == 1.0 {
        masked
    } else if alpha == 0.0 {
        unmasked
    } else {
        let a = g.scale(masked, alpha)?;
        let b = g.scale(unmasked, 1.0 - alpha)?;
        g.add(a, b)?
    };
    Ok(MlmLossVars {
        total,
        masked,
        unmasked,
        num_masked,
        num_unmasked,
    })
}

/// Single-utterance objective on fixed logits.
pub fn mlm_loss(logits: &Tensor, labels: &[usize], mask: &MaskSpec, alpha: f64) -> Result<MlmLossValue> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let vars = mlm_loss_graph(&mut g, &[MlmItem { logits: l, labels, mask }], alpha)?;
    Ok(MlmLossValue {
        total: g.value(vars.total).item(),
        masked: g.value(vars.masked).item(),
        unmasked: g.value(vars.unmasked).item(),
        num_masked: vars.num_masked,
        num_unmasked: vars.num_unmasked,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub loss: f64,
    pub masked_loss: f64,
    pub unmasked_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ParamStore,
    /// Encoder configuration after matching the head to the label set.
    pub encoder: EncoderConfig,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Utterances grouped into batches of similar length; batch order is
/// reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct BucketSampler {
    lengths: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
}

impl BucketSampler {
    pub fn new(lengths: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if lengths.is_empty() || batch_size == 0 {
            return Err(Error::Input("bucket sampler needs items and a positive batch size".into()));
        }
        Ok(Self {
            lengths,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
        })
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(&mut self.rng);
        order.sort_by_key(|&i| self.lengths[i]);
        let mut batches: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        batches.shuffle(&mut self.rng);
        batches.reverse();
        self.queue = batches;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.refill();
        }
        self.queue.pop().expect("refilled")
    }
}

fn with_step(err: Error, step: u64) -> Error {
    match err {
        Error::Numeric { op } => Error::Numeric {
            op: format!("{op} at pretraining step {step}"),
        },
        other => other,
    }
}

/// Looks up and length-checks the labels of every utterance.
pub(crate) fn aligned_labels<'a>(
    utterances: &[&Utterance],
    labels: &'a PseudoLabels,
    encoder: &EncoderConfig,
) -> Result<Vec<&'a [usize]>> {
    let by_id = labels.by_utterance();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(utterances.len());
    for u in utterances {
        match by_id.get(u.id.as_str()) {
            None => missing.push(u.id.clone()),
            Some(codes) => {
                let t = encoder.output_frames(u.frames.rows())?;
                if codes.len() != t {
                    return Err(Error::Length(format!(
                        "`{}` has {t} encoder frames but {} pseudo labels",
                        u.id,
                        codes.len()
                    )));
                }
                out.push(*codes);
            }
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(Error::Coverage { missing })
    }
}

/// Runs `config.steps` optimizer steps of masked prediction.
///
/// The cluster head is re-initialised when its width differs from the label
/// set's K. `on_checkpoint(step, params)` fires every `checkpoint_every`
/// steps.
pub fn run_pretrain<F>(
    params: ParamStore,
    encoder: &EncoderConfig,
    utterances: &[&Utterance],
    labels: &PseudoLabels,
    config: &PretrainConfig,
    mut on_checkpoint: F,
) -> Result<PretrainOutcome>
where
    F: FnMut(u64, &ParamStore) -> Result<()>,
{
    config.validate()?;
    let encoder = encoder.with_clusters(labels.k);
    encoder.validate()?;
    let targets = aligned_labels(utterances, labels, &encoder)?;
    let mut params = params;
    reset_head_if_needed(&mut params, &encoder, config.seed)?;

    let lengths = utterances.iter().map(|u| u.frames.rows()).collect();
    let mut sampler = BucketSampler::new(lengths, config.batch_size, config.seed)?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt = OptimizerState::new(config.optimizer.clone())?;
    let mut trajectory = Vec::with_capacity(config.steps as usize);
    let freeze = config.freeze_extractor;

    for step in 1..=config.steps {
        let batch = sampler.next_batch();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let mut masks = Vec::with_capacity(batch.len());
        let mut logits = Vec::with_capacity(batch.len());
        for &i in &batch {
            let u = utterances[i];
            let t = targets[i].len();
            let mask = sample_mask(t, config.mask.mask_prob, config.mask.span_length, &mut mask_rng)?;
            let vars = forward_graph(&mut g, &bound, &encoder, &u.frames, Some(&mask), None, true)
                .map_err(|e| with_step(e, step))?;
            logits.push(vars.logits.expect("head requested"));
            masks.push(mask);
        }
        let items: Vec<MlmItem<'_>> = batch
            .iter()
            .zip(&logits)
            .zip(&masks)
            .map(|((&i, &l), m)| MlmItem {
                logits: l,
                labels: targets[i],
                mask: m,
            })
            .collect();
        let loss = mlm_loss_graph(&mut g, &items, config.alpha).map_err(|e| with_step(e, step))?;
        let grads = g.backward(loss.total).map_err(|e| with_step(e, step))?;
        let grads = bound.collect_grads(&g, &grads, |name| !(freeze && name.starts_with(EXTRACTOR_PREFIX)));
        opt.step(&mut params, &grads).map_err(|e| with_step(e, step))?;
        trajectory.push(TrajectoryPoint {
            step,
            loss: g.value(loss.total).item(),
            masked_loss: g.value(loss.masked).item(),
            unmasked_loss: g.value(loss.unmasked).item(),
        });
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            on_checkpoint(step, &params)?;
        }
    }
    Ok(PretrainOutcome {
        params,
        encoder,
        trajectory,
    })
}

/// Accuracy of the cluster head on masked frames of the given utterances.
pub fn masked_prediction_accuracy(
    params: &ParamStore,
    encoder: &EncoderConfig,
    utterances: &[&Utterance],
    labels: &PseudoLabels,
    mask: MaskPolicy,
    seed: u64,
) -> Result<f64> {
    let targets = aligned_labels(utterances, labels, encoder)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut correct, mut total) = (0usize, 0usize);
    for (u, codes) in utterances.iter().zip(targets) {
        let m = sample_mask(codes.len(), mask.mask_prob, mask.span_length, &mut rng)?;
        if m.is_empty() {
            continue;
        }
        let out = crate::encoder::forward(params, encoder, &u.frames, Some(&m))?;
        for &i in &m.masked_indices {
            correct += usize::from(argmax(out.logits.row(i)) == codes[i]);
        }
        total += m.num_masked();
    }
    if total == 0 {
        return Err(Error::Input("no masked frames were sampled".into()));
    }
    Ok(correct as f64 / total as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smoothed_losses(trajectory: &[TrajectoryPoint], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(trajectory.len());
    let mut acc = 0.0;
    for (i, p) in trajectory.iter().enumerate() {
        acc += p.loss;
        if i >= window {
            acc -= trajectory[i - window].loss;
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Two tab-separated columns `step` and `loss`, with a header line.
pub fn trajectory_tsv(trajectory: &[TrajectoryPoint]) -> String {
    let mut out = String::from("step\tloss\n");
    for p in trajectory {
        writeln!(out, "{}\t{}", p.step, p.loss).expect("writing to a String");
    }
    out
}

pub fn save_trajectory(trajectory: &[TrajectoryPoint], path: &Path) -> Result<()> {
    fs::write(path, trajectory_tsv(trajectory)).map_err(|e| Error::io(path, e))
}

pub fn load_trajectory(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let record = format!("line {}", i + 1);
        let (s, l) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, record.clone(), "expected two columns"))?;
        let step = s.parse().map_err(|e| Error::parse(path, record.clone(), e))?;
        let loss = l.parse().map_err(|e| Error::parse(path, record.clone(), e))?;
        out.push((step, loss));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_one_is_masked_loss() {
        let logits = Tensor::matrix(3, 2, vec![0.0, 0.0, 3.0, -1.0, 0.5, 0.5]).unwrap();
        let mask = MaskSpec::from_indices(3, &[0]).unwrap();
        let v = mlm_loss(&logits, &[1, 1, 0], &mask, 1.0).unwrap();
        assert!((v.total - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(v.total, v.masked);
        assert!(v.unmasked > 0.0);
    }

    #[test]
    fn half_alpha_averages_terms() {
        let logits = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let mask = MaskSpec::from_indices(2, &[1]).unwrap();
        let v = mlm_loss(&logits, &[0, 1], &mask, 0.5).unwrap();
        assert!((v.total - 0.5 * (v.masked + v.unmasked)).abs() < 1e-15);
    }

    #[test]
    fn empty_sets_contribute_zero() {
        let logits = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let v = mlm_loss(&logits, &[0, 1], &MaskSpec::none(2), 1.0).unwrap();
        assert_eq!(v.total, 0.0);
        assert_eq!(v.num_masked, 0);
        let all = MaskSpec::from_indices(2, &[0, 1]).unwrap();
        assert_eq!(mlm_loss(&logits, &[0, 1], &all, 0.0).unwrap().total, 0.0);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::matrix(1, 2, vec![0.0; 2]).unwrap();
        let mask = MaskSpec::from_indices(1, &[0]).unwrap();
        assert!(matches!(mlm_loss(&logits, &[2], &mask, 1.0), Err(Error::Label(_))));
    }

    #[test]
    fn bucket_sampler_covers_each_item_once_per_epoch() {
        let mut s = BucketSampler::new(vec![5, 3, 9, 3, 7, 1, 2], 3, 4).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn smoothing_window() {
        let traj: Vec<TrajectoryPoint> = [4.0, 2.0, 0.0]
            .iter()
            .enumerate()
            .map(|(i, &loss)| TrajectoryPoint {
                step: i as u64 + 1,
                loss,
                masked_loss: loss,
                unmasked_loss: 0.0,
            })
            .collect();
        assert_eq!(smoothed_losses(&traj, 2), vec![4.0, 3.0, 1.0]);
        assert_eq!(trajectory_tsv(&traj[..1]), "step\tloss\n1\t4\n");
    }
}
