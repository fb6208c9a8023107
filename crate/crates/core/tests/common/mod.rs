//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use flea_core::corpus::GenerationSpec;
use flea_core::encoder::{init_params, sample_mask, ConvLayerSpec, EncoderConfig, InputKind};
use flea_core::finetune::{attention_pool_graph, classifier_graph, init_head_params, ATTENTION_WEIGHT};
use flea_core::numerics::{grad_check_steps, AdamWConfig, BoundParams, Graph, ParamStore, Schedule, Tensor, Var};
use flea_core::pipeline::{content_id, ExperimentConfig};
use flea_core::pretrain::{mlm_loss_graph, MlmItem};
use flea_core::Result;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Tolerance of every finite-difference comparison.
pub const GRAD_TOL: f64 = 1e-4;
/// Finite-difference steps, most accurate first for typical gradients.
pub const GRAD_STEPS: [f64; 4] = [1e-5, 1e-4, 1e-6, 1e-3];
pub const MAX_T: usize = 12;
pub const MAX_D: usize = 8;

/// Published results table transcribed row by row as CSV.
pub const PUBLISHED_CSV: &str = "\
layers,clusters,average_ua,average_wa,attention_ua,attention_wa
BL,,74.3,,,
TAPT,,74.1,72.8,,
6,50,75.0,73.6,75.2,73.6
6,100,74.8,73.3,75.1,73.5
6,150,74.5,72.7,74.3,73.2
9,50,75.1,73.5,75.7,74.7
9,100,75.0,73.9,75.3,74.0
9,150,74.8,73.5,74.6,73.2
11,50,74.3,72.7,74.4,73.0
11,100,74.0,72.8,74.2,72.7
11,150,74.3,70.1,73.5,72.5
";

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape by construction")
}

/// Frames-path encoder small enough for exhaustive finite differences.
pub fn tiny_encoder(feature_dim: usize, num_clusters: usize) -> EncoderConfig {
    EncoderConfig {
        input: InputKind::Frames { feature_dim },
        embed_dim: 8,
        num_transformer_layers: 2,
        num_heads: 2,
        ffn_dim: 12,
        num_clusters,
        max_frames: 64,
    }
}

/// Signal-path encoder: two strided convolutions, total stride 4.
pub fn tiny_signal_encoder(num_clusters: usize) -> EncoderConfig {
    EncoderConfig {
        input: InputKind::Signal {
            conv_layers: vec![
                ConvLayerSpec {
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                },
                ConvLayerSpec {
                    out_channels: 4,
                    kernel: 2,
                    stride: 2,
                },
            ],
        },
        embed_dim: 8,
        num_transformer_layers: 1,
        num_heads: 2,
        ffn_dim: 8,
        num_clusters,
        max_frames: 64,
    }
}

/// Sum of `out ⊙ r` for a fixed random `r`: a scalar whose gradient
/// exercises every output element.
fn weighted_sum(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let p = g.mul(out, r)?;
    g.sum(p)
}

fn probe(rng: &mut ChaCha8Rng, g: &Graph, out: Var) -> Tensor {
    randn(rng, g.value(out).shape())
}

/// Worst relative error of one op or composite over its trials.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

type Builder = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

/// Checks one randomly shaped instance of `op`: `inputs` are the
/// differentiated tensors, `op` maps their leaves to the output node.
fn check_op<F>(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, op: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Shape of the output decides the probe; evaluate once on constants.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let r = probe(rng, &g, out);
    let report = grad_check_steps(
        |g, vars| {
            let out = op(g, vars)?;
            weighted_sum(g, out, &r)
        },
        &inputs,
        &GRAD_STEPS,
    )?;
    Ok(report.max_rel_err)
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=MAX_T), rng.random_range(1..=MAX_D))
}

fn valid_flags(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut v: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let keep = rng.random_range(0..n);
    v[keep] = true;
    v
}

fn op_builders() -> Vec<(&'static str, Builder)> {
    vec![
        (
            "matmul",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let m = rng.random_range(1..=MAX_D);
                let a = randn(rng, &[t, d]);
                let b = randn(rng, &[d, m]);
                check_op(rng, vec![a, b], |g, v| g.matmul(v[0], v[1]))
            }),
        ),
        (
            "transpose",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let a = randn(rng, &[t, d]);
                check_op(rng, vec![a], |g, v| g.transpose(v[0]))
            }),
        ),
        (
            "add",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let a = randn(rng, &[t, d]);
                let b = randn(rng, &[t, d]);
                check_op(rng, vec![a, b], |g, v| g.add(v[0], v[1]))
            }),
        ),
        (
            "add_bias",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let a = randn(rng, &[t, d]);
                let b = randn(rng, &[d]);
                check_op(rng, vec![a, b], |g, v| g.add_bias(v[0], v[1]))
            }),
        ),
        (
            "mul",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let a = randn(rng, &[t, d]);
                let b = randn(rng, &[t, d]);
                check_op(rng, vec![a, b], |g, v| g.mul(v[0], v[1]))
            }),
        ),
        (
            "scale",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let a = randn(rng, &[t, d]);
                let c: f64 = rng.random_range(-3.0..3.0);
                check_op(rng, vec![a], move |g, v| g.scale(v[0], c))
            }),
        ),
        (
            "tanh",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let a = randn(rng, &[t, d]);
                check_op(rng, vec![a], |g, v| g.tanh(v[0]))
            }),
        ),
        (
            "gelu",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let a = randn(rng, &[t, d]);
                check_op(rng, vec![a], |g, v| g.gelu(v[0]))
            }),
        ),
        (
            "softmax_rows",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let a = randn(rng, &[t, d]);
                check_op(rng, vec![a], |g, v| g.softmax_rows(v[0], None))
            }),
        ),
        (
            "softmax_rows (validity mask)",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let a = randn(rng, &[t, d]);
                let valid = valid_flags(rng, d);
                check_op(rng, vec![a], move |g, v| g.softmax_rows(v[0], Some(&valid)))
            }),
        ),
        (
            "layer_norm",
            Box::new(|rng| {
                let t = rng.random_range(1..=MAX_T);
                let d = rng.random_range(2..=MAX_D);
                let x = randn(rng, &[t, d]);
                let gamma = randn(rng, &[d]);
                let beta = randn(rng, &[d]);
                check_op(rng, vec![x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2]))
            }),
        ),
        (
            "conv1d",
            Box::new(|rng| {
                let c_in = rng.random_range(1..=3);
                let c_out = rng.random_range(1..=4);
                let kernel = rng.random_range(1..=3);
                let stride = rng.random_range(1..=2);
                let t_in = rng.random_range(kernel..=MAX_T);
                let x = randn(rng, &[t_in, c_in]);
                let w = randn(rng, &[c_out, kernel * c_in]);
                let b = randn(rng, &[c_out]);
                check_op(rng, vec![x, w, b], move |g, v| g.conv1d(v[0], v[1], v[2], stride))
            }),
        ),
        (
            "embedding",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let vocab = rng.random_range(1..=6);
                let table = randn(rng, &[vocab, d]);
                let ids: Vec<usize> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
                check_op(rng, vec![table], move |g, v| g.embedding(v[0], &ids))
            }),
        ),
        (
            "cross_entropy_rows",
            Box::new(|rng| {
                let (t, k) = dims(rng);
                let logits = randn(rng, &[t, k]);
                let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..k)).collect();
                check_op(rng, vec![logits], move |g, v| g.cross_entropy_rows(v[0], &targets))
            }),
        ),
        (
            "replace_rows",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let x = randn(rng, &[t, d]);
                let fill = randn(rng, &[d]);
                let rows: Vec<bool> = (0..t).map(|_| rng.random_bool(0.5)).collect();
                check_op(rng, vec![x, fill], move |g, v| g.replace_rows(v[0], v[1], &rows))
            }),
        ),
        (
            "select_rows",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let x = randn(rng, &[t, d]);
                let n = rng.random_range(1..=MAX_T);
                let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..t)).collect();
                check_op(rng, vec![x], move |g, v| g.select_rows(v[0], &rows))
            }),
        ),
        (
            "slice_cols",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let x = randn(rng, &[t, d]);
                let start = rng.random_range(0..d);
                let len = rng.random_range(1..=d - start);
                check_op(rng, vec![x], move |g, v| g.slice_cols(v[0], start, len))
            }),
        ),
        (
            "concat_cols",
            Box::new(|rng| {
                let t = rng.random_range(1..=MAX_T);
                let parts: Vec<Tensor> = (0..rng.random_range(1..=3))
                    .map(|_| {
                        let w = rng.random_range(1..=4);
                        randn(rng, &[t, w])
                    })
                    .collect();
                check_op(rng, parts, |g, v| g.concat_cols(v))
            }),
        ),
        (
            "sum",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let x = randn(rng, &[t, d]);
                check_op(rng, vec![x], |g, v| g.sum(v[0]))
            }),
        ),
        (
            "mean",
            Box::new(|rng| {
                let (t, d) = dims(rng);
                let x = randn(rng, &[t, d]);
                check_op(rng, vec![x], |g, v| g.mean(v[0]))
            }),
        ),
        ("mlm_loss composite (frames)", Box::new(|rng| mlm_composite(rng, false))),
        ("mlm_loss composite (signal)", Box::new(|rng| mlm_composite(rng, true))),
        ("attention pool + classifier composite", Box::new(attention_head_composite)),
    ]
}

/// Parameter names and tensors in a fixed order, for finite differences.
pub fn flatten(params: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    params.iter().map(|(k, v)| (k.to_string(), v.clone())).unzip()
}

pub fn rebind(names: &[String], vars: &[Var]) -> BoundParams {
    BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// Extract → mask → encoder → masked cross-entropy, differentiated with
/// respect to every encoder parameter including the mask embedding.
fn mlm_composite(rng: &mut ChaCha8Rng, signal: bool) -> Result<f64> {
    let k = rng.random_range(2..=5);
    let (config, input) = if signal {
        let config = tiny_signal_encoder(k);
        // Stride 4 with receptive field 7 keeps T within 2..=12.
        let len = rng.random_range(11..=51);
        (config, randn(rng, &[len]))
    } else {
        let f = rng.random_range(1..=MAX_D);
        let t = rng.random_range(2..=MAX_T);
        (tiny_encoder(f, k), randn(rng, &[t, f]))
    };
    let t = if signal { config.output_frames(input.len())? } else { input.rows() };
    let params = init_params(&config, rng.random())?;
    let mut mask = sample_mask(t, 0.3, 2, rng)?;
    if mask.is_empty() {
        mask = flea_core::encoder::MaskSpec::from_indices(t, &[rng.random_range(0..t)])?;
    }
    let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..k)).collect();
    let alpha = rng.random_range(0.0..=1.0);
    let (names, tensors) = flatten(&params);
    let report = grad_check_steps(
        |g, vars| {
            let bound = rebind(&names, vars);
            let enc = flea_core::encoder::forward_graph(g, &bound, &config, &input, Some(&mask), None, true)?;
            let logits = enc.logits.expect("head requested");
            let item = MlmItem {
                logits,
                labels: &labels,
                mask: &mask,
            };
            Ok(mlm_loss_graph(g, &[item], alpha)?.total)
        },
        &tensors,
        &GRAD_STEPS,
    )?;
    Ok(report.max_rel_err)
}

/// Frames → attention pool → classifier → cross-entropy, differentiated
/// with respect to the frames, W and the classifier.
fn attention_head_composite(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, d) = dims(rng);
    let x = randn(rng, &[n, d]);
    let mut head = ParamStore::new();
    init_head_params(&mut head, d, rng.random());
    let w = randn(rng, &[1, d]);
    head.insert(ATTENTION_WEIGHT, w);
    let label = rng.random_range(0..4);
    let valid = valid_flags(rng, n);
    let (mut names, mut tensors) = flatten(&head);
    names.push("frames".into());
    tensors.push(x);
    let report = grad_check_steps(
        |g, vars| {
            let bound = rebind(&names, vars);
            let x = bound.var("frames")?;
            let (z, _) = attention_pool_graph(g, x, bound.var(ATTENTION_WEIGHT)?, Some(&valid))?;
            let logits = classifier_graph(g, &bound, z)?;
            let ce = g.cross_entropy_rows(logits, &[label])?;
            g.sum(ce)
        },
        &tensors,
        &GRAD_STEPS,
    )?;
    Ok(report.max_rel_err)
}

/// Runs every op and composite `trials` times on fresh random instances.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (i, (name, build)) in op_builders().into_iter().enumerate() {
        let mut rng = rng(seed.wrapping_mul(1000).wrapping_add(i as u64));
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            worst = worst.max(build(&mut rng)?);
        }
        out.push(GradCase {
            name,
            trials,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

/// Training settings calibrated for a single laptop core: every phase is
/// short but long enough for the synthetic task to be learned.
pub fn light_experiment(output_dir: &Path, seed: u64, inconsistency_rate: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        output_dir: output_dir.to_path_buf(),
        corpus: GenerationSpec {
            sessions: 5,
            utterances_per_speaker: 20,
            feature_dim: 8,
            inconsistency_rate,
            seed,
            ..GenerationSpec::default()
        },
        ..ExperimentConfig::default()
    };
    let warmup = AdamWConfig {
        learning_rate: 1e-3,
        warmup_steps: 30,
        schedule: Schedule::LinearWarmup,
        ..AdamWConfig::default()
    };
    for pre in [&mut cfg.tapt.pretrain, &mut cfg.pretrain] {
        pre.steps = 300;
        pre.optimizer = warmup.clone();
    }
    cfg.tapt.finetune.epochs = 6;
    cfg.finetune.epochs = 6;
    cfg.with_seed(seed)
}

/// Much smaller still: for plumbing tests that only check files and errors.
pub fn tiny_experiment(output_dir: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = light_experiment(output_dir, seed, 0.0);
    cfg.corpus.utterances_per_speaker = 6;
    cfg.corpus.frames_min = 6;
    cfg.corpus.frames_max = 10;
    for pre in [&mut cfg.tapt.pretrain, &mut cfg.pretrain] {
        pre.steps = 12;
        pre.batch_size = 4;
        pre.optimizer.warmup_steps = 4;
    }
    cfg.tapt.finetune.epochs = 2;
    cfg.finetune.epochs = 2;
    cfg
}

/// Content id of every file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).expect("readable output directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
                out.insert(rel, content_id(&std::fs::read(&path).expect("readable file")));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
