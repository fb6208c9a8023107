//! Phase orchestration: corpus → TAPT → cluster → continued pretraining →
//! fine-tuning → evaluation, plus the layer × K × pooling ablation runner.
//!
//! Every phase reads its inputs from, and writes its outputs to, files under
//! the output directory, so each one can be re-run on its own:
//!
//! ```text
//! out/
//!   config.toml                 resolved experiment configuration
//!   corpus.jsonl
//!   fold{k}/tapt/               base_codebook.json model.ckpt trajectory.tsv metrics.json history.jsonl
//!   fold{k}/cluster/            codebook.json labels.jsonl diagnostics.json
//!   fold{k}/cpt/                model.ckpt trajectory.tsv [step{n}.ckpt]
//!   fold{k}/finetune/           model.ckpt metrics.json predictions.jsonl history.jsonl
//!   metrics.jsonl summary.json report.csv report.txt
//!   ablation/                   seed{s}/fold{k}/tapt, seed{s}/L{i}_K{k}/fold{f}/..., results.json, report.*
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cluster::{
    cluster_diagnostics, kmeans_assign, kmeans_fit, Codebook, CodebookProvenance, FeatureKind,
    KMeansConfig, PseudoLabels,
};
use crate::corpus::{
    generate_corpus, json_line, load_corpus, make_folds, save_corpus, Corpus, FoldPlan, GenerationSpec,
    Utterance,
};
use crate::encoder::{init_params, layer_embeddings, EncoderConfig, EncoderPreset, TapSpec};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_folds, published_reference, render_report, Aggregate, CellKey, CellOutcome, FoldRecord,
    Metrics, Pooling, ResultsGrid, Score,
};
use crate::finetune::{run_finetune, run_tapt, FinetuneConfig, TaptConfig, CLASSIFIER_PREFIX};
use crate::numerics::{Checkpoint, ParamStore, Tensor};
use crate::pretrain::{run_pretrain, save_trajectory, PretrainConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAJECTORY_FILE: &str = "trajectory.tsv";
pub const BASE_CODEBOOK_FILE: &str = "base_codebook.json";
pub const CODEBOOK_FILE: &str = "codebook.json";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const HISTORY_FILE: &str = "history.jsonl";

/// Where phase 2 starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CptInit {
    /// The same initial encoder phase 1 started from.
    Base,
    /// The phase-1 (TAPT) encoder.
    Tapt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansSettings {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansSettings {
    fn default() -> Self {
        let d = KMeansConfig::default();
        Self {
            max_iters: d.max_iters,
            tol: d.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub layers: Vec<usize>,
    pub clusters: Vec<usize>,
    pub poolings: Vec<Pooling>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            layers: vec![1, 2, 3],
            clusters: vec![4, 8, 16],
            poolings: Pooling::ALL.to_vec(),
            seeds: vec![0],
        }
    }
}

impl AblationSpec {
    /// The full-scale grid: layers 6, 9, 11 and 50, 100, 150 clusters.
    pub fn full_scale() -> Self {
        Self {
            layers: vec![6, 9, 11],
            clusters: vec![50, 100, 150],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for encoder initialisation and k-means.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Existing corpus file; when absent the corpus is generated from `corpus`.
    pub corpus_path: Option<PathBuf>,
    pub corpus: GenerationSpec,
    pub encoder_preset: EncoderPreset,
    /// 1-based transformer layer whose embeddings are clustered.
    pub tap_layer: usize,
    pub num_clusters: usize,
    pub pooling: Pooling,
    /// Cluster count of the base-feature codebook used by phase 1.
    pub base_clusters: usize,
    pub cpt_init: CptInit,
    /// Cluster on every speaker's frames (reproduces the leaky baseline).
    pub leaky_clustering: bool,
    pub kmeans: KMeansSettings,
    pub tapt: TaptConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub ablation: AblationSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus_path: None,
            corpus: GenerationSpec::default(),
            encoder_preset: EncoderPreset::Desk,
            tap_layer: 2,
            num_clusters: 4,
            pooling: Pooling::Attention,
            base_clusters: 4,
            cpt_init: CptInit::Base,
            leaky_clustering: false,
            kmeans: KMeansSettings::default(),
            tapt: TaptConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            ablation: AblationSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse(origin, "experiment config", e))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    /// The same experiment with every training seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.tapt.pretrain.seed = seed;
        cfg.tapt.finetune.seed = seed;
        cfg.pretrain.seed = seed;
        cfg.finetune.seed = seed;
        cfg
    }

    pub fn encoder_config(&self, feature_dim: usize, num_clusters: usize) -> EncoderConfig {
        EncoderConfig::from_preset(self.encoder_preset, feature_dim, num_clusters)
    }

    pub fn validate(&self) -> Result<()> {
        let enc = self.encoder_config(self.corpus.feature_dim, self.num_clusters);
        enc.validate()?;
        TapSpec::new(self.tap_layer, &enc)?;
        if self.num_clusters == 0 || self.base_clusters == 0 {
            return Err(Error::Config("cluster counts must be positive".into()));
        }
        if self.corpus_path.is_none() {
            self.corpus.validate()?;
        }
        self.tapt.pretrain.validate()?;
        self.tapt.finetune.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    fn kmeans_config(&self, k: usize) -> KMeansConfig {
        KMeansConfig {
            k,
            seed: self.seed,
            max_iters: self.kmeans.max_iters,
            tol: self.kmeans.tol,
        }
    }
}

/// Metadata stored in every checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub phase: String,
    pub fold: usize,
    pub encoder: EncoderConfig,
    /// Codebook whose labels the model was trained on.
    pub codebook_id: Option<String>,
    pub parent_checkpoint: Option<String>,
    pub pooling: Option<Pooling>,
    pub experiment: ExperimentConfig,
}

fn write_checkpoint(path: &Path, meta: &CheckpointMeta, params: ParamStore) -> Result<String> {
    let value = serde_json::to_value(meta).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    let ckpt = Checkpoint::new(value, params);
    let bytes = ckpt.to_bytes()?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(content_id(&bytes))
}

/// Checkpoint parameters, metadata and content id.
pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes, path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(ckpt.metadata).map_err(|e| Error::parse(path, "checkpoint metadata", e))?;
    Ok((ckpt.params, meta, content_id(&bytes)))
}

/// SHA-256 prefix identifying a file's content.
pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Config(format!("serialization: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, "document", e))
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let text = records.iter().map(json_line).collect::<Result<String>>()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Directories used by one fold's phases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldLayout {
    pub tapt: PathBuf,
    pub cluster: PathBuf,
    pub cpt: PathBuf,
    pub finetune: PathBuf,
}

impl FoldLayout {
    pub fn standard(root: &Path, fold: usize) -> Self {
        let base = root.join(format!("fold{fold}"));
        Self {
            tapt: base.join("tapt"),
            cluster: base.join("cluster"),
            cpt: base.join("cpt"),
            finetune: base.join("finetune"),
        }
    }

    fn ablation(root: &Path, seed: u64, layer: usize, k: usize, fold: usize, pooling: Pooling) -> Self {
        let seed_root = root.join(format!("seed{seed}"));
        let cell = seed_root.join(format!("L{layer}_K{k}")).join(format!("fold{fold}"));
        Self {
            tapt: seed_root.join(format!("fold{fold}")).join("tapt"),
            cluster: cell.join("cluster"),
            cpt: cell.join("cpt"),
            finetune: cell.join(format!("finetune_{}", pooling.name())),
        }
    }
}

pub fn corpus_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(CORPUS_FILE)
}

/// Writes `config.toml` and the corpus file (generated or copied).
pub fn cmd_gen_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    cfg.validate()?;
    create_dir(&cfg.output_dir)?;
    let corpus = match &cfg.corpus_path {
        Some(p) => load_corpus(p)?,
        None => generate_corpus(&cfg.corpus)?,
    };
    let config_path = cfg.output_dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    save_corpus(&corpus, &corpus_path(cfg))?;
    Ok(corpus)
}

/// The corpus written by [`cmd_gen_corpus`].
pub fn read_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let path = corpus_path(cfg);
    if !path.exists() {
        return Err(Error::Input(format!(
            "{} not found; run gen-corpus first",
            path.display()
        )));
    }
    load_corpus(&path)
}

fn fold_plan(corpus: &Corpus, fold: usize) -> Result<FoldPlan> {
    make_folds(corpus)?
        .into_iter()
        .nth(fold)
        .ok_or_else(|| Error::Fold(format!("fold index {fold} outside 0..5")))
}

fn sorted_speakers(utts: &[&Utterance]) -> Vec<String> {
    utts.iter()
        .map(|u| u.speaker.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn stack_frames(utts: &[&Utterance]) -> Result<Tensor> {
    let parts: Vec<&Tensor> = utts.iter().map(|u| &u.frames).collect();
    Tensor::vstack(&parts)
}

/// Utterances clustering may see: training speakers, or everyone when leaky.
fn clustering_pool<'a>(cfg: &ExperimentConfig, corpus: &'a Corpus, fold: &FoldPlan) -> Result<Vec<&'a Utterance>> {
    if cfg.leaky_clustering {
        Ok(corpus.utterances.iter().collect())
    } else {
        Ok(fold.split(corpus)?.train)
    }
}

/// Phase 1: base-feature codebook, TAPT pretraining and average-pooling
/// fine-tuning. Returns the phase-1 test metrics.
pub fn phase_tapt(cfg: &ExperimentConfig, corpus: &Corpus, fold: &FoldPlan, layout: &FoldLayout) -> Result<Metrics> {
    create_dir(&layout.tapt)?;
    let pool = clustering_pool(cfg, corpus, fold)?;
    let provenance = CodebookProvenance {
        feature_kind: FeatureKind::BaseFeatures,
        tap_layer: None,
        source_checkpoint: None,
        seed: cfg.seed,
        fit_speakers: sorted_speakers(&pool),
        leaky: cfg.leaky_clustering,
    };
    let base = kmeans_fit(&stack_frames(&pool)?, &cfg.kmeans_config(cfg.base_clusters), provenance)?;
    base.save(&layout.tapt.join(BASE_CODEBOOK_FILE))?;

    let encoder = cfg.encoder_config(corpus.feature_dim, cfg.base_clusters);
    let params = init_params(&encoder, cfg.seed)?;
    let outcome = run_tapt(params, &encoder, corpus, fold, &base, &cfg.tapt)?;
    let meta = CheckpointMeta {
        phase: "tapt".into(),
        fold: fold.fold_index,
        encoder: outcome.encoder.clone(),
        codebook_id: Some(base.id.clone()),
        parent_checkpoint: None,
        pooling: Some(Pooling::Average),
        experiment: cfg.clone(),
    };
    write_checkpoint(&layout.tapt.join(MODEL_FILE), &meta, outcome.finetune.params)?;
    save_trajectory(&outcome.trajectory, &layout.tapt.join(TRAJECTORY_FILE))?;
    write_lines(&layout.tapt.join(HISTORY_FILE), &outcome.finetune.history)?;
    let metrics = outcome.finetune.test_metrics;
    write_json(&layout.tapt.join(METRICS_FILE), &FoldRecord::new(fold.fold_index, &metrics))?;
    Ok(metrics)
}

/// Phase 2a: cluster the phase-1 model's tap-layer embeddings and label the
/// training utterances.
pub fn phase_cluster(cfg: &ExperimentConfig, corpus: &Corpus, fold: &FoldPlan, layout: &FoldLayout) -> Result<Codebook> {
    create_dir(&layout.cluster)?;
    let (params, meta, ckpt_id) = read_checkpoint(&layout.tapt.join(MODEL_FILE))?;
    if meta.phase != "tapt" || meta.fold != fold.fold_index {
        return Err(Error::Provenance(format!(
            "expected a fold {} TAPT checkpoint, found phase `{}` fold {}",
            fold.fold_index, meta.phase, meta.fold
        )));
    }
    let tap = TapSpec::new(cfg.tap_layer, &meta.encoder)?;
    let pool = clustering_pool(cfg, corpus, fold)?;
    let fit_emb = layer_embeddings(pool.iter().copied(), &params, &meta.encoder, tap)?;
    let provenance = CodebookProvenance {
        feature_kind: FeatureKind::TransformerLayer,
        tap_layer: Some(cfg.tap_layer),
        source_checkpoint: Some(ckpt_id),
        seed: cfg.seed,
        fit_speakers: sorted_speakers(&pool),
        leaky: cfg.leaky_clustering,
    };
    let codebook = kmeans_fit(&fit_emb.concat()?, &cfg.kmeans_config(cfg.num_clusters), provenance)?;

    let train = fold.split(corpus)?.train;
    let seqs = if cfg.leaky_clustering {
        let train_emb = layer_embeddings(train.iter().copied(), &params, &meta.encoder, tap)?;
        train_emb
            .utterance_ids
            .iter()
            .zip(&train_emb.matrices)
            .map(|(id, m)| kmeans_assign(&codebook, id, m))
            .collect::<Result<Vec<_>>>()?
    } else {
        fit_emb
            .utterance_ids
            .iter()
            .zip(&fit_emb.matrices)
            .map(|(id, m)| kmeans_assign(&codebook, id, m))
            .collect::<Result<Vec<_>>>()?
    };
    let diagnostics = cluster_diagnostics(&seqs, train.iter().copied())?;
    let labels = PseudoLabels::new(&codebook, seqs)?;
    codebook.save(&layout.cluster.join(CODEBOOK_FILE))?;
    labels.save(&layout.cluster.join(LABELS_FILE))?;
    write_json(&layout.cluster.join(DIAGNOSTICS_FILE), &diagnostics)?;
    Ok(codebook)
}

/// Refuses codebooks that do not match the configuration or that saw
/// held-out speakers without the leaky flag.
pub fn check_codebook(cfg: &ExperimentConfig, corpus: &Corpus, fold: &FoldPlan, codebook: &Codebook) -> Result<()> {
    let p = &codebook.provenance;
    if p.feature_kind != FeatureKind::TransformerLayer
        || p.tap_layer != Some(cfg.tap_layer)
        || codebook.k != cfg.num_clusters
    {
        return Err(Error::Provenance(format!(
            "codebook {} was fit with tap layer {:?} and K = {}, configuration asks for layer {} and K = {}",
            codebook.id, p.tap_layer, codebook.k, cfg.tap_layer, cfg.num_clusters
        )));
    }
    if p.leaky != cfg.leaky_clustering {
        return Err(Error::Provenance(format!(
            "codebook {} leaky flag is {}, configuration says {}",
            codebook.id, p.leaky, cfg.leaky_clustering
        )));
    }
    if !cfg.leaky_clustering {
        let train: BTreeSet<String> = fold.train_speakers(corpus).into_iter().collect();
        let outside: Vec<&String> = p.fit_speakers.iter().filter(|s| !train.contains(*s)).collect();
        if !outside.is_empty() {
            return Err(Error::Provenance(format!(
                "codebook {} was fit on speakers outside fold {} training set: {outside:?}",
                codebook.id, fold.fold_index
            )));
        }
    }
    Ok(())
}

/// Phase 2b: continued masked-prediction pretraining on the pseudo labels.
pub fn phase_pretrain(cfg: &ExperimentConfig, corpus: &Corpus, fold: &FoldPlan, layout: &FoldLayout) -> Result<()> {
    create_dir(&layout.cpt)?;
    let codebook = Codebook::load(&layout.cluster.join(CODEBOOK_FILE))?;
    let labels = PseudoLabels::load(&layout.cluster.join(LABELS_FILE))?;
    if labels.codebook_id != codebook.id {
        return Err(Error::Provenance(format!(
            "pseudo labels reference codebook {}, but the codebook on disk is {}",
            labels.codebook_id, codebook.id
        )));
    }
    check_codebook(cfg, corpus, fold, &codebook)?;

    let encoder = cfg.encoder_config(corpus.feature_dim, codebook.k);
    let (params, parent) = match cfg.cpt_init {
        CptInit::Base => (init_params(&encoder, cfg.seed)?, None),
        CptInit::Tapt => {
            let (mut p, meta, id) = read_checkpoint(&layout.tapt.join(MODEL_FILE))?;
            if meta.encoder.with_clusters(codebook.k) != encoder {
                return Err(Error::Provenance("TAPT checkpoint has a different encoder shape".into()));
            }
            p.remove_prefix("pool.");
            p.remove_prefix(&format!("{CLASSIFIER_PREFIX}."));
            (p, Some(id))
        }
    };
    let train = fold.split(corpus)?.train;
    let meta_for = |encoder: EncoderConfig| CheckpointMeta {
        phase: "cpt".into(),
        fold: fold.fold_index,
        encoder,
        codebook_id: Some(codebook.id.clone()),
        parent_checkpoint: parent.clone(),
        pooling: None,
        experiment: cfg.clone(),
    };
    let outcome = run_pretrain(params, &encoder, &train, &labels, &cfg.pretrain, |step, p| {
        let path = layout.cpt.join(format!("step{step}.ckpt"));
        write_checkpoint(&path, &meta_for(encoder.clone()), p.clone()).map(|_| ())
    })?;
    write_checkpoint(&layout.cpt.join(MODEL_FILE), &meta_for(outcome.encoder.clone()), outcome.params)?;
    save_trajectory(&outcome.trajectory, &layout.cpt.join(TRAJECTORY_FILE))
}

/// Phase 3: fine-tune the continued-pretrained encoder with the configured
/// pooling. Returns the fold's test metrics.
pub fn phase_finetune(cfg: &ExperimentConfig, corpus: &Corpus, fold: &FoldPlan, layout: &FoldLayout) -> Result<Metrics> {
    create_dir(&layout.finetune)?;
    let (params, meta, cpt_id) = read_checkpoint(&layout.cpt.join(MODEL_FILE))?;
    let codebook = Codebook::load(&layout.cluster.join(CODEBOOK_FILE))?;
    if meta.phase != "cpt" || meta.codebook_id.as_deref() != Some(codebook.id.as_str()) {
        return Err(Error::Provenance(format!(
            "checkpoint ({} phase) was trained on codebook {:?}, but this fold's codebook is {}",
            meta.phase, meta.codebook_id, codebook.id
        )));
    }
    check_codebook(cfg, corpus, fold, &codebook)?;
    let config = FinetuneConfig {
        pooling: cfg.pooling,
        ..cfg.finetune.clone()
    };
    let outcome = run_finetune(params, &meta.encoder, corpus, fold, &config)?;
    let out_meta = CheckpointMeta {
        phase: "finetune".into(),
        fold: fold.fold_index,
        encoder: meta.encoder,
        codebook_id: Some(codebook.id),
        parent_checkpoint: Some(cpt_id),
        pooling: Some(cfg.pooling),
        experiment: cfg.clone(),
    };
    write_checkpoint(&layout.finetune.join(MODEL_FILE), &out_meta, outcome.params)?;
    write_lines(&layout.finetune.join(PREDICTIONS_FILE), &outcome.test_predictions)?;
    write_lines(&layout.finetune.join(HISTORY_FILE), &outcome.history)?;
    write_json(
        &layout.finetune.join(METRICS_FILE),
        &FoldRecord::new(fold.fold_index, &outcome.test_metrics),
    )?;
    Ok(outcome.test_metrics)
}

fn read_fold_metrics(path: &Path) -> Result<Metrics> {
    read_json::<FoldRecord>(path)?.metrics()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub aggregate: Aggregate,
    pub tapt: Option<Aggregate>,
    pub cell: CellKey,
    pub experiment: ExperimentConfig,
}

/// Collects the five fold results and writes `metrics.jsonl`,
/// `summary.json` and the report files.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let root = &cfg.output_dir;
    let mut records = Vec::new();
    let mut tapt = Vec::new();
    for fold in 0..crate::corpus::NUM_FOLDS {
        let layout = FoldLayout::standard(root, fold);
        let m = read_fold_metrics(&layout.finetune.join(METRICS_FILE))?;
        records.push(FoldRecord::new(fold, &m));
        if let Ok(t) = read_fold_metrics(&layout.tapt.join(METRICS_FILE)) {
            tapt.push(t);
        }
    }
    let per_fold: Vec<Metrics> = records.iter().map(FoldRecord::metrics).collect::<Result<_>>()?;
    let aggregate = aggregate_folds(&per_fold)?;
    let tapt = if tapt.len() == crate::corpus::NUM_FOLDS {
        Some(aggregate_folds(&tapt)?)
    } else {
        None
    };
    let cell = CellKey {
        tap_layer: cfg.tap_layer,
        num_clusters: cfg.num_clusters,
        pooling: cfg.pooling,
    };
    let mut grid = ResultsGrid::default();
    if let Some(t) = &tapt {
        grid.baselines.push((
            "TAPT".into(),
            Score {
                ua: t.ua_mean,
                wa: Some(t.wa_mean),
            },
        ));
    }
    grid.insert(
        cell,
        CellOutcome::Done(Score {
            ua: aggregate.ua_mean,
            wa: Some(aggregate.wa_mean),
        }),
    );
    write_lines(&root.join("metrics.jsonl"), &records)?;
    write_report(root, &grid)?;
    let summary = RunSummary {
        aggregate,
        tapt,
        cell,
        experiment: cfg.clone(),
    };
    write_json(&root.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_report(dir: &Path, grid: &ResultsGrid) -> Result<()> {
    let report = render_report(grid);
    let reference = render_report(&published_reference());
    let text = format!(
        "Desk-scale results, UA/WA (%)\n\n{}\nPublished full-scale reference (HuBERT-base, IEMOCAP; not reproducible at desk scale)\n\n{}",
        report.text, reference.text
    );
    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, report.csv).map_err(|e| Error::io(&csv_path, e))?;
    let txt_path = dir.join("report.txt");
    fs::write(&txt_path, text).map_err(|e| Error::io(&txt_path, e))
}

fn run_fold(cfg: &ExperimentConfig, corpus: &Corpus, fold: &FoldPlan) -> Result<Metrics> {
    let layout = FoldLayout::standard(&cfg.output_dir, fold.fold_index);
    phase_tapt(cfg, corpus, fold, &layout)?;
    phase_cluster(cfg, corpus, fold, &layout)?;
    phase_pretrain(cfg, corpus, fold, &layout)?;
    phase_finetune(cfg, corpus, fold, &layout)
}

/// All phases for all folds (folds run in parallel), then evaluation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let corpus = cmd_gen_corpus(cfg)?;
    let folds = make_folds(&corpus)?;
    folds
        .par_iter()
        .map(|f| run_fold(cfg, &corpus, f))
        .collect::<Result<Vec<_>>>()?;
    cmd_eval(cfg)
}

/// Runs one phase for the given folds (all five when `folds` is empty).
pub fn run_phase(cfg: &ExperimentConfig, phase: Phase, folds: &[usize]) -> Result<()> {
    let corpus = read_corpus(cfg)?;
    let indices: Vec<usize> = if folds.is_empty() {
        (0..crate::corpus::NUM_FOLDS).collect()
    } else {
        folds.to_vec()
    };
    indices
        .par_iter()
        .map(|&k| {
            let fold = fold_plan(&corpus, k)?;
            let layout = FoldLayout::standard(&cfg.output_dir, k);
            match phase {
                Phase::Tapt => phase_tapt(cfg, &corpus, &fold, &layout).map(|_| ()),
                Phase::Cluster => phase_cluster(cfg, &corpus, &fold, &layout).map(|_| ()),
                Phase::Pretrain => phase_pretrain(cfg, &corpus, &fold, &layout),
                Phase::Finetune => phase_finetune(cfg, &corpus, &fold, &layout).map(|_| ()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Tapt,
    Cluster,
    Pretrain,
    Finetune,
}

/// Provenance of one fold of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldProvenance {
    pub fold: usize,
    pub codebook_id: String,
    pub cpt_checkpoint: String,
    pub finetune_checkpoint: String,
    pub ua: f64,
    pub wa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub outcome: CellOutcome,
    pub folds: Vec<FoldProvenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    /// Median over seeds, or the first failure.
    pub outcome: CellOutcome,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResults {
    pub grid: ResultsGrid,
    pub cells: Vec<CellResult>,
    /// TAPT (phase-1) aggregate per seed; `None` where phase 1 failed.
    pub tapt: Vec<(u64, Option<Score>)>,
    pub experiment: ExperimentConfig,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

type FoldCellResult = Result<Vec<(Pooling, FoldProvenance)>>;

fn run_ablation_fold(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    fold: &FoldPlan,
    root: &Path,
    layer: usize,
    k: usize,
) -> FoldCellResult {
    let mut cell_cfg = cfg.clone();
    cell_cfg.tap_layer = layer;
    cell_cfg.num_clusters = k;
    let first = FoldLayout::ablation(root, cfg.seed, layer, k, fold.fold_index, cfg.ablation.poolings[0]);
    let codebook = phase_cluster(&cell_cfg, corpus, fold, &first)?;
    phase_pretrain(&cell_cfg, corpus, fold, &first)?;
    let cpt_id = content_id(&fs::read(first.cpt.join(MODEL_FILE)).map_err(|e| Error::io(&first.cpt, e))?);
    let mut out = Vec::new();
    for &pooling in &cfg.ablation.poolings {
        cell_cfg.pooling = pooling;
        let layout = FoldLayout::ablation(root, cfg.seed, layer, k, fold.fold_index, pooling);
        let m = phase_finetune(&cell_cfg, corpus, fold, &layout)?;
        let ft_path = layout.finetune.join(MODEL_FILE);
        let ft_id = content_id(&fs::read(&ft_path).map_err(|e| Error::io(&ft_path, e))?);
        out.push((
            pooling,
            FoldProvenance {
                fold: fold.fold_index,
                codebook_id: codebook.id.clone(),
                cpt_checkpoint: cpt_id.clone(),
                finetune_checkpoint: ft_id,
                ua: m.ua,
                wa: m.wa,
            },
        ));
    }
    Ok(out)
}

/// Runs phases 2–3 for every (layer, K) cell and fold, for each seed, with
/// phase 1 shared per (seed, fold). Cells report the median over seeds of
/// the fold-averaged UA and WA; a failing cell is recorded and the rest
/// continue.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationResults> {
    let spec = &cfg.ablation;
    if spec.layers.is_empty() || spec.clusters.is_empty() || spec.poolings.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("ablation grid must be non-empty in every axis".into()));
    }
    let corpus = cmd_gen_corpus(cfg)?;
    let folds = make_folds(&corpus)?;
    let root = cfg.output_dir.join("ablation");
    let cells: Vec<(usize, usize)> = spec
        .layers
        .iter()
        .flat_map(|&l| spec.clusters.iter().map(move |&k| (l, k)))
        .collect();

    let mut tapt_scores = Vec::new();
    // Indexed [seed][cell][fold].
    let mut raw: Vec<Vec<Vec<FoldCellResult>>> = Vec::new();
    for &seed in &spec.seeds {
        let seed_cfg = cfg.with_seed(seed);
        let tapt: Vec<Result<Metrics>> = folds
            .par_iter()
            .map(|f| {
                let layout = FoldLayout::ablation(&root, seed, 0, 0, f.fold_index, spec.poolings[0]);
                phase_tapt(&seed_cfg, &corpus, f, &layout)
            })
            .collect();
        let tapt_ok: Option<Vec<Metrics>> = tapt.iter().map(|r| r.as_ref().ok().cloned()).collect();
        tapt_scores.push((
            seed,
            tapt_ok.and_then(|m| aggregate_folds(&m).ok()).map(|a| Score {
                ua: a.ua_mean,
                wa: Some(a.wa_mean),
            }),
        ));
        let jobs: Vec<(usize, usize)> = (0..cells.len())
            .flat_map(|c| (0..folds.len()).map(move |f| (c, f)))
            .collect();
        let results: Vec<FoldCellResult> = jobs
            .par_iter()
            .map(|&(c, f)| match &tapt[f] {
                Err(e) => Err(Error::Input(format!("phase 1 failed for fold {f}: {e}"))),
                Ok(_) => run_ablation_fold(&seed_cfg, &corpus, &folds[f], &root, cells[c].0, cells[c].1),
            })
            .collect();
        let mut it = results.into_iter();
        raw.push(
            (0..cells.len())
                .map(|_| (0..folds.len()).map(|_| it.next().expect("job per cell fold")).collect())
                .collect(),
        );
    }

    let mut grid = ResultsGrid::default();
    let mut cell_results = Vec::new();
    for (c, &(layer, k)) in cells.iter().enumerate() {
        for &pooling in &spec.poolings {
            let key = CellKey {
                tap_layer: layer,
                num_clusters: k,
                pooling,
            };
            let mut seeds = Vec::new();
            for (s, &seed) in spec.seeds.iter().enumerate() {
                let mut provs = Vec::new();
                let mut failure = None;
                for r in &raw[s][c] {
                    match r {
                        Ok(list) => provs.extend(list.iter().filter(|(p, _)| *p == pooling).map(|(_, fp)| fp.clone())),
                        Err(e) => {
                            failure.get_or_insert_with(|| e.to_string());
                        }
                    }
                }
                let outcome = match failure {
                    Some(error) => CellOutcome::Failed { error },
                    None => {
                        let n = provs.len() as f64;
                        CellOutcome::Done(Score {
                            ua: provs.iter().map(|p| p.ua).sum::<f64>() / n,
                            wa: Some(provs.iter().map(|p| p.wa).sum::<f64>() / n),
                        })
                    }
                };
                seeds.push(SeedResult {
                    seed,
                    outcome,
                    folds: provs,
                });
            }
            let outcome = match seeds.iter().find_map(|s| match &s.outcome {
                CellOutcome::Failed { error } => Some(error.clone()),
                CellOutcome::Done(_) => None,
            }) {
                Some(error) => CellOutcome::Failed { error },
                None => {
                    let scores: Vec<Score> = seeds
                        .iter()
                        .filter_map(|s| match s.outcome {
                            CellOutcome::Done(sc) => Some(sc),
                            CellOutcome::Failed { .. } => None,
                        })
                        .collect();
                    let uas: Vec<f64> = scores.iter().map(|s| s.ua).collect();
                    let was: Vec<f64> = scores.iter().filter_map(|s| s.wa).collect();
                    CellOutcome::Done(Score {
                        ua: median(&uas).expect("non-empty seeds"),
                        wa: median(&was),
                    })
                }
            };
            grid.insert(key, outcome.clone());
            cell_results.push(CellResult { key, outcome, seeds });
        }
    }
    let tapt_values: Vec<Score> = tapt_scores.iter().filter_map(|(_, s)| *s).collect();
    if tapt_values.len() == tapt_scores.len() {
        let uas: Vec<f64> = tapt_values.iter().map(|s| s.ua).collect();
        let was: Vec<f64> = tapt_values.iter().filter_map(|s| s.wa).collect();
        grid.baselines.push((
            "TAPT".into(),
            Score {
                ua: median(&uas).expect("non-empty seeds"),
                wa: median(&was),
            },
        ));
    }
    let results = AblationResults {
        grid,
        cells: cell_results,
        tapt: tapt_scores,
        experiment: cfg.clone(),
    };
    write_json(&root.join("results.json"), &results)?;
    write_report(&root, &results.grid)?;
    Ok(results)
}

/// Machine-readable error record printed by the CLI on failure.
pub fn error_record(err: &Error) -> Value {
    serde_json::json!({
        "error": {
            "kind": err.kind(),
            "message": err.to_string(),
        }
    })
}
