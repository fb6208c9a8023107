//! UA/WA metrics, fold aggregation and the ablation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{json_line, EmotionLabel, NUM_FOLDS};
use crate::error::{Error, Result};

const C: usize = EmotionLabel::COUNT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Rows are true classes, columns predicted classes.
    pub confusion: [[u64; C]; C],
    /// Mean recall over classes with at least one true sample.
    pub ua: f64,
    /// Overall accuracy.
    pub wa: f64,
}

impl Metrics {
    pub fn from_confusion(confusion: [[u64; C]; C]) -> Result<Self> {
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Input("metrics over zero samples".into()));
        }
        let correct: u64 = (0..C).map(|i| confusion[i][i]).sum();
        let recalls: Vec<f64> = confusion
            .iter()
            .enumerate()
            .filter_map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        Ok(Self {
            confusion,
            ua: recalls.iter().sum::<f64>() / recalls.len() as f64,
            wa: correct as f64 / total as f64,
        })
    }

    pub fn num_samples(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// Recall per class; `None` where the class has no true samples.
    pub fn recalls(&self) -> [Option<f64>; C] {
        let mut out = [None; C];
        for (i, row) in self.confusion.iter().enumerate() {
            let n: u64 = row.iter().sum();
            if n > 0 {
                out[i] = Some(row[i] as f64 / n as f64);
            }
        }
        out
    }
}

pub fn compute_metrics(truth: &[EmotionLabel], predicted: &[EmotionLabel]) -> Result<Metrics> {
    if truth.len() != predicted.len() {
        return Err(Error::Input(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut confusion = [[0u64; C]; C];
    for (t, p) in truth.iter().zip(predicted) {
        confusion[t.index()][p.index()] += 1;
    }
    Metrics::from_confusion(confusion)
}

/// One line of the per-fold metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldRecord {
    pub fold: usize,
    pub ua: f64,
    pub wa: f64,
    /// Row-major 4×4 confusion counts.
    pub confusion: Vec<u64>,
}

impl FoldRecord {
    pub fn new(fold: usize, m: &Metrics) -> Self {
        Self {
            fold,
            ua: m.ua,
            wa: m.wa,
            confusion: m.confusion.iter().flatten().copied().collect(),
        }
    }

    pub fn metrics(&self) -> Result<Metrics> {
        if self.confusion.len() != C * C {
            return Err(Error::Input(format!(
                "fold {} confusion has {} entries, expected {}",
                self.fold,
                self.confusion.len(),
                C * C
            )));
        }
        let mut confusion = [[0u64; C]; C];
        for (i, &v) in self.confusion.iter().enumerate() {
            confusion[i / C][i % C] = v;
        }
        Metrics::from_confusion(confusion)
    }
}

pub fn metrics_jsonl(records: &[FoldRecord]) -> Result<String> {
    records.iter().map(json_line).collect()
}

pub fn save_metrics(records: &[FoldRecord], path: &Path) -> Result<()> {
    fs::write(path, metrics_jsonl(records)?).map_err(|e| Error::io(path, e))
}

pub fn load_metrics(path: &Path) -> Result<Vec<FoldRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}", i + 1), e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ua_mean: f64,
    pub wa_mean: f64,
    pub per_fold: Vec<Metrics>,
}

/// Unweighted mean over exactly five folds.
pub fn aggregate_folds(folds: &[Metrics]) -> Result<Aggregate> {
    if folds.len() != NUM_FOLDS {
        return Err(Error::Input(format!(
            "expected {NUM_FOLDS} fold results, got {}",
            folds.len()
        )));
    }
    let n = folds.len() as f64;
    Ok(Aggregate {
        ua_mean: folds.iter().map(|m| m.ua).sum::<f64>() / n,
        wa_mean: folds.iter().map(|m| m.wa).sum::<f64>() / n,
        per_fold: folds.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Average,
    Attention,
}

impl Pooling {
    pub const ALL: [Pooling; 2] = [Pooling::Average, Pooling::Attention];

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Average => "average",
            Pooling::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub tap_layer: usize,
    pub num_clusters: usize,
    pub pooling: Pooling,
}

/// UA/WA pair as fractions in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub ua: f64,
    pub wa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Done(Score),
    Failed { error: String },
}

/// Results keyed by (tap layer, K, pooling), plus optional baseline rows
/// shown above the grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsGrid {
    pub baselines: Vec<(String, Score)>,
    pub cells: BTreeMap<String, CellOutcome>,
}

impl ResultsGrid {
    fn key(k: &CellKey) -> String {
        format!("{}/{}/{}", k.tap_layer, k.num_clusters, k.pooling.name())
    }

    pub fn insert(&mut self, key: CellKey, outcome: CellOutcome) {
        self.cells.insert(Self::key(&key), outcome);
    }

    pub fn get(&self, key: &CellKey) -> Option<&CellOutcome> {
        self.cells.get(&Self::key(key))
    }

    fn axes(&self) -> (Vec<usize>, Vec<usize>) {
        let (mut layers, mut ks) = (Vec::new(), Vec::new());
        for key in self.cells.keys() {
            let mut parts = key.split('/');
            let l: usize = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
            let k: usize = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
            layers.push(l);
            ks.push(k);
        }
        layers.sort_unstable();
        layers.dedup();
        ks.sort_unstable();
        ks.dedup();
        (layers, ks)
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn cell_text(outcome: Option<&CellOutcome>) -> String {
    match outcome {
        Some(CellOutcome::Done(s)) => format!("{}/{}", pct(s.ua), s.wa.map_or("-".into(), pct)),
        Some(CellOutcome::Failed { .. }) => "failed".into(),
        None => String::new(),
    }
}

fn csv_fields(outcome: Option<&CellOutcome>) -> [String; 2] {
    match outcome {
        Some(CellOutcome::Done(s)) => [pct(s.ua), s.wa.map_or(String::new(), pct)],
        _ => [String::new(), String::new()],
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub csv: String,
    pub text: String,
}

const HEADERS: [&str; 4] = ["Layers", "Clusters", "Average Pooling", "Attention Pooling"];
const CSV_HEADER: &str = "layers,clusters,average_ua,average_wa,attention_ua,attention_wa";

/// Renders the grid as a layers × clusters table with one UA/WA column per
/// pooling (percentages). Missing cells stay blank.
pub fn render_report(grid: &ResultsGrid) -> Report {
    let mut rows: Vec<[String; 4]> = Vec::new();
    let mut csv = format!("{CSV_HEADER}\n");
    for (name, score) in &grid.baselines {
        let outcome = CellOutcome::Done(*score);
        rows.push([name.clone(), "-".into(), cell_text(Some(&outcome)), "-".into()]);
        let [ua, wa] = csv_fields(Some(&outcome));
        writeln!(csv, "{name},,{ua},{wa},,").expect("String write");
    }
    let (layers, ks) = grid.axes();
    for &l in &layers {
        for &k in &ks {
            let at = |pooling| {
                grid.get(&CellKey {
                    tap_layer: l,
                    num_clusters: k,
                    pooling,
                })
            };
            let (avg, att) = (at(Pooling::Average), at(Pooling::Attention));
            if avg.is_none() && att.is_none() {
                continue;
            }
            rows.push([l.to_string(), k.to_string(), cell_text(avg), cell_text(att)]);
            let [aua, awa] = csv_fields(avg);
            let [tua, twa] = csv_fields(att);
            writeln!(csv, "{l},{k},{aua},{awa},{tua},{twa}").expect("String write");
        }
    }
    Report {
        csv,
        text: aligned(&rows),
    }
}

fn aligned(rows: &[[String; 4]]) -> String {
    let mut widths = HEADERS.map(str::len);
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: [&str; 4]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("{}\n", padded.join("  ").trim_end())
    };
    let mut out = line(HEADERS);
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for r in rows {
        out.push_str(&line([&r[0], &r[1], &r[2], &r[3]]));
    }
    out
}

/// Published full-scale results (HuBERT-base, real IEMOCAP). Shown for
/// comparison only; they cannot be reproduced with the desk-scale model.
pub fn published_reference() -> ResultsGrid {
    let s = |ua: f64, wa: Option<f64>| Score {
        ua: ua / 100.0,
        wa: wa.map(|w| w / 100.0),
    };
    let mut grid = ResultsGrid {
        baselines: vec![("BL".into(), s(74.3, None)), ("TAPT".into(), s(74.1, Some(72.8)))],
        cells: BTreeMap::new(),
    };
    let table: [(usize, usize, (f64, f64), (f64, f64)); 9] = [
        (6, 50, (75.0, 73.6), (75.2, 73.6)),
        (6, 100, (74.8, 73.3), (75.1, 73.5)),
        (6, 150, (74.5, 72.7), (74.3, 73.2)),
        (9, 50, (75.1, 73.5), (75.7, 74.7)),
        (9, 100, (75.0, 73.9), (75.3, 74.0)),
        (9, 150, (74.8, 73.5), (74.6, 73.2)),
        (11, 50, (74.3, 72.7), (74.4, 73.0)),
        (11, 100, (74.0, 72.8), (74.2, 72.7)),
        (11, 150, (74.3, 70.1), (73.5, 72.5)),
    ];
    for (layer, k, avg, att) in table {
        for (pooling, (ua, wa)) in [(Pooling::Average, avg), (Pooling::Attention, att)] {
            grid.insert(
                CellKey {
                    tap_layer: layer,
                    num_clusters: k,
                    pooling,
                },
                CellOutcome::Done(s(ua, Some(wa))),
            );
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use EmotionLabel::*;

    #[test]
    fn hand_counted_example() {
        let m = compute_metrics(&[Happy, Happy, Happy, Sad], &[Happy, Happy, Sad, Sad]).unwrap();
        assert!((m.ua - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.wa, 0.75);
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let truth = [Happy, Sad, Neutral, Angry];
        let m = compute_metrics(&truth, &[Neutral; 4]).unwrap();
        assert_eq!(m.ua, 0.25);
        assert!(compute_metrics(&truth, &[Neutral; 3]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
    }

    #[test]
    fn fold_mean() {
        let m = |ua| Metrics {
            confusion: [[1, 0, 0, 0], [0; 4], [0; 4], [0; 4]],
            ua,
            wa: ua,
        };
        let agg = aggregate_folds(&[m(0.7), m(0.8), m(0.9), m(0.6), m(1.0)]).unwrap();
        assert!((agg.ua_mean - 0.8).abs() < 1e-12);
        assert!(aggregate_folds(&[m(0.7)]).is_err());
    }

    #[test]
    fn fold_record_round_trip() {
        let m = compute_metrics(&[Happy, Angry, Angry], &[Happy, Angry, Sad]).unwrap();
        let rec = FoldRecord::new(2, &m);
        assert_eq!(rec.metrics().unwrap(), m);
        let line = metrics_jsonl(std::slice::from_ref(&rec)).unwrap();
        assert_eq!(serde_json::from_str::<FoldRecord>(line.trim()).unwrap(), rec);
    }

    #[test]
    fn empty_grid_renders_headers_only() {
        let r = render_report(&ResultsGrid::default());
        assert_eq!(r.csv, format!("{CSV_HEADER}\n"));
        assert_eq!(r.text.lines().count(), 2);
        assert!(r.text.starts_with("Layers"));
    }

    #[test]
    fn missing_cells_stay_blank() {
        let mut grid = ResultsGrid::default();
        let key = CellKey {
            tap_layer: 2,
            num_clusters: 4,
            pooling: Pooling::Attention,
        };
        grid.insert(key, CellOutcome::Done(Score { ua: 0.9, wa: Some(0.85) }));
        let r = render_report(&grid);
        assert_eq!(r.csv.lines().nth(1), Some("2,4,,,90.0,85.0"));
        assert!(r.text.contains("90.0/85.0"));
    }

    #[test]
    fn published_table_has_eighteen_cells() {
        let grid = published_reference();
        assert_eq!(grid.cells.len(), 18);
        let best = grid.get(&CellKey {
            tap_layer: 9,
            num_clusters: 50,
            pooling: Pooling::Attention,
        });
        assert!(render_report(&grid).text.contains("75.7/74.7"));
        assert!(matches!(best, Some(CellOutcome::Done(s)) if (s.ua - 0.757).abs() < 1e-12));
    }
}
