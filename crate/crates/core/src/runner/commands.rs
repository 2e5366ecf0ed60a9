use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::detector::{Detector, DetectorConfig, LossToggles};
use crate::error::{Error, Result};
use crate::eval::{evaluate, median, Detection, EvalReport, GroundTruth};
use crate::losses::SecMetric;
use crate::runner::checkpoint::{load_checkpoint, save_checkpoint};
use crate::runner::config::RunConfig;
use crate::runner::train::{train, LossRecord, TrainOutput, LOSS_CSV_HEADER};
use crate::synth::{generate_split, read_dataset, write_dataset, Dataset, DomainStyle, Sample, MANIFEST};

pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";
pub const LOSS_CSV: &str = "losses.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const MEDIANS_CSV: &str = "ablation_medians.csv";
/// Pseudo-domain holding the per-seed mean over all target domains.
pub const TARGETS: &str = "targets";

pub fn split_dir(data: &Path, domain: &str, split: &str) -> PathBuf {
    data.join(domain).join(split)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitSummary {
    pub domain: String,
    pub split: String,
    pub images: usize,
    /// Object count per class.
    pub objects: Vec<usize>,
    pub dir: PathBuf,
}

/// Writes `<out>/<domain>/{train,test}` for every configured domain. All
/// domains share the same scenes and differ only in appearance.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Vec<SplitSummary>> {
    cfg.validate()?;
    let d = &cfg.data;
    let mut summaries = Vec::new();
    for name in &d.domains {
        let style = DomainStyle::by_name(name)?;
        for (split, seed, count) in [(TRAIN_SPLIT, d.seed, d.train_count), (TEST_SPLIT, d.seed + 1, d.test_count)] {
            let samples = generate_split(&d.scene, &style, seed, count, &format!("{split}-"))?;
            let mut objects = vec![0; d.scene.classes.len()];
            for s in &samples {
                for &c in &s.classes {
                    objects[c] += 1;
                }
            }
            let dir = split_dir(out, name, split);
            write_dataset(
                &Dataset {
                    image_size: d.scene.image_size,
                    classes: d.scene.class_names(),
                    samples,
                },
                &dir,
            )?;
            summaries.push(SplitSummary {
                domain: name.clone(),
                split: split.into(),
                images: count,
                objects,
                dir,
            });
        }
    }
    Ok(summaries)
}

fn load_split(data: &Path, domain: &str, split: &str) -> Result<Vec<Sample>> {
    Ok(read_dataset(&split_dir(data, domain, split))?.samples)
}

pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(LOSS_CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for r in losses {
        w.write_record(r.csv_fields()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on `<data>/<source>/train` and writes the checkpoint and the
/// per-step loss CSV into `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    let source = load_split(data, &cfg.data.source, TRAIN_SPLIT)?;
    let output = train(cfg, &source, |r| {
        if r.step % 50 == 0 {
            log::info!("step {} total {:.4}", r.step, r.loss.total);
        }
    })?;
    save_checkpoint(out, &output.checkpoint)?;
    write_loss_csv(&out.join(LOSS_CSV), &output.losses)?;
    Ok(output)
}

/// Runs inference (original branch only) on every sample and scores it.
pub fn evaluate_samples(detector: &Detector, samples: &[Sample], iou: f64) -> Result<EvalReport> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (image, s) in samples.iter().enumerate() {
        for d in detector.detect(&s.image)? {
            dets.push(Detection {
                image,
                rbox: d.rbox,
                class: d.class,
                score: d.score,
            });
        }
        for (&rbox, &class) in s.boxes.iter().zip(&s.classes) {
            gts.push(GroundTruth { image, rbox, class });
        }
    }
    evaluate(&dets, &gts, detector.config().num_classes, iou)
}

/// A dataset directory, or a domain directory whose test split is used.
pub fn resolve_dataset(data: &Path) -> PathBuf {
    if data.join(MANIFEST).exists() {
        data.to_path_buf()
    } else {
        data.join(TEST_SPLIT)
    }
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, iou: f64, out: Option<&Path>) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let samples = read_dataset(&resolve_dataset(data))?.samples;
    let report = evaluate_samples(&ck.detector, &samples, iou)?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(EVAL_JSON);
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

/// One configuration of an ablation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub matrix: &'static str,
    pub row: &'static str,
    pub detector: DetectorConfig,
}

pub const MATRICES: [&str; 3] = ["component", "scale", "metric"];

/// Component rows (cumulative toggles), per-scale style rows and SEC
/// distance rows, all derived from `base`.
pub fn ablation_rows(base: &DetectorConfig) -> Vec<AblationRow> {
    let with = |toggles: LossToggles, blocks: [bool; 4], metric: SecMetric| DetectorConfig {
        toggles,
        style_blocks: blocks,
        sec_metric: metric,
        ..base.clone()
    };
    let t = |style, hcl, rac, sec| LossToggles { style, hcl, rac, sec };
    let all = [true; 4];
    let jsd = SecMetric::Jsd;
    let mut rows = vec![
        ("component", "baseline", with(LossToggles::NONE, all, jsd)),
        ("component", "style", with(t(true, false, false, false), all, jsd)),
        ("component", "style+hcl", with(t(true, true, false, false), all, jsd)),
        ("component", "style+hcl+rac", with(t(true, true, true, false), all, jsd)),
        ("component", "full", with(LossToggles::ALL, all, jsd)),
    ];
    let scales = [
        ("F1", [true, false, false, false]),
        ("F1-2", [true, true, false, false]),
        ("F1-3", [true, true, true, false]),
        ("F1-4", all),
    ];
    for (name, blocks) in scales {
        rows.push(("scale", name, with(LossToggles::ALL, blocks, jsd)));
    }
    for (name, metric) in [("l2", SecMetric::L2), ("kl", SecMetric::Kl), ("jsd", SecMetric::Jsd)] {
        rows.push(("metric", name, with(LossToggles::ALL, all, metric)));
    }
    rows.into_iter()
        .map(|(matrix, row, detector)| AblationRow { matrix, row, detector })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub matrix: String,
    pub row: String,
    pub seed: u64,
    pub domain: String,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    #[serde(rename = "RMSD")]
    pub rmsd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowMedian {
    pub matrix: String,
    pub row: String,
    pub domain: String,
    #[serde(rename = "median_mAP")]
    pub map: Option<f64>,
    #[serde(rename = "median_RMSD")]
    pub rmsd: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationResults {
    pub cells: Vec<CellResult>,
    pub medians: Vec<RowMedian>,
}

impl AblationResults {
    pub fn median(&self, matrix: &str, row: &str, domain: &str) -> Option<&RowMedian> {
        self.medians
            .iter()
            .find(|m| m.matrix == matrix && m.row == row && m.domain == domain)
    }
}

/// Source training images plus the test split of every evaluated domain.
#[derive(Clone, Debug)]
pub struct AblationData {
    pub source_train: Vec<Sample>,
    /// Source first, then the targets in configured order.
    pub tests: Vec<(String, Vec<Sample>)>,
}

impl AblationData {
    pub fn load(cfg: &RunConfig, data: &Path) -> Result<Self> {
        let d = &cfg.data;
        let source_train = load_split(data, &d.source, TRAIN_SPLIT)?;
        let tests = std::iter::once(&d.source)
            .chain(&d.targets)
            .map(|name| Ok((name.clone(), load_split(data, name, TEST_SPLIT)?)))
            .collect::<Result<_>>()?;
        Ok(AblationData { source_train, tests })
    }
}

/// Trains one configuration with one seed and evaluates it on every test
/// domain, appending the target mean as the `targets` pseudo-domain.
pub fn run_cell(cfg: &RunConfig, detector: &DetectorConfig, seed: u64, data: &AblationData, iou: f64) -> Result<Vec<(String, EvalReport)>> {
    let run = RunConfig {
        detector: detector.clone(),
        seed,
        ..cfg.clone()
    };
    let out = train(&run, &data.source_train, |_| {})?;
    data.tests
        .iter()
        .map(|(name, samples)| Ok((name.clone(), evaluate_samples(&out.checkpoint.detector, samples, iou)?)))
        .collect()
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Runs the selected matrices over all configured seeds. Rows with an
/// identical configuration are trained once per seed and shared.
pub fn run_ablation(cfg: &RunConfig, data: &AblationData, matrices: &[&str], iou: f64) -> Result<AblationResults> {
    let rows: Vec<AblationRow> = ablation_rows(&cfg.detector)
        .into_iter()
        .filter(|r| matrices.contains(&r.matrix))
        .collect();
    let mut cache: Vec<(DetectorConfig, u64, Vec<(String, EvalReport)>)> = Vec::new();
    let mut results = AblationResults::default();
    for row in &rows {
        for &seed in &cfg.ablation.seeds {
            let hit = cache.iter().position(|(d, s, _)| d == &row.detector && *s == seed);
            let reports = match hit {
                Some(k) => cache[k].2.clone(),
                None => {
                    let t0 = Instant::now();
                    let r = run_cell(cfg, &row.detector, seed, data, iou)?;
                    log::info!("{}/{} seed {seed}: {:.1}s", row.matrix, row.row, t0.elapsed().as_secs_f64());
                    cache.push((row.detector.clone(), seed, r.clone()));
                    r
                }
            };
            let cell = |domain: &str, map, rmsd| CellResult {
                matrix: row.matrix.into(),
                row: row.row.into(),
                seed,
                domain: domain.into(),
                map,
                rmsd,
            };
            for (domain, rep) in &reports {
                results.cells.push(cell(domain, rep.map, rep.rmsd));
            }
            let targets = &reports[1..];
            let maps: Vec<_> = targets.iter().map(|(_, r)| r.map).collect();
            let rmsds: Vec<_> = targets.iter().map(|(_, r)| r.rmsd).collect();
            results.cells.push(cell(TARGETS, mean_of(&maps), mean_of(&rmsds)));
        }
    }
    let mut domains: Vec<String> = data.tests.iter().map(|(n, _)| n.clone()).collect();
    domains.push(TARGETS.into());
    for row in &rows {
        for domain in &domains {
            let of = |f: fn(&CellResult) -> Option<f64>| {
                let v: Vec<f64> = results
                    .cells
                    .iter()
                    .filter(|c| c.matrix == row.matrix && c.row == row.row && &c.domain == domain)
                    .filter_map(f)
                    .collect();
                median(&v)
            };
            results.medians.push(RowMedian {
                matrix: row.matrix.into(),
                row: row.row.into(),
                domain: domain.clone(),
                map: of(|c| c.map),
                rmsd: of(|c| c.rmsd),
            });
        }
    }
    Ok(results)
}

pub fn write_ablation_csv(out: &Path, results: &AblationResults) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(ABLATION_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["matrix", "row", "seed", "domain", "mAP", "RMSD"])
        .map_err(|e| csv_err(&path, e))?;
    for c in &results.cells {
        w.write_record([&c.matrix, &c.row, &c.seed.to_string(), &c.domain, &fmt_opt(c.map), &fmt_opt(c.rmsd)])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = out.join(MEDIANS_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["matrix", "row", "domain", "median_mAP", "median_RMSD"])
        .map_err(|e| csv_err(&path, e))?;
    for m in &results.medians {
        w.write_record([&m.matrix, &m.row, &m.domain, &fmt_opt(m.map), &fmt_opt(m.rmsd)])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// All three matrices over all configured seeds; writes both CSVs.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path, iou: f64) -> Result<AblationResults> {
    cfg.validate()?;
    let loaded = AblationData::load(cfg, data)?;
    let results = run_ablation(cfg, &loaded, &MATRICES, iou)?;
    write_ablation_csv(out, &results)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_sizes() {
        let rows = ablation_rows(&DetectorConfig::default());
        let count = |m: &str| rows.iter().filter(|r| r.matrix == m).count();
        assert_eq!((count("component"), count("scale"), count("metric")), (5, 4, 3));
        assert_eq!(rows.len(), 12);
        assert_eq!(rows[0].detector.toggles, LossToggles::NONE);
        assert!(rows.iter().all(|r| r.detector.validate().is_ok()));
    }

    #[test]
    fn targets_mean_requires_every_domain() {
        assert_eq!(mean_of(&[Some(0.2), Some(0.4)]), Some(0.30000000000000004));
        assert_eq!(mean_of(&[Some(0.2), None]), None);
    }
}
