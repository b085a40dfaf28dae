//! Report emission: a structured results document, delimited tables laid
//! out like the published ones, and loss-curve and Dice-distribution plots.
//! Published numbers appear only in reference columns.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::{write_json, ArmResult, EfficiencyReport, ExperimentConfig, GridReport};
use crate::metrics::{MeanStd, MetricSummary};

/// A published score, in percent, with its spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedScore {
    pub label: &'static str,
    pub dice: (f64, f64),
    pub iou: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedComparison {
    pub label: &'static str,
    pub dice: (f64, f64),
    pub iou: (f64, f64),
    pub hd95_mm: (f64, f64),
    pub nsd: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PublishedTiming {
    pub label: &'static str,
    pub steps: usize,
    pub seconds: f64,
}

/// Published numbers, for side-by-side display only. Nothing in this crate
/// compares a measurement against them.
pub struct ReferenceNumbers;

impl ReferenceNumbers {
    pub const COMPARISON: [PublishedComparison; 5] = [
        PublishedComparison { label: "SSFormer", dice: (94.4, 0.4), iou: (89.9, 0.6), hd95_mm: (12.3, 2.1), nsd: (87.2, 1.8) },
        PublishedComparison { label: "Li-SegPNet", dice: (92.5, 0.5), iou: (86.0, 0.7), hd95_mm: (15.6, 3.2), nsd: (84.1, 2.3) },
        PublishedComparison { label: "Diff-Trans", dice: (95.4, 0.3), iou: (92.0, 0.4), hd95_mm: (8.7, 1.5), nsd: (89.8, 1.2) },
        PublishedComparison { label: "SDSeg", dice: (95.8, 0.2), iou: (92.6, 0.3), hd95_mm: (7.9, 1.3), nsd: (90.4, 1.1) },
        PublishedComparison { label: "single-step latent diffusion", dice: (96.0, 0.3), iou: (92.9, 0.5), hd95_mm: (7.2, 1.1), nsd: (91.1, 1.0) },
    ];

    /// In the order of [`crate::experiment::ABLATION_ROWS`].
    pub const ABLATION: [PublishedScore; 6] = [
        PublishedScore { label: "baseline (real only)", dice: (93.7, 0.4), iou: (89.6, 0.6) },
        PublishedScore { label: "+ text-guided augmentation", dice: (96.0, 0.3), iou: (92.9, 0.5) },
        PublishedScore { label: "+ multi-step inference", dice: (96.1, 0.3), iou: (93.0, 0.4) },
        PublishedScore { label: "+ frozen vision encoder", dice: (95.2, 0.4), iou: (91.8, 0.6) },
        PublishedScore { label: "+ noise loss only", dice: (95.4, 0.3), iou: (92.1, 0.5) },
        PublishedScore { label: "+ traditional augmentation", dice: (94.8, 0.4), iou: (90.7, 0.6) },
    ];

    /// In the order of [`crate::experiment::sweep_arms`], then the GAN arm.
    pub const SWEEP: [PublishedScore; 7] = [
        PublishedScore { label: "none", dice: (93.7, 0.4), iou: (89.6, 0.6) },
        PublishedScore { label: "traditional (rotation, flip)", dice: (94.8, 0.4), iou: (90.7, 0.6) },
        PublishedScore { label: "text-guided (20)", dice: (94.1, 0.4), iou: (90.2, 0.6) },
        PublishedScore { label: "text-guided (50)", dice: (95.1, 0.3), iou: (91.5, 0.5) },
        PublishedScore { label: "text-guided (100)", dice: (96.0, 0.3), iou: (92.9, 0.5) },
        PublishedScore { label: "text-guided (200)", dice: (95.6, 0.4), iou: (92.1, 0.6) },
        PublishedScore { label: "GAN-based (100)", dice: (95.2, 0.3), iou: (91.8, 0.5) },
    ];

    pub const TIMING: [PublishedTiming; 3] = [
        PublishedTiming { label: "Diff-Trans", steps: 50, seconds: 1.8 },
        PublishedTiming { label: "SDSeg", steps: 100, seconds: 2.3 },
        PublishedTiming { label: "single-step latent diffusion", steps: 1, seconds: 0.08 },
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecSummary {
    pub heldout_mae: f64,
    pub heldout_dice: f64,
    pub latent_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub codec: Option<CodecSummary>,
    /// A single configured run, reported in the main comparison table.
    pub main: Option<ArmResult>,
    pub ablation: Option<GridReport>,
    pub sweep: Option<GridReport>,
    pub efficiency: Option<EfficiencyReport>,
}

impl ExperimentResults {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            config,
            codec: None,
            main: None,
            ablation: None,
            sweep: None,
            efficiency: None,
        }
    }

    fn is_empty(&self) -> bool {
        self.main.is_none() && self.ablation.is_none() && self.sweep.is_none() && self.efficiency.is_none()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmittedFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub files: Vec<EmittedFile>,
    /// Digest over every emitted file, in order.
    pub digest: String,
}

pub const RESULTS_FILE: &str = "results.json";

fn pct(m: &MeanStd) -> String {
    format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std)
}

fn plain(m: &MeanStd) -> String {
    format!("{:.3} ± {:.3}", m.mean, m.std)
}

fn published(v: (f64, f64)) -> String {
    format!("{:.1} ± {:.1}", v.0, v.1)
}

fn footnotes(config: &ExperimentConfig) -> Vec<String> {
    let seeds: Vec<String> = config.seeds.iter().map(|s| s.to_string()).collect();
    vec![
        "empty-mask policy: both empty gives Dice = IoU = NSD = 1 and HD95 = 0; exactly one empty gives Dice = IoU = NSD = 0 and an undefined HD95, excluded from its mean".into(),
        format!(
            "NSD tolerance: {} (pixel spacing {} x {}); HD95 in the same units",
            config.metrics.nsd_tolerance, config.metrics.spacing.row, config.metrics.spacing.col
        ),
        format!("seeds: {}", seeds.join(", ")),
        "published columns are reference values that were not reproduced".into(),
    ]
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn csv(&self, notes: &[String]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let mut out = String::from_utf8(w.into_inner().map_err(|e| Error::Report(e.to_string()))?)
            .expect("csv output is utf-8");
        for n in notes {
            out.push_str(&format!("# {n}\n"));
        }
        Ok(out)
    }

    fn markdown(&self) -> String {
        let mut out = format!("| {} |\n", self.header.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for r in &self.rows {
            out.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        out
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(format!("csv: {e}"))
}

fn summary_cells(s: Option<&MetricSummary>) -> [String; 4] {
    match s {
        Some(s) => [
            pct(&s.dice),
            pct(&s.iou),
            s.hd95.as_ref().map(plain).unwrap_or_else(|| "n/a".into()),
            pct(&s.nsd),
        ],
        None => ["failed".into(), "failed".into(), "failed".into(), "failed".into()],
    }
}

fn main_arm(results: &ExperimentResults) -> Option<&ArmResult> {
    results
        .main
        .as_ref()
        .or_else(|| results.ablation.as_ref().and_then(|g| g.rows.get(1)))
}

fn table_comparison(results: &ExperimentResults) -> Option<Table> {
    let arm = main_arm(results)?;
    let mut t = Table::new(&[
        "method", "dice_pct", "iou_pct", "hd95", "nsd_pct", "published_dice_pct", "published_iou_pct",
        "published_hd95_mm", "published_nsd_pct",
    ]);
    for r in &ReferenceNumbers::COMPARISON[..4] {
        t.push(vec![
            r.label.into(), "".into(), "".into(), "".into(), "".into(),
            published(r.dice), published(r.iou), published(r.hd95_mm), published(r.nsd),
        ]);
    }
    let ours = ReferenceNumbers::COMPARISON[4];
    let mut row = vec![format!("this run: {}", arm.name)];
    row.extend(summary_cells(arm.summary.as_ref()));
    row.extend([published(ours.dice), published(ours.iou), published(ours.hd95_mm), published(ours.nsd)]);
    t.push(row);
    Some(t)
}

fn grid_table(grid: &GridReport, refs: &[PublishedScore], with_counts: bool) -> Table {
    let mut header = vec!["configuration"];
    if with_counts {
        header.extend(["synthetic_samples", "train_records"]);
    }
    header.extend(["dice_pct", "iou_pct", "hd95", "nsd_pct", "runs", "published_dice_pct", "published_iou_pct", "status"]);
    let mut t = Table::new(&header);
    for row in &grid.rows {
        let reference = refs.iter().find(|r| r.label == row.name);
        let mut cells = vec![row.name.clone()];
        if with_counts {
            cells.push(row.augmentation.n_synth.to_string());
            let n = row.runs.first().map(|r| r.train_records.to_string()).unwrap_or_default();
            cells.push(n);
        }
        cells.extend(summary_cells(row.summary.as_ref()));
        cells.push(row.runs.len().to_string());
        cells.push(reference.map(|r| published(r.dice)).unwrap_or_default());
        cells.push(reference.map(|r| published(r.iou)).unwrap_or_default());
        cells.push(row.error.clone().map(|e| format!("error: {e}")).unwrap_or_else(|| "ok".into()));
        t.push(cells);
    }
    for absent in &grid.absent {
        let reference = refs.iter().find(|r| r.label == absent.name);
        let mut cells = vec![absent.name.clone()];
        if with_counts {
            cells.extend(["".into(), "".into()]);
        }
        cells.extend(["absent".into(), "absent".into(), "absent".into(), "absent".into(), "0".into()]);
        cells.push(reference.map(|r| published(r.dice)).unwrap_or_default());
        cells.push(reference.map(|r| published(r.iou)).unwrap_or_default());
        cells.push(absent.reason.clone());
        t.push(cells);
    }
    t
}

fn table_efficiency(e: &EfficiencyReport) -> Table {
    let mut t = Table::new(&[
        "method", "inference_steps", "median_s", "iqr_s", "denoise_median_s", "published_s",
    ]);
    for r in &ReferenceNumbers::TIMING[..2] {
        t.push(vec![r.label.into(), r.steps.to_string(), "".into(), "".into(), "".into(), format!("{}", r.seconds)]);
    }
    for (label, m, published) in [
        ("this run: multi-step", &e.multi, String::new()),
        ("this run: single-step", &e.single, format!("{}", ReferenceNumbers::TIMING[2].seconds)),
    ] {
        t.push(vec![
            label.into(),
            m.denoiser_calls.to_string(),
            format!("{:.6}", m.per_image.median_s),
            format!("{:.6}", m.per_image.iqr_s()),
            format!("{:.6}", m.denoise_stage.median_s),
            published,
        ]);
    }
    t
}

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Report(format!("plot: {e:?}"))
}

const PALETTE: [RGBColor; 7] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(127, 127, 127),
];

fn arms(results: &ExperimentResults) -> Vec<&ArmResult> {
    let mut out: Vec<&ArmResult> = results.main.iter().collect();
    for g in [&results.ablation, &results.sweep].into_iter().flatten() {
        out.extend(g.rows.iter());
    }
    out
}

fn plot_losses(results: &ExperimentResults, path: &Path) -> Result<()> {
    let curves: Vec<(String, Vec<(f64, f64)>)> = arms(results)
        .into_iter()
        .filter_map(|a| {
            let run = a.runs.first()?;
            let pts: Vec<(f64, f64)> = run.loss_curve.iter().map(|p| (p.step as f64, p.total)).collect();
            (!pts.is_empty()).then(|| (a.name.clone(), pts))
        })
        .collect();
    let x_max = curves.iter().flat_map(|c| c.1.iter().map(|p| p.0)).fold(1.0, f64::max);
    let y_max = curves.iter().flat_map(|c| c.1.iter().map(|p| p.1)).fold(1e-3, f64::max);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss (first seed, windowed mean)", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max * 1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("total loss")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    if !curves.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

const DICE_BINS: usize = 20;

fn plot_dice(results: &ExperimentResults, path: &Path) -> Result<()> {
    let hists: Vec<(String, Vec<(f64, f64)>)> = arms(results)
        .into_iter()
        .filter(|a| !a.runs.is_empty())
        .map(|a| {
            let mut counts = [0usize; DICE_BINS];
            let mut n = 0usize;
            for s in a.runs.iter().flat_map(|r| &r.samples) {
                counts[((s.dice * DICE_BINS as f64) as usize).min(DICE_BINS - 1)] += 1;
                n += 1;
            }
            let pts = counts
                .iter()
                .enumerate()
                .map(|(i, c)| ((i as f64 + 0.5) / DICE_BINS as f64, *c as f64 / n as f64))
                .collect();
            (a.name.clone(), pts)
        })
        .collect();
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("per-sample Dice distribution", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..1.0, 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("Dice")
        .y_desc("fraction of samples")
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in hists.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    if !hists.is_empty() {
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::UpperLeft)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Writes the results document, tables, markdown summary and plots into
/// `dir`. Output depends only on `results`.
pub fn emit_report(results: &ExperimentResults, dir: &Path) -> Result<ReportFiles> {
    if results.is_empty() {
        return Err(Error::Validation("nothing to report: no completed run".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let notes = footnotes(&results.config);
    let mut written = vec![PathBuf::from(RESULTS_FILE)];
    write_json(&dir.join(RESULTS_FILE), results)?;

    let mut md = String::from("# Results\n\n");
    if let Some(c) = &results.codec {
        md.push_str(&format!(
            "Codec: held-out reconstruction MAE {:.4}, Dice {:.4}, latent scale {:.4}.\n\n",
            c.heldout_mae, c.heldout_dice, c.latent_scale
        ));
    }
    let mut tables: Vec<(&str, &str, Table)> = Vec::new();
    if let Some(t) = table_comparison(results) {
        tables.push(("table1_comparison.csv", "Segmentation performance", t));
    }
    if let Some(g) = &results.ablation {
        tables.push(("table2_ablation.csv", "Component ablation", grid_table(g, &ReferenceNumbers::ABLATION, false)));
    }
    if let Some(g) = &results.sweep {
        tables.push(("table3_augmentation.csv", "Augmentation strategies", grid_table(g, &ReferenceNumbers::SWEEP, true)));
    }
    if let Some(e) = &results.efficiency {
        tables.push(("table4_efficiency.csv", "Inference efficiency", table_efficiency(e)));
    }
    for (file, title, table) in &tables {
        let path = dir.join(file);
        fs::write(&path, table.csv(&notes)?).map_err(|e| Error::io(&path, e))?;
        written.push(PathBuf::from(file));
        md.push_str(&format!("## {title}\n\n{}\n", table.markdown()));
    }
    if let Some(e) = &results.efficiency {
        md.push_str(&format!(
            "Speedup of single-step over multi-step: {:.1}x per image, {:.1}x for the denoising stage ({} images, {} warmup runs).\n\n",
            e.speedup_per_image, e.speedup_denoise, e.images, e.warmup
        ));
    }
    md.push_str("Notes:\n\n");
    for n in &notes {
        md.push_str(&format!("- {n}\n"));
    }
    fs::write(dir.join("report.md"), md).map_err(|e| Error::io(dir.join("report.md"), e))?;
    written.push(PathBuf::from("report.md"));

    if !arms(results).is_empty() {
        plot_losses(results, &dir.join("loss_curves.svg"))?;
        plot_dice(results, &dir.join("dice_distribution.svg"))?;
        written.push(PathBuf::from("loss_curves.svg"));
        written.push(PathBuf::from("dice_distribution.svg"));
    }

    let mut hasher = Sha256::new();
    let mut files = Vec::with_capacity(written.len());
    for p in written {
        let sha256 = sha256_file(&dir.join(&p))?;
        hasher.update(p.to_string_lossy().as_bytes());
        hasher.update(sha256.as_bytes());
        files.push(EmittedFile { path: p, sha256 });
    }
    let report = ReportFiles {
        files,
        digest: hex::encode(hasher.finalize()),
    };
    fs::write(dir.join("digest.txt"), format!("{}\n", report.digest))
        .map_err(|e| Error::io(dir.join("digest.txt"), e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{summarize, AugmentationSpec, RunRecord};
    use crate::metrics::SampleMetrics;

    fn arm(name: &str, dice: &[f64]) -> ArmResult {
        let samples: Vec<SampleMetrics> = dice
            .iter()
            .enumerate()
            .map(|(i, d)| SampleMetrics {
                id: format!("s{i}"),
                dice: *d,
                iou: d / (2.0 - d),
                hd95: Some(1.0 + i as f64),
                nsd: *d,
                edge_case: None,
            })
            .collect();
        let runs = vec![RunRecord {
            seed: 0,
            fold: 0,
            train_records: 10,
            synthetic_records: 0,
            samples,
            loss_curve: Vec::new(),
            condition_digest_before: "a".into(),
            condition_digest_after: "b".into(),
            denoiser_calls_per_batch: 1,
            train_seconds: 0.0,
        }];
        let cfg = ExperimentConfig::default();
        ArmResult {
            name: name.into(),
            augmentation: AugmentationSpec::NONE,
            summary: Some(summarize(&runs, cfg.metrics).unwrap()),
            runs,
            error: None,
        }
    }

    #[test]
    fn emission_is_deterministic_and_self_consistent() {
        let mut results = ExperimentResults::new(ExperimentConfig::default());
        results.main = Some(arm("main", &[0.9, 0.8, 1.0]));
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = emit_report(&results, a.path()).unwrap();
        let rb = emit_report(&results, b.path()).unwrap();
        assert_eq!(ra.digest, rb.digest);

        let back = ExperimentResults::load(&a.path().join(RESULTS_FILE)).unwrap();
        let main = back.main.unwrap();
        let again = summarize(&main.runs, back.config.metrics).unwrap();
        assert_eq!(Some(&again), main.summary.as_ref());
        let table = fs::read_to_string(a.path().join("table1_comparison.csv")).unwrap();
        assert!(table.contains(&pct(&again.dice)), "{table}");
        assert!(table.contains("# NSD tolerance: 2"));
    }

    #[test]
    fn empty_results_rejected() {
        let d = tempfile::tempdir().unwrap();
        let r = ExperimentResults::new(ExperimentConfig::default());
        assert!(emit_report(&r, d.path()).is_err());
    }
}
