//! Render persisted run artifacts into presentation forms: the development
//! grid table with significance stars, the final test table with confidence
//! intervals, few-shot F1 histograms, and prompt-search evolution plots.
//!
//! Reports are pure views: every number comes from an artifact file, and
//! regenerating a report never changes its bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{
    ApeArtifact, BaselineChoice, CellArtifact, GridCell, RunView, ShotMode, Technique,
};
use crate::metrics::Stars;
use crate::search::Selection;

/// Column order shared by the dev table and its markdown rendering.
const COLUMNS: [(BaselineChoice, ShotMode); 4] = [
    (BaselineChoice::Bottom, ShotMode::Zero),
    (BaselineChoice::Bottom, ShotMode::Few),
    (BaselineChoice::Top, ShotMode::Zero),
    (BaselineChoice::Top, ShotMode::Few),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableCell {
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    pub stars: Stars,
    /// The single best cell in the table.
    pub bold: bool,
    /// Baseline anchor cells (shaded grey in the source tables).
    pub shaded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableModel {
    pub construct: String,
    pub model: String,
    pub row_labels: Vec<String>,
    pub column_labels: Vec<String>,
    /// Row-major cells: `cells[row][column]`.
    pub cells: Vec<Vec<TableCell>>,
}

/// Two decimals, round-half-even (the platform-stable default of float
/// formatting).
fn fixed2(x: f64) -> String {
    format!("{x:.2}")
}

fn cell_markdown(cell: &TableCell) -> String {
    if !cell.valid {
        return "--".to_string();
    }
    let point = cell.point.map(fixed2).unwrap_or_else(|| "--".into());
    let se = cell
        .se
        .map(|se| format!(" ({})", fixed2(se)))
        .unwrap_or_default();
    let value = format!("{point}{}", cell.stars.as_str());
    if cell.bold {
        format!("**{value}**{se}")
    } else if cell.shaded {
        format!("_{value}{se}_")
    } else {
        format!("{value}{se}")
    }
}

/// Build the 5-row x 4-column development table for one run.
///
/// Requires every grid cell; missing cells produce an error naming them.
pub fn dev_table_model(view: &RunView) -> Result<TableModel> {
    let manifest = view.manifest()?;
    let mut missing = Vec::new();
    let mut artifacts: Vec<Vec<Option<CellArtifact>>> = Vec::new();
    for technique in Technique::ALL {
        let mut row = Vec::new();
        for (baseline, shots) in COLUMNS {
            let cell = GridCell::new(baseline, shots, technique);
            if !cell.is_valid() {
                row.push(None);
                continue;
            }
            if !view.has_cell(cell) {
                missing.push(cell.to_string());
                row.push(None);
                continue;
            }
            row.push(Some(view.cell(cell)?));
        }
        artifacts.push(row);
    }
    if !missing.is_empty() {
        return Err(Error::Ordering(format!(
            "development table is incomplete; missing cells: {}",
            missing.join(", ")
        )));
    }

    // exactly one bold cell: the overall F1 maximum, row-major first on ties
    let mut best: Option<(usize, usize, f64)> = None;
    for (r, row) in artifacts.iter().enumerate() {
        for (c, artifact) in row.iter().enumerate() {
            if let Some(artifact) = artifact {
                let score = artifact.eval.metrics.f1_or_zero();
                if best.is_none() || score > best.unwrap().2 {
                    best = Some((r, c, score));
                }
            }
        }
    }
    let best = best.expect("at least one valid cell");

    let cells = artifacts
        .iter()
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .enumerate()
                .map(|(c, artifact)| match artifact {
                    None => TableCell {
                        valid: false,
                        point: None,
                        se: None,
                        stars: Stars::None,
                        bold: false,
                        shaded: false,
                    },
                    Some(artifact) => {
                        let anchor = artifact.cell.is_anchor();
                        TableCell {
                            valid: true,
                            point: Some(artifact.eval.metrics.f1_or_zero()),
                            se: artifact.eval.bootstraps.get("f1").map(|b| b.se),
                            stars: artifact
                                .eval
                                .paired_vs_anchor
                                .as_ref()
                                .map(|p| p.stars)
                                .unwrap_or(Stars::None),
                            bold: (r, c) == (best.0, best.1),
                            shaded: anchor,
                        }
                    }
                })
                .collect()
        })
        .collect();

    Ok(TableModel {
        construct: manifest.construct,
        model: manifest.classify_model,
        row_labels: Technique::ALL.iter().map(|t| t.row_label().to_string()).collect(),
        column_labels: COLUMNS
            .iter()
            .map(|(b, s)| {
                format!(
                    "{} / {}-Shot",
                    capitalize(b.as_str()),
                    capitalize(s.as_str())
                )
            })
            .collect(),
        cells,
    })
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Markdown rendering of the development table (F1 on the development set).
pub fn render_dev_table(view: &RunView) -> Result<(TableModel, String)> {
    let model = dev_table_model(view)?;
    let mut out = String::new();
    out.push_str(&format!(
        "# Development F1 — {} ({})\n\n",
        model.construct, model.model
    ));
    out.push_str("| Technique |");
    for label in &model.column_labels {
        out.push_str(&format!(" {label} |"));
    }
    out.push('\n');
    out.push_str("| --- |");
    for _ in &model.column_labels {
        out.push_str(" --- |");
    }
    out.push('\n');
    for (row_label, row) in model.row_labels.iter().zip(&model.cells) {
        out.push_str(&format!("| {row_label} |"));
        for cell in row {
            out.push_str(&format!(" {} |", cell_markdown(cell)));
        }
        out.push('\n');
    }
    out.push_str(
        "\n_Italicized cells are the baseline anchors; the bold cell is the best F1. \
         Bootstrap standard errors in parentheses. Stars mark paired-bootstrap \
         significance against the column group's anchor: \\*p<0.10, \\*\\*p<0.05, \
         \\*\\*\\*p<0.01._\n",
    );
    Ok((model, out))
}

fn ci_entry(point: f64, se: f64, ci_low: f64, ci_high: f64) -> String {
    format!(
        "{} CI [{}-{}] ({})",
        fixed2(point),
        fixed2(ci_low),
        fixed2(ci_high),
        fixed2(se)
    )
}

/// Final test-set table across one or more runs: one row per construct with
/// all four metrics, standard errors, and 95% confidence intervals.
pub fn render_final_table(views: &[&RunView]) -> Result<String> {
    let mut out = String::new();
    out.push_str("# Final test performance\n\n");
    out.push_str("| Construct | Cell | Accuracy | Precision | Recall | F1 |\n");
    out.push_str("| --- | --- | --- | --- | --- | --- |\n");
    for view in views {
        let manifest = view.manifest()?;
        let test = view.test_eval()?.ok_or_else(|| {
            Error::HoldOut(format!(
                "construct {:?} has no designated, completed test evaluation",
                manifest.construct
            ))
        })?;
        out.push_str(&format!("| {} | {} |", manifest.construct, test.cell));
        for metric in ["accuracy", "precision", "recall", "f1"] {
            match test.eval.bootstraps.get(metric) {
                Some(b) => {
                    out.push_str(&format!(" {} |", ci_entry(b.point, b.se, b.ci_low, b.ci_high)))
                }
                None => out.push_str(" -- |"),
            }
        }
        out.push('\n');
    }
    out.push_str("\n_Point estimate, 95% confidence interval, and bootstrap standard error._\n");
    Ok(out)
}

/// Fixed-width histogram over [0, 1]: 20 bins of width 0.05.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramModel {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub values: Vec<f64>,
}

pub fn histogram(values: &[f64]) -> HistogramModel {
    let bins = 20usize;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let bin = ((v / 0.05).floor() as usize).min(bins - 1);
        counts[bin] += 1;
    }
    HistogramModel {
        bin_edges: (0..=bins).map(|i| i as f64 * 0.05).collect(),
        counts,
        values: values.to_vec(),
    }
}

pub fn histogram_csv(model: &HistogramModel) -> String {
    let mut out = String::from("bin_low,bin_high,count\n");
    for (i, count) in model.counts.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{count}\n",
            fixed2(model.bin_edges[i]),
            fixed2(model.bin_edges[i + 1])
        ));
    }
    out
}

/// Self-contained SVG bar chart of a histogram.
pub fn histogram_svg(model: &HistogramModel, title: &str) -> String {
    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (55.0, 20.0, 40.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let max_count = model.counts.iter().copied().max().unwrap_or(0).max(1) as f64;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        left + plot_w / 2.0,
        xml_escape(title)
    ));
    // axes
    svg.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h
    ));
    svg.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        top + plot_h
    ));
    // bars
    let bin_w = plot_w / model.counts.len() as f64;
    for (i, &count) in model.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let bar_h = plot_h * count as f64 / max_count;
        svg.push_str(&format!(
            "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
             fill=\"#4878a8\" stroke=\"white\" stroke-width=\"0.5\"/>\n",
            left + i as f64 * bin_w,
            top + plot_h - bar_h,
            bin_w,
            bar_h
        ));
    }
    // x tick labels every 0.2
    for i in 0..=5 {
        let x = left + plot_w * i as f64 / 5.0;
        svg.push_str(&format!(
            "  <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{:.1}</text>\n",
            top + plot_h + 16.0,
            i as f64 / 5.0
        ));
    }
    // y tick labels at 0 and max
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">0</text>\n",
        left - 6.0,
        top + plot_h + 4.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
        left - 6.0,
        top + 4.0,
        max_count as u64
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">F1 score</text>\n",
        left + plot_w / 2.0,
        height - 12.0
    ));
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracePoint {
    pub generation: usize,
    pub origin: String,
    pub score: f64,
    pub selected: bool,
    pub running_best: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceModel {
    pub baseline: BaselineChoice,
    pub points: Vec<TracePoint>,
    pub best_score: f64,
}

pub fn trace_model(artifact: &ApeArtifact) -> TraceModel {
    let trace = &artifact.trace;
    let mut points = vec![TracePoint {
        generation: 0,
        origin: "seed".into(),
        score: trace.seed.score,
        selected: true,
        running_best: trace.seed.score,
    }];
    let mut best = trace.seed.score;
    for generation in &trace.generations {
        for (slot, candidate) in generation.candidates.iter().enumerate() {
            if candidate.score > best {
                best = candidate.score;
            }
            let selected = matches!(
                &generation.selected,
                Selection::Candidate { index } if *index == slot
            );
            points.push(TracePoint {
                generation: generation.generation,
                origin: format!("gen{}/slot{slot}", generation.generation),
                score: candidate.score,
                selected,
                running_best: best,
            });
        }
    }
    TraceModel {
        baseline: artifact.baseline,
        points,
        best_score: trace.global_best.score,
    }
}

pub fn trace_csv(model: &TraceModel) -> String {
    let mut out = String::from("generation,origin,score,selected,running_best\n");
    for point in &model.points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            point.generation, point.origin, point.score, point.selected, point.running_best
        ));
    }
    out
}

/// Self-contained SVG of a prompt-search evolution trace: candidate scores
/// per generation, the running best as a line, and the global best bolded.
pub fn trace_svg(model: &TraceModel, title: &str) -> String {
    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (55.0, 20.0, 40.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let max_generation = model
        .points
        .iter()
        .map(|p| p.generation)
        .max()
        .unwrap_or(1)
        .max(1) as f64;

    let x_of = |generation: usize| left + plot_w * generation as f64 / max_generation;
    let y_of = |score: f64| top + plot_h * (1.0 - score.clamp(0.0, 1.0));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        left + plot_w / 2.0,
        xml_escape(title)
    ));
    svg.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        top + plot_h,
        left + plot_w,
        top + plot_h
    ));
    svg.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        top + plot_h
    ));
    // y grid/tick labels every 0.2
    for i in 0..=5 {
        let score = i as f64 / 5.0;
        let y = y_of(score);
        svg.push_str(&format!(
            "  <line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#dddddd\" stroke-width=\"0.5\"/>\n",
            left + plot_w
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\">{score:.1}</text>\n",
            left - 6.0,
            y + 4.0
        ));
    }
    // x tick labels per generation
    for generation in 0..=(max_generation as usize) {
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"11\">{generation}</text>\n",
            x_of(generation),
            top + plot_h + 16.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">generation</text>\n",
        left + plot_w / 2.0,
        height - 12.0
    ));

    // running best line through the last point of each generation
    let mut line_points: Vec<(usize, f64)> = Vec::new();
    for point in &model.points {
        match line_points.last_mut() {
            Some((generation, best)) if *generation == point.generation => {
                *best = point.running_best.max(*best);
            }
            _ => line_points.push((point.generation, point.running_best)),
        }
    }
    let path: Vec<String> = line_points
        .iter()
        .enumerate()
        .map(|(i, (generation, best))| {
            format!(
                "{}{:.1},{:.1}",
                if i == 0 { "M" } else { "L" },
                x_of(*generation),
                y_of(*best)
            )
        })
        .collect();
    svg.push_str(&format!(
        "  <path d=\"{}\" fill=\"none\" stroke=\"#c04040\" stroke-width=\"1.5\"/>\n",
        path.join(" ")
    ));

    // candidate points; the global best is drawn bold
    for point in &model.points {
        let is_best = point.score == model.best_score;
        svg.push_str(&format!(
            "  <circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"{}\" fill=\"{}\"/>\n",
            x_of(point.generation),
            y_of(point.score),
            if is_best { "6" } else { "3" },
            if is_best {
                "#000000"
            } else if point.selected {
                "#c04040"
            } else {
                "#4878a8"
            }
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportPaths {
    pub dev_table: PathBuf,
    pub final_table: Option<PathBuf>,
    pub histograms: Vec<PathBuf>,
    pub traces: Vec<PathBuf>,
    pub summary: PathBuf,
}

fn write_if_changed(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    if let Ok(existing) = std::fs::read_to_string(path) {
        if existing == content {
            return Ok(());
        }
    }
    std::fs::write(path, content)?;
    Ok(())
}

/// Render every report for one run into `<run>/reports/`: the dev table,
/// the final table (when the test evaluation exists), one histogram per
/// baseline's shot selection, one trace per prompt-engineering run, and a
/// summary document linking them all.
pub fn render_all(view: &RunView) -> Result<ReportPaths> {
    let reports = view.dir.path("reports");
    let manifest = view.manifest()?;

    let (_, dev_markdown) = render_dev_table(view)?;
    let dev_table = reports.join("dev_table.md");
    write_if_changed(&dev_table, &dev_markdown)?;

    let final_table = match view.test_eval()? {
        Some(_) => {
            let path = reports.join("final_table.md");
            write_if_changed(&path, &render_final_table(&[view])?)?;
            Some(path)
        }
        None => None,
    };

    let mut histograms = Vec::new();
    let shots = view.shots()?;
    for baseline in BaselineChoice::ALL {
        let selection = shots.selection(baseline);
        let scores: Vec<f64> = selection.leaderboard.iter().map(|c| c.score).collect();
        let model = histogram(&scores);
        let base = reports.join(format!("histogram_{}", baseline.as_str()));
        let csv = base.with_extension("csv");
        let svg = base.with_extension("svg");
        write_if_changed(&csv, &histogram_csv(&model))?;
        write_if_changed(
            &svg,
            &histogram_svg(
                &model,
                &format!(
                    "Few-shot F1 distribution — {} baseline ({})",
                    baseline.as_str(),
                    manifest.construct
                ),
            ),
        )?;
        histograms.push(csv);
        histograms.push(svg);
    }

    let mut traces = Vec::new();
    for baseline in BaselineChoice::ALL {
        if !view.has_ape(baseline) {
            continue;
        }
        let artifact = view.ape(baseline)?;
        let model = trace_model(&artifact);
        let base = reports.join(format!("trace_{}", baseline.as_str()));
        let csv = base.with_extension("csv");
        let svg = base.with_extension("svg");
        write_if_changed(&csv, &trace_csv(&model))?;
        write_if_changed(
            &svg,
            &trace_svg(
                &model,
                &format!(
                    "Prompt search evolution — {} baseline ({})",
                    baseline.as_str(),
                    manifest.construct
                ),
            ),
        )?;
        traces.push(csv);
        traces.push(svg);
    }

    let mut summary = String::new();
    summary.push_str(&format!(
        "# Run summary — {} ({})\n\n",
        manifest.construct, manifest.classify_model
    ));
    let split = view.split()?;
    summary.push_str(&format!(
        "- Split: {} / {} / {} texts (train/dev/test), {} / {} / {} participants\n",
        split.text_counts[0],
        split.text_counts[1],
        split.text_counts[2],
        split.participant_counts[0],
        split.participant_counts[1],
        split.participant_counts[2],
    ));
    let baselines = view.baselines()?;
    summary.push_str(&format!(
        "- Baseline search: {} variants, top F1 {} / bottom F1 {} on train\n",
        baselines.search.leaderboard.len(),
        fixed2(baselines.search.top().score),
        fixed2(baselines.search.bottom().score),
    ));
    if let Some(designation) = view.designation()? {
        summary.push_str(&format!(
            "- Final cell: {} (test consumed: {})\n",
            designation.cell, designation.test_consumed
        ));
    }
    summary.push_str("\n## Documents\n\n");
    summary.push_str("- [Development table](dev_table.md)\n");
    if final_table.is_some() {
        summary.push_str("- [Final test table](final_table.md)\n");
    }
    for baseline in BaselineChoice::ALL {
        summary.push_str(&format!(
            "- [Histogram, {b} baseline](histogram_{b}.svg) ([data](histogram_{b}.csv))\n",
            b = baseline.as_str()
        ));
    }
    for baseline in BaselineChoice::ALL {
        if view.has_ape(baseline) {
            summary.push_str(&format!(
                "- [Search trace, {b} baseline](trace_{b}.svg) ([data](trace_{b}.csv))\n",
                b = baseline.as_str()
            ));
        }
    }
    let summary_path = reports.join("summary.md");
    write_if_changed(&summary_path, &summary)?;

    Ok(ReportPaths {
        dev_table,
        final_table,
        histograms,
        traces,
        summary: summary_path,
    })
}
