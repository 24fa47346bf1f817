//! Experiment runner and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::conv::ConvKind;
use crate::data::{load_tu_dataset, DatasetName, DatasetSpec, FeatureMode};
use crate::error::{Error, Result};
use crate::pool::PoolKind;
use crate::train::{build_grid, cross_validate, CvOptions, GridKind, HyperParams};

pub const RESULTS_FILE: &str = "results.csv";
pub const CHART_FILE: &str = "accuracy.svg";

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub data_root: PathBuf,
    pub datasets: Vec<DatasetName>,
    pub convs: Vec<ConvKind>,
    pub pools: Vec<PoolKind>,
    pub seed: u64,
    pub folds: usize,
    pub out_dir: PathBuf,
    pub grid: GridKind,
    pub jobs: usize,
    /// Overrides the default epoch budget.
    pub epochs: Option<usize>,
    pub hierarchical: bool,
    pub features: FeatureMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            datasets: vec![DatasetName::Mutag],
            convs: ConvKind::ALL.to_vec(),
            pools: PoolKind::ALL.to_vec(),
            seed: 0,
            folds: 5,
            out_dir: PathBuf::from("results"),
            grid: GridKind::Small,
            jobs: 0,
            epochs: None,
            hierarchical: false,
            features: FeatureMode::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub conv: ConvKind,
    pub pool: PoolKind,
    pub seed: u64,
    pub folds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub seconds: f64,
    pub winner_hp: String,
}

impl ResultRow {
    fn key(&self) -> (String, ConvKind, PoolKind, u64) {
        (self.dataset.clone(), self.conv, self.pool, self.seed)
    }
}

/// Four decimals, ties to even.
pub fn fixed4(v: f64) -> String {
    // the standard formatter rounds the exact binary value half-to-even
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

fn header(fold_count: usize) -> String {
    let mut h = String::from("dataset,conv,pool,seed");
    for f in 0..fold_count {
        write!(h, ",fold{f}").unwrap();
    }
    h.push_str(",mean,std,seconds,winner_hp");
    h
}

/// Writes `rows` with a header. Fold columns run `fold0..fold4`, or further
/// if some row has more folds.
pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Argument("no result rows to write".into()));
    }
    let fold_count = rows.iter().map(|r| r.folds.len()).max().unwrap_or(0).max(5);
    let mut out = header(fold_count);
    out.push('\n');
    for r in rows {
        write!(out, "{},{},{},{}", r.dataset, r.conv, r.pool, r.seed).unwrap();
        for f in 0..fold_count {
            out.push(',');
            if let Some(v) = r.folds.get(f) {
                out.push_str(&fixed4(*v));
            }
        }
        writeln!(
            out,
            ",{},{},{},{}",
            fixed4(r.mean),
            fixed4(r.std),
            fixed4(r.seconds),
            r.winner_hp.replace(',', ";")
        )
        .unwrap();
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn parse_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path)?;
    let bad = |msg: String| Error::Format {
        file: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    let head: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .collect();
    let fold_count = head.iter().filter(|h| h.starts_with("fold")).count();
    if head.len() != fold_count + 8 || head[..4] != ["dataset", "conv", "pool", "seed"] {
        return Err(bad(format!("unexpected header {head:?}")));
    }
    let mut rows = Vec::new();
    for (no, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != head.len() {
            return Err(bad(format!(
                "line {}: {} cells, expected {}",
                no + 2,
                cells.len(),
                head.len()
            )));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", no + 2)));
        let folds = cells[4..4 + fold_count]
            .iter()
            .filter(|c| !c.is_empty())
            .map(|c| num(c))
            .collect::<Result<Vec<_>>>()?;
        let tail = &cells[4 + fold_count..];
        rows.push(ResultRow {
            dataset: cells[0].to_string(),
            conv: cells[1].parse()?,
            pool: cells[2].parse()?,
            seed: cells[3].parse().map_err(|e| bad(format!("line {}: {e}", no + 2)))?,
            folds,
            mean: num(tail[0])?,
            std: num(tail[1])?,
            seconds: num(tail[2])?,
            winner_hp: tail[3].to_string(),
        });
    }
    Ok(rows)
}

/// Replaces rows sharing a (dataset, conv, pool, seed) key, appends the
/// rest, and rewrites the file. Returns the file's rows.
pub fn upsert_csv(path: &Path, new_rows: &[ResultRow]) -> Result<Vec<ResultRow>> {
    let mut rows = if path.is_file() { parse_csv(path)? } else { Vec::new() };
    for r in new_rows {
        match rows.iter_mut().find(|x| x.key() == r.key()) {
            Some(slot) => *slot = r.clone(),
            None => rows.push(r.clone()),
        }
    }
    emit_csv(&rows, path)?;
    Ok(rows)
}

/// Bar fill per convolution.
pub fn conv_colour(conv: ConvKind) -> &'static str {
    match conv {
        ConvKind::Tagcn => "#2ca02c",
        ConvKind::Gcn => "#ff7f0e",
        ConvKind::Sage => "#1f77b4",
    }
}

/// Bar order inside a dataset group.
pub const BAR_ORDER: [ConvKind; 3] = [ConvKind::Tagcn, ConvKind::Gcn, ConvKind::Sage];

pub mod chart {
    pub const PANEL_WIDTH: f64 = 300.0;
    pub const PANEL_HEIGHT: f64 = 260.0;
    pub const PLOT_TOP: f64 = 40.0;
    pub const PLOT_HEIGHT: f64 = 180.0;
    pub const PLOT_LEFT: f64 = 40.0;
    pub const PLOT_WIDTH: f64 = 240.0;
    pub const BAR_WIDTH: f64 = 16.0;
}

/// Grouped bar chart: one panel per pooling kind, one group per dataset,
/// one bar per convolution, ±1 std whiskers.
pub fn render_bar_chart(rows: &[ResultRow]) -> Result<String> {
    use chart::*;
    if rows.is_empty() {
        return Err(Error::Argument("no result rows to chart".into()));
    }
    // mean over seeds of each (pool, dataset, conv) cell
    let mut cells: BTreeMap<(PoolKind, String, ConvKind), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.pool, r.dataset.clone(), r.conv)).or_default().push(r);
    }
    let pools: Vec<PoolKind> = PoolKind::ALL
        .into_iter()
        .filter(|p| rows.iter().any(|r| r.pool == *p))
        .collect();
    let mut datasets: Vec<String> = Vec::new();
    for r in rows {
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
    }

    let width = PANEL_WIDTH * pools.len() as f64;
    let height = PANEL_HEIGHT + 30.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    let group_width = PLOT_WIDTH / datasets.len() as f64;
    for (pi, pool) in pools.iter().enumerate() {
        let x0 = pi as f64 * PANEL_WIDTH;
        writeln!(
            s,
            r#"<g class="panel" data-pool="{pool}" transform="translate({x0},0)">"#
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{pool}</text>"#,
            PLOT_LEFT + PLOT_WIDTH / 2.0
        )
        .unwrap();
        let bottom = PLOT_TOP + PLOT_HEIGHT;
        writeln!(
            s,
            r#"<line class="axis" x1="{PLOT_LEFT}" y1="{PLOT_TOP}" x2="{PLOT_LEFT}" y2="{bottom}" stroke="black"/>"#
        )
        .unwrap();
        writeln!(
            s,
            r#"<line class="axis" x1="{PLOT_LEFT}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="black"/>"#,
            PLOT_LEFT + PLOT_WIDTH
        )
        .unwrap();
        for tick in 0..=5 {
            let v = tick as f64 / 5.0;
            let y = bottom - v * PLOT_HEIGHT;
            writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#,
                PLOT_LEFT - 4.0,
                y + 4.0
            )
            .unwrap();
        }
        for (di, ds) in datasets.iter().enumerate() {
            let gx = PLOT_LEFT + di as f64 * group_width;
            let bars: Vec<(ConvKind, f64, f64)> = BAR_ORDER
                .iter()
                .filter_map(|&c| {
                    cells.get(&(*pool, ds.clone(), c)).map(|rs| {
                        let n = rs.len() as f64;
                        (
                            c,
                            rs.iter().map(|r| r.mean).sum::<f64>() / n,
                            rs.iter().map(|r| r.std).sum::<f64>() / n,
                        )
                    })
                })
                .collect();
            if bars.is_empty() {
                continue;
            }
            writeln!(s, r#"<g class="group" data-dataset="{ds}">"#).unwrap();
            let span = BAR_WIDTH * bars.len() as f64;
            let start = gx + (group_width - span) / 2.0;
            for (bi, (conv, mean, std)) in bars.iter().enumerate() {
                let mean = mean.clamp(0.0, 1.0);
                let h = mean * PLOT_HEIGHT;
                let x = start + bi as f64 * BAR_WIDTH;
                writeln!(
                    s,
                    r#"<rect class="bar" data-conv="{conv}" data-mean="{}" x="{x}" y="{}" width="{BAR_WIDTH}" height="{h}" fill="{}"/>"#,
                    fixed4(mean),
                    bottom - h,
                    conv_colour(*conv)
                )
                .unwrap();
                if std.is_finite() && *std > 0.0 {
                    let cx = x + BAR_WIDTH / 2.0;
                    let lo = bottom - (mean - std).max(0.0) * PLOT_HEIGHT;
                    let hi = bottom - (mean + std).min(1.0) * PLOT_HEIGHT;
                    writeln!(
                        s,
                        r#"<line class="error-bar" x1="{cx}" y1="{lo}" x2="{cx}" y2="{hi}" stroke="black"/>"#
                    )
                    .unwrap();
                }
            }
            writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{ds}</text>"#,
                gx + group_width / 2.0,
                bottom + 14.0
            )
            .unwrap();
            s.push_str("</g>\n");
        }
        s.push_str("</g>\n");
    }
    // legend
    for (i, conv) in BAR_ORDER.iter().enumerate() {
        let x = 10.0 + i as f64 * 90.0;
        let y = PANEL_HEIGHT + 8.0;
        writeln!(
            s,
            r#"<rect class="legend" x="{x}" y="{y}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{conv}</text>"#,
            conv_colour(*conv),
            x + 16.0,
            y + 10.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_bar_chart(rows: &[ResultRow], path: &Path) -> Result<()> {
    let svg = render_bar_chart(rows)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, svg)?;
    Ok(())
}

/// Outcome of one requested cell.
#[derive(Debug)]
pub struct CellOutcome {
    pub dataset: DatasetName,
    pub conv: ConvKind,
    pub pool: PoolKind,
    pub result: Result<ResultRow>,
}

/// Runs every requested (dataset, conv, pool) cell, upserting each finished
/// row into `out_dir/results.csv`, then redraws `out_dir/accuracy.svg` from
/// the whole file. A failing cell does not stop the others.
pub fn run(config: &ExperimentConfig) -> Result<Vec<CellOutcome>> {
    fs::create_dir_all(&config.out_dir)?;
    let csv = config.out_dir.join(RESULTS_FILE);
    let mut outcomes = Vec::new();
    for &name in &config.datasets {
        let spec = DatasetSpec::locate(name, &config.data_root).with_features(config.features);
        let dataset = match load_tu_dataset(&spec) {
            Ok(d) => d,
            Err(e) => {
                let msg = e.to_string();
                for &conv in &config.convs {
                    for &pool in &config.pools {
                        outcomes.push(CellOutcome {
                            dataset: name,
                            conv,
                            pool,
                            result: Err(Error::Argument(msg.clone())),
                        });
                    }
                }
                continue;
            }
        };
        for &conv in &config.convs {
            for &pool in &config.pools {
                let started = Instant::now();
                let base = HyperParams {
                    seed: config.seed,
                    epochs: config.epochs.unwrap_or(HyperParams::default().epochs),
                    hierarchical: config.hierarchical,
                    ..HyperParams::new(conv, pool)
                };
                let grid = build_grid(config.grid, &base);
                let opts = CvOptions {
                    folds: config.folds,
                    seed: config.seed,
                    jobs: config.jobs,
                };
                let result = cross_validate(&grid, &dataset, &opts).and_then(|report| {
                    let row = ResultRow {
                        dataset: name.slug().to_string(),
                        conv,
                        pool,
                        seed: config.seed,
                        folds: report.test_accuracies(),
                        mean: report.mean,
                        std: report.std,
                        seconds: started.elapsed().as_secs_f64(),
                        winner_hp: report.winner.describe(),
                    };
                    upsert_csv(&csv, std::slice::from_ref(&row))?;
                    log::info!("{name} {conv} {pool}: {:.4} ± {:.4}", row.mean, row.std);
                    Ok(row)
                });
                outcomes.push(CellOutcome {
                    dataset: name,
                    conv,
                    pool,
                    result,
                });
            }
        }
    }
    if csv.is_file() {
        let rows = parse_csv(&csv)?;
        if !rows.is_empty() {
            emit_bar_chart(&rows, &config.out_dir.join(CHART_FILE))?;
        }
    }
    Ok(outcomes)
}
