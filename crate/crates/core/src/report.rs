//! Experiment reports and their rendering.
//!
//! A report holds raw per-run results only; every table and plot is derived
//! from it on demand, so a run directory can be re-rendered without retraining.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::CodecHeader;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::mean_std;
use crate::schedule::{BetaKind, BetaScheduleConfig, Parameterization};
use crate::trainer::RunResult;

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.resolved";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarnessKind {
    Train,
    Ablation,
    LambdaSweep,
    ScheduleSweep,
    Stability,
}

impl std::fmt::Display for HarnessKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HarnessKind::Train => "train",
            HarnessKind::Ablation => "ablate",
            HarnessKind::LambdaSweep => "sweep-lambda",
            HarnessKind::ScheduleSweep => "sweep-schedule",
            HarnessKind::Stability => "stability",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: HarnessKind,
    pub config: ExperimentConfig,
    pub config_digest: String,
    pub train_digest: String,
    pub test_digest: String,
    pub codec_digest: String,
    pub teacher_digest: Option<String>,
    pub codec: CodecHeader,
    pub runs: Vec<RunResult>,
    pub wall_clock_s: f64,
}

/// A rendered table: header row plus body rows of preformatted cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub caption: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Scores are reported in percent with two decimals.
fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn pct_pm(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

fn param_name(p: Parameterization) -> &'static str {
    match p {
        Parameterization::Epsilon => "ε-prediction",
        Parameterization::V => "v-prediction",
        Parameterization::X0 => "x0-prediction",
    }
}

pub fn schedule_label(s: &BetaScheduleConfig) -> String {
    let kind = match s.kind {
        BetaKind::Linear => "linear",
        BetaKind::ScaledLinear => "scaled linear",
    };
    format!("{kind} {}–{}", s.beta_start, s.beta_end)
}

impl Table {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (i, c) in r.iter().enumerate() {
                w[i] = w[i].max(c.chars().count());
            }
        }
        w
    }

    pub fn to_text(&self) -> String {
        let w = self.widths();
        let line = |cells: &[String]| {
            let padded: Vec<String> =
                cells.iter().zip(&w).map(|(c, &n)| format!("{c}{}", " ".repeat(n - c.chars().count()))).collect();
            padded.join("  ").trim_end().to_string()
        };
        let mut out = format!("{}\n{}\n", self.caption, line(&self.header));
        let _ = writeln!(out, "{}", w.iter().map(|&n| "-".repeat(n)).collect::<Vec<_>>().join("  "));
        for r in &self.rows {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("**{}**\n\n| {} |\n", self.caption, self.header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(self.header.len()));
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
        out
    }
}

fn mean_of(runs: &[&RunResult], f: impl Fn(&RunResult) -> f64) -> (f64, f64) {
    let v: Vec<f64> = runs.iter().map(|r| f(r)).collect();
    mean_std(&v)
}

/// Parameterization × alignment, six rows in a fixed order.
fn ablation_table(runs: &[RunResult]) -> Table {
    let mut rows = Vec::new();
    for p in [Parameterization::Epsilon, Parameterization::V, Parameterization::X0] {
        for aligned in [false, true] {
            let cell: Vec<&RunResult> = runs
                .iter()
                .filter(|r| r.config.parameterization == p && r.config.alignment.enabled == aligned)
                .collect();
            let (dice, iou) = if cell.is_empty() {
                ("–".to_string(), "–".to_string())
            } else {
                (pct(mean_of(&cell, RunResult::mean_dice).0), pct(mean_of(&cell, RunResult::mean_iou).0))
            };
            rows.push(vec![param_name(p).into(), if aligned { "yes" } else { "no" }.into(), dice, iou]);
        }
    }
    Table {
        name: "ablation".into(),
        caption: "Ablation of parameterization and feature alignment (Dice / IoU, %)".into(),
        header: vec!["Parameterization".into(), "Feature alignment".into(), "Dice".into(), "IoU".into()],
        rows,
    }
}

fn by_lambda(runs: &[RunResult]) -> Vec<(f64, Vec<&RunResult>)> {
    let mut groups: Vec<(f64, Vec<&RunResult>)> = Vec::new();
    for r in runs {
        let l = if r.config.alignment.enabled { r.config.alignment.lambda } else { 0.0 };
        match groups.iter_mut().find(|(k, _)| *k == l) {
            Some((_, v)) => v.push(r),
            None => groups.push((l, vec![r])),
        }
    }
    groups
}

fn lambda_table(runs: &[RunResult]) -> Table {
    let rows = by_lambda(runs)
        .into_iter()
        .map(|(l, g)| {
            vec![l.to_string(), pct(mean_of(&g, RunResult::mean_dice).0), pct(mean_of(&g, RunResult::mean_iou).0)]
        })
        .collect();
    Table {
        name: "lambda".into(),
        caption: "Effect of the alignment weight λ (Dice / IoU, %)".into(),
        header: vec!["λ".into(), "Dice".into(), "IoU".into()],
        rows,
    }
}

/// Mean ± std of Dice across training seeds for every λ > 0.
fn lambda_seed_table(runs: &[RunResult]) -> Table {
    let groups: Vec<_> = by_lambda(runs).into_iter().filter(|(l, _)| *l > 0.0).collect();
    let mut header = vec!["λ".to_string()];
    let mut row = vec!["Dice".to_string()];
    for (l, g) in groups {
        header.push(l.to_string());
        let (m, s) = mean_of(&g, RunResult::mean_dice);
        row.push(pct_pm(m, s));
    }
    Table {
        name: "lambda_seeds".into(),
        caption: "Dice under different values of λ across training seeds (mean ± std, %)".into(),
        header,
        rows: vec![row],
    }
}

fn schedule_table(runs: &[RunResult]) -> Table {
    let mut header = vec!["Beta schedule".to_string()];
    let mut row = vec!["Dice".to_string()];
    for r in runs {
        header.push(schedule_label(&r.config.schedule));
        row.push(pct(r.mean_dice()));
    }
    Table {
        name: "schedule".into(),
        caption: "Beta schedules and corresponding Dice (%)".into(),
        header,
        rows: vec![row],
    }
}

fn replicate_seeds(runs: &[RunResult]) -> Vec<u64> {
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
}

fn stability_tables(runs: &[RunResult]) -> Vec<Table> {
    let seeds = replicate_seeds(runs);
    let mut header = vec!["Parameterization".to_string()];
    header.extend(seeds.iter().map(|s| format!("train seed {s}")));
    let mut std_rows = Vec::new();
    let mut dice_rows = Vec::new();
    for p in [Parameterization::Epsilon, Parameterization::X0] {
        let mut srow = vec![param_name(p).to_string()];
        let mut drow = srow.clone();
        for s in &seeds {
            match runs.iter().find(|r| r.config.parameterization == p && r.seed == *s) {
                Some(r) => {
                    srow.push(pct(r.std_dice()));
                    drow.push(pct(r.mean_dice()));
                }
                None => {
                    srow.push("–".into());
                    drow.push("–".into());
                }
            }
        }
        std_rows.push(srow);
        dice_rows.push(drow);
    }
    let n = runs.first().map_or(0, |r| r.evaluation.seeds.len());
    vec![
        Table {
            name: "stability".into(),
            caption: format!("Standard deviation of Dice (%) over {n} inference seeds"),
            header: header.clone(),
            rows: std_rows,
        },
        Table {
            name: "stability_dice".into(),
            caption: format!("Mean Dice (%) over {n} inference seeds"),
            header,
            rows: dice_rows,
        },
    ]
}

/// One row per run with everything needed to compare cells.
fn runs_table(runs: &[RunResult]) -> Table {
    let header = [
        "run",
        "parameterization",
        "aligned",
        "lambda",
        "schedule",
        "seed",
        "dice",
        "iou",
        "dice_std",
        "test_cosine",
        "final_loss",
        "wall_clock_s",
    ];
    let rows = runs
        .iter()
        .map(|r| {
            let n = r.losses.len();
            let tail = r.median_total_loss(n - n / 10, n).unwrap_or(f64::NAN);
            vec![
                r.run_id.clone(),
                r.config.parameterization.to_string(),
                r.config.alignment.enabled.to_string(),
                if r.config.alignment.enabled { r.config.alignment.lambda.to_string() } else { "–".into() },
                schedule_label(&r.config.schedule),
                r.seed.to_string(),
                format!("{:.4}", r.mean_dice()),
                format!("{:.4}", r.mean_iou()),
                format!("{:.4}", r.std_dice()),
                r.test_cosine.map_or("–".into(), |c| format!("{c:.4}")),
                format!("{tail:.4}"),
                format!("{:.1}", r.wall_clock_s),
            ]
        })
        .collect();
    Table {
        name: "runs".into(),
        caption: "Per-run results".into(),
        header: header.iter().map(|s| s.to_string()).collect(),
        rows,
    }
}

/// Epoch means of `(L_pred, L_total, L_distill)`.
pub type EpochLoss = (f64, f64, Option<f64>);

/// Mean loss per epoch (`ceil(n_train / batch)` steps).
pub fn epoch_losses(r: &RunResult, train_len: usize) -> Vec<EpochLoss> {
    let per_epoch = train_len.div_ceil(r.config.batch_size).max(1);
    r.losses
        .chunks(per_epoch)
        .map(|c| {
            let n = c.len() as f64;
            let pred = c.iter().map(|x| x.pred).sum::<f64>() / n;
            let total = c.iter().map(|x| x.total).sum::<f64>() / n;
            let distill = c.iter().map(|x| x.distill).sum::<Option<f64>>().map(|d| d / n);
            (pred, total, distill)
        })
        .collect()
}

impl ExperimentReport {
    pub fn tables(&self) -> Vec<Table> {
        let mut t = match self.kind {
            HarnessKind::Train => vec![],
            HarnessKind::Ablation => vec![ablation_table(&self.runs)],
            HarnessKind::LambdaSweep => vec![lambda_table(&self.runs), lambda_seed_table(&self.runs)],
            HarnessKind::ScheduleSweep => vec![schedule_table(&self.runs)],
            HarnessKind::Stability => stability_tables(&self.runs),
        };
        t.push(runs_table(&self.runs));
        t
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(REPORT_FILE);
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        let cfg = dir.join(CONFIG_FILE);
        std::fs::write(&cfg, self.config.to_resolved_string()).map_err(|e| Error::io(&cfg, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = if dir.is_dir() { dir.join(REPORT_FILE) } else { dir.to_path_buf() };
        let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::Format { path, reason: e.to_string() })
    }

    /// Aligned-column text of every table.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} — config {} — train {} / test {}\n\n",
            self.kind,
            &self.config_digest[..12],
            &self.train_digest[..12],
            &self.test_digest[..12]
        );
        for t in self.tables() {
            out.push_str(&t.to_text());
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("# {} report\n\n", self.kind);
        let _ = writeln!(out, "- config digest: `{}`", self.config_digest);
        let _ = writeln!(out, "- train / test digest: `{}` / `{}`", self.train_digest, self.test_digest);
        let psnr = self.codec.psnr.map_or("untrained".into(), |p| format!("mask PSNR {p:.2} dB"));
        let _ = writeln!(out, "- codec digest: `{}` ({psnr})", self.codec_digest);
        if let Some(t) = &self.teacher_digest {
            let _ = writeln!(out, "- teacher digest: `{t}`");
        }
        let _ = writeln!(out, "- runs: {}, wall clock {:.0} s\n", self.runs.len(), self.wall_clock_s);
        for t in self.tables() {
            out.push_str(&t.to_markdown());
            out.push('\n');
        }
        out.push_str("## Plots\n\n![losses](plots/losses.png)\n\n![dice](plots/dice.png)\n\n");
        out.push_str("## Configuration\n\n```\n");
        out.push_str(&self.config.to_resolved_string());
        out.push_str("```\n");
        out
    }

    /// Write `report.md`, `report.txt`, `tables/*.csv` and `plots/*.png`.
    pub fn render(&self, dir: &Path) -> Result<()> {
        let tables = dir.join("tables");
        let plots = dir.join("plots");
        for d in [&tables, &plots] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for t in self.tables() {
            let p = tables.join(format!("{}.csv", t.name));
            std::fs::write(&p, t.to_csv()?).map_err(|e| Error::io(&p, e))?;
        }
        for (name, body) in [("report.md", self.to_markdown()), ("report.txt", self.to_text())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        self.plot_losses(&plots.join("losses.png"))?;
        self.plot_dice(&plots.join("dice.png"))
    }

    fn plot_losses(&self, path: &Path) -> Result<()> {
        let train_len = self.config.data.train_count.max(1);
        let series: Vec<(String, Vec<EpochLoss>)> =
            self.runs.iter().map(|r| (r.run_id.clone(), epoch_losses(r, train_len))).collect();
        let epochs = series.iter().map(|(_, s)| s.len()).max().unwrap_or(1).max(2);
        let values = series.iter().flat_map(|(_, s)| s.iter().map(|e| e.0)).filter(|v| *v > 0.0);
        let (lo, hi) = values.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo * 0.9, hi * 1.1) } else { (1e-3, 1.0) };
        draw(path, |root| {
            let mut chart = chart_builder(root, "Prediction loss (L_pred, epoch mean)")
                .build_cartesian_2d(0f64..(epochs - 1) as f64, (lo..hi).log_scale())
                .map_err(plot_err)?;
            mesh(&mut chart, "epoch", "L_pred")?;
            for (i, (name, s)) in series.iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                let line = LineSeries::new(s.iter().enumerate().map(|(e, v)| (e as f64, v.0.max(lo))), color);
                let drawn = chart.draw_series(line).map_err(plot_err)?;
                if fonts_ready() {
                    drawn.label(name.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 12, y)], color));
                }
            }
            legend(&mut chart)
        })
    }

    fn plot_dice(&self, path: &Path) -> Result<()> {
        let n = self.runs.len().max(1);
        let all = self.runs.iter().flat_map(|r| r.evaluation.per_seed_dice.iter().copied());
        let (lo, hi) = all.fold((1.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let pad = ((hi - lo) * 0.1).max(0.005);
        let (lo, hi) = if hi >= lo { ((lo - pad).max(0.0), (hi + pad).min(1.0)) } else { (0.0, 1.0) };
        draw(path, |root| {
            let mut chart = chart_builder(root, "Per-seed test Dice by run")
                .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), lo..hi)
                .map_err(plot_err)?;
            mesh(&mut chart, "run index (see tables/runs.csv)", "Dice")?;
            for (i, r) in self.runs.iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                let pts = r.evaluation.per_seed_dice.iter().map(|&d| Circle::new((i as f64, d), 3, color.filled()));
                chart.draw_series(pts).map_err(plot_err)?;
                let m = r.mean_dice();
                chart
                    .draw_series(LineSeries::new(vec![(i as f64 - 0.3, m), (i as f64 + 0.3, m)], BLACK.stroke_width(2)))
                    .map_err(plot_err)?;
            }
            Ok(())
        })
    }
}

type Area<'a> = DrawingArea<BitMapBackend<'a>, plotters::coord::Shift>;
type Chart<'a, X, Y> = ChartContext<'a, BitMapBackend<'a>, Cartesian2d<X, Y>>;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Validation(format!("plot rendering failed: {e}"))
}

fn draw(path: &Path, body: impl FnOnce(&Area<'_>) -> Result<()>) -> Result<()> {
    let root = BitMapBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    body(&root)?;
    root.present().map_err(plot_err)
}

fn chart_builder<'a, 'b>(root: &'a Area<'b>, caption: &str) -> ChartBuilder<'a, 'b, BitMapBackend<'b>> {
    let mut b = ChartBuilder::on(root);
    b.margin(12);
    if fonts_ready() {
        b.caption(caption, ("sans-serif", 20)).x_label_area_size(36).y_label_area_size(56);
    }
    b
}

fn mesh<'a, X, Y>(chart: &mut Chart<'a, X, Y>, x: &str, y: &str) -> Result<()>
where
    X: Ranged<ValueType = f64> + plotters::coord::ranged1d::ValueFormatter<f64>,
    Y: Ranged<ValueType = f64> + plotters::coord::ranged1d::ValueFormatter<f64>,
{
    let mut m = chart.configure_mesh();
    if fonts_ready() {
        m.x_desc(x).y_desc(y);
    } else {
        m.disable_x_axis().disable_y_axis();
    }
    m.draw().map_err(plot_err)
}

fn legend<'a, X, Y>(chart: &mut Chart<'a, X, Y>) -> Result<()>
where
    X: Ranged<ValueType = f64>,
    Y: Ranged<ValueType = f64>,
{
    if fonts_ready() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .position(SeriesLabelPosition::UpperRight)
            .draw()
            .map_err(plot_err)?;
    }
    Ok(())
}

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a system font for plot text once. Without one, plots are drawn
/// without captions, labels or legends.
fn fonts_ready() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let env = std::env::var("LATSEG_FONT").ok();
        let candidates = env.iter().map(String::as_str).chain(FONT_CANDIDATES.iter().copied());
        for p in candidates {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; plots are rendered without text (set LATSEG_FONT to a .ttf file)");
        false
    })
}
