use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::runner::{ExcitationWindow, RunMetadata, RunResult, StepRecord, WarmStartInfo};
use crate::analysis::{BoundReport, IspsReport, Lemma5Report};
use crate::error::{Error, Result};
use crate::supervisor::LogEntry;

pub const CSV_NAME: &str = "trajectory.csv";
pub const SUMMARY_NAME: &str = "summary.json";
pub const PLOT_NAMES: [&str; 3] = ["state_norms.svg", "aux_value.svg", "w_sigma_min.svg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metadata: RunMetadata,
    pub warnings: Vec<String>,
    pub warm_start: WarmStartInfo,
    pub excitation_windows: Vec<ExcitationWindow>,
    pub excitation_levels: Vec<f64>,
    pub max_gain_norm: f64,
    pub analysis_delta_x: Option<f64>,
    pub isps: Option<IspsReport>,
    pub bounds: Option<BoundReport>,
    pub bounds_error: Option<String>,
    pub lemma5: Lemma5Report,
    pub event_log: Vec<LogEntry>,
}

impl Summary {
    pub fn from_run(run: &RunResult) -> Self {
        Self {
            metadata: run.log.metadata.clone(),
            warnings: run.warnings.clone(),
            warm_start: run.warm_start.clone(),
            excitation_windows: run.excitation_windows.clone(),
            excitation_levels: run.excitation_levels.clone(),
            max_gain_norm: run.max_gain_norm(),
            analysis_delta_x: run.analysis_delta_x,
            isps: run.isps.clone(),
            bounds: run.bounds.clone(),
            bounds_error: run.bounds_error.clone(),
            lemma5: run.lemma5.clone(),
            event_log: run.events.clone(),
        }
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_header(n_x: usize, n_u: usize) -> Vec<String> {
    let mut h = vec!["k".to_string()];
    h.extend((1..=n_x).map(|i| format!("x_{i}")));
    h.extend((1..=n_u).map(|i| format!("u_{i}")));
    h.extend(
        ["mode", "phase", "aux_value", "w_sigma_min", "solved", "feasible", "gamma"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

pub fn write_csv<W: std::io::Write>(records: &[StepRecord], n_u: usize, out: W) -> Result<()> {
    let n_x = records.first().map_or(0, |r| r.x.len());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(n_x, n_u))?;
    for r in records {
        let mut row = vec![r.k.to_string()];
        row.extend(r.x.iter().map(|v| v.to_string()));
        match &r.u {
            Some(u) => row.extend(u.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), n_u)),
        }
        row.push(r.mode.to_string());
        row.push(r.phase.clone());
        row.push(r.aux_value.to_string());
        row.push(r.w_sigma_min.to_string());
        row.push(r.solved.to_string());
        row.push(r.feasible.map(|b| b.to_string()).unwrap_or_default());
        row.push(opt_f64(r.gamma));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let n_x = header.iter().filter(|h| h.starts_with("x_")).count();
    let n_u = header.iter().filter(|h| h.starts_with("u_")).count();
    if header.len() != 8 + n_x + n_u {
        return Err(Error::Serialization("unexpected trajectory header".into()));
    }
    let bad = |what: &str, k: usize| Error::Serialization(format!("row {k}: cannot parse {what}"));
    let num = |s: &str, what: &str, k: usize| s.parse::<f64>().map_err(|_| bad(what, k));
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let f = |j: usize| rec.get(j).unwrap_or("");
        let x = (0..n_x).map(|j| num(f(1 + j), "x", i)).collect::<Result<Vec<_>>>()?;
        let u = if f(1 + n_x).is_empty() {
            None
        } else {
            Some((0..n_u).map(|j| num(f(1 + n_x + j), "u", i)).collect::<Result<Vec<_>>>()?)
        };
        let base = 1 + n_x + n_u;
        let opt_bool = |s: &str| -> Result<Option<bool>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("feasible", i))
            }
        };
        out.push(StepRecord {
            k: f(0).parse().map_err(|_| bad("k", i))?,
            x,
            u,
            mode: f(base).parse().map_err(|_| bad("mode", i))?,
            phase: f(base + 1).to_string(),
            aux_value: num(f(base + 2), "aux_value", i)?,
            w_sigma_min: num(f(base + 3), "w_sigma_min", i)?,
            solved: f(base + 4).parse().map_err(|_| bad("solved", i))?,
            feasible: opt_bool(f(base + 5))?,
            gamma: match f(base + 6) {
                "" => None,
                s => Some(num(s, "gamma", i)?),
            },
        });
    }
    Ok(out)
}

/// Paths of the files written by [`emit_outputs`].
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub plots: Vec<PathBuf>,
    pub sdp_dumps: Vec<PathBuf>,
}

pub fn emit_outputs(run: &RunResult, dir: &Path) -> Result<OutputFiles> {
    fs::create_dir_all(dir)?;
    let n_u = run.config.resolve()?.plant.dynamics().n_u();
    let csv = dir.join(CSV_NAME);
    write_csv(&run.log.records, n_u, fs::File::create(&csv)?)?;
    let summary = dir.join(SUMMARY_NAME);
    fs::write(&summary, serde_json::to_string_pretty(&Summary::from_run(run))?)?;
    let mut plots = Vec::new();
    if run.config.output.plots {
        let lambda0 = run.config.supervisor.lambda0;
        let delta_v = run.config.supervisor.delta_v;
        plots.push(dir.join(PLOT_NAMES[0]));
        plot_states(&run.log.records, &plots[0])?;
        plots.push(dir.join(PLOT_NAMES[1]));
        plot_aux(&run.log.records, lambda0, delta_v, &plots[1])?;
        plots.push(dir.join(PLOT_NAMES[2]));
        plot_sigma(&run.log.records, &plots[2])?;
    }
    let mut sdp_dumps = Vec::new();
    if !run.sdp_dumps.is_empty() {
        let sdp_dir = dir.join("sdp");
        fs::create_dir_all(&sdp_dir)?;
        for d in &run.sdp_dumps {
            let p = sdp_dir.join(format!("k{:04}.json", d.time.unwrap_or(0)));
            d.write(&p)?;
            sdp_dumps.push(p);
        }
    }
    Ok(OutputFiles {
        csv,
        summary,
        plots,
        sdp_dumps,
    })
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Serialization(format!("plot: {e}"))
}

const SIZE: (u32, u32) = (900, 360);

fn range_of(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn k_range(records: &[StepRecord]) -> std::ops::Range<f64> {
    let first = records.first().map_or(0, |r| r.k) as f64;
    let last = records.last().map_or(1, |r| r.k) as f64;
    first..last.max(first + 1.0)
}

fn plot_states(records: &[StepRecord], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let norms: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.k as f64, r.x.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect();
    let n_x = records.first().map_or(0, |r| r.x.len());
    let (lo, hi) = range_of(records.iter().flat_map(|r| r.x.iter().copied()).chain(norms.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption("state", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(k_range(records), lo..hi)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("k").draw().map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(norms, BLACK.stroke_width(2)))
        .map_err(plot_err)?
        .label("|x|")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLACK));
    for i in 0..n_x {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(records.iter().map(|r| (r.k as f64, r.x[i])), color))
            .map_err(plot_err)?
            .label(format!("x_{}", i + 1))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// `V(x(k))` on a log scale. Gray bands mark steps with
/// `V(k) <= lambda0 V(k-1)`, orange bands mark `V(k) <= delta_V`.
fn plot_aux(records: &[StepRecord], lambda0: f64, delta_v: f64, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let floor = 1e-12;
    let vals: Vec<(f64, f64)> = records.iter().map(|r| (r.k as f64, r.aux_value.max(floor))).collect();
    let (lo, hi) = range_of(vals.iter().map(|p| p.1).chain([delta_v]));
    let (lo, hi) = (lo.max(floor).min(delta_v * 0.5), hi * 2.0);
    let mut chart = ChartBuilder::on(&root)
        .caption("auxiliary value", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(k_range(records), (lo..hi).log_scale())
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("k").draw().map_err(plot_err)?;
    let band = |k: f64, color: RGBAColor| Rectangle::new([(k - 0.5, lo), (k + 0.5, hi)], color.filled());
    chart
        .draw_series(
            vals.windows(2)
                .filter(|w| w[1].1 <= lambda0 * w[0].1)
                .map(|w| band(w[1].0, RGBColor(160, 160, 160).mix(0.35))),
        )
        .map_err(plot_err)?;
    chart
        .draw_series(
            vals.iter()
                .filter(|p| p.1 <= delta_v)
                .map(|p| band(p.0, RGBColor(255, 165, 0).mix(0.35))),
        )
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(vals.clone(), BLUE.stroke_width(2)))
        .map_err(plot_err)?;
    let (k0, k1) = (vals.first().map_or(0.0, |p| p.0), vals.last().map_or(1.0, |p| p.0));
    chart
        .draw_series(LineSeries::new(vec![(k0, delta_v), (k1, delta_v)], RED))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn plot_sigma(records: &[StepRecord], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let vals: Vec<(f64, f64)> = records.iter().map(|r| (r.k as f64, r.w_sigma_min)).collect();
    let (_, hi) = range_of(vals.iter().map(|p| p.1));
    let mut chart = ChartBuilder::on(&root)
        .caption("smallest singular value of W", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(k_range(records), 0.0..hi.max(1e-12))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("k").draw().map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(vals, GREEN.stroke_width(2)))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
