//! Summary tables (CSV) and figures (PNG) from one or more run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::defense::read_defense_curve;
use crate::error::{CoreError, Result};
use crate::evalkit::{read_metrics, MetricsRecord};
use crate::pipeline::{write_csv, ConsistencyCsvRow, RunState};
use crate::util;

const FONT_PATHS: [&str; 2] =
    ["/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf", "/usr/share/fonts/TTF/DejaVuSans.ttf"];

/// `mean ± std` with one decimal.
pub fn format_pm(values: &[f64]) -> String {
    let sd = if values.len() > 1 { util::stddev(values) } else { 0.0 };
    format!("{:.1} ± {:.1}", util::mean(values), sd)
}

/// Whether a cell follows the `a ± b` convention.
pub fn is_pm(cell: &str) -> bool {
    let num = |s: &str| !s.is_empty() && s.parse::<f64>().is_ok() && !s.starts_with('+');
    match cell.split_once(" ± ") {
        Some((a, b)) => num(a) && num(b) && !b.starts_with('-'),
        None => false,
    }
}

struct Run {
    dir: PathBuf,
    cfg: RunConfig,
    state: RunState,
    records: Vec<MetricsRecord>,
}

fn load_run(dir: &Path) -> Result<Run> {
    let metrics = dir.join("metrics.jsonl");
    if !metrics.exists() {
        return Err(CoreError::Missing { path: metrics, reason: "run has no metrics; run `evaluate` first".into() });
    }
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let spath = dir.join("state.json");
    let state = if spath.exists() { util::read_json(&spath)? } else { RunState::default() };
    Ok(Run { dir: dir.to_path_buf(), cfg, state, records: read_metrics(&metrics)? })
}

fn loss_terms(r: &MetricsRecord) -> String {
    let lambda: f64 = r.params.get("lambda").and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let aug = r.params.get("augment").map(|s| s == "true").unwrap_or(false);
    let mut t = String::from("L_r");
    if lambda > 0.0 {
        t.push_str("&L_s");
    }
    if aug {
        t.push_str("&AA");
    }
    t
}

fn primary(run: &Run) -> String {
    run.cfg.evaluators[0].arch.to_string()
}

fn param(r: &MetricsRecord, k: &str) -> String {
    r.params.get(k).cloned().unwrap_or_default()
}

#[derive(Serialize)]
struct AblationRow {
    run_id: String,
    lambda: String,
    loss_terms: String,
    variant: String,
    recon_metric: String,
    recon_error: f64,
    attack_accuracy: f64,
    config_hash: String,
}

#[derive(Serialize)]
struct EvaluatorRow {
    run_id: String,
    target: String,
    evaluator: String,
    variant: String,
    loss_terms: String,
    attack_accuracy: f64,
}

#[derive(Serialize)]
struct BudgetRow {
    run_id: String,
    oracle: String,
    k: String,
    epsilon: String,
    max_rounds: String,
    asr: f64,
    mean_l2: f64,
    mean_queries: f64,
}

#[derive(Serialize)]
struct OracleRow {
    run_id: String,
    variant: String,
    query_oracle: String,
    max_rounds: String,
    asr: f64,
    mean_l2: f64,
    attack_accuracy: f64,
    harvest_target_queries: f64,
    gen_adv_target_queries: f64,
}

#[derive(Serialize)]
struct DefenseRow {
    run_id: String,
    gamma: String,
    evaluator: String,
    baseline: f64,
    ours: f64,
    std_acc: f64,
}

#[derive(Serialize)]
struct TimingRow {
    item: String,
    /// Timings pooled into the cell (runs, or decoder repeats across runs).
    samples: usize,
    seconds: String,
}

/// Every table and figure for one run, written inside the run directory.
pub fn write_run_report(dir: &Path) -> Result<Vec<String>> {
    write_report(&[dir.to_path_buf()], dir)
}

/// Tables and figures across runs. Returns output paths relative to `out`.
pub fn write_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<String>> {
    let runs: Vec<Run> = run_dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    fs::create_dir_all(out.join("tables"))?;
    fs::create_dir_all(out.join("figures"))?;
    let mut written = Vec::new();

    let (mut t1, mut t2, mut t3, mut t4, mut t5, mut t6) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for run in &runs {
        let p = primary(run);
        let harvest = run
            .state
            .phases
            .get("distill")
            .and_then(|r| r.counters.get("harvest_queries"))
            .copied()
            .unwrap_or(0.0);
        for r in &run.records {
            if let Some(rest) = r.variant.strip_prefix("budget:") {
                let oracle = rest.split(':').next().unwrap_or_default().to_string();
                t3.push(BudgetRow {
                    run_id: r.run_id.clone(),
                    oracle,
                    k: param(r, "k"),
                    epsilon: param(r, "epsilon"),
                    max_rounds: param(r, "max_rounds"),
                    asr: r.asr.unwrap_or(0.0),
                    mean_l2: r.mean_l2.unwrap_or(0.0),
                    mean_queries: r.extra.get("mean_queries").copied().unwrap_or(0.0),
                });
                continue;
            }
            if r.variant.starts_with("defense:") {
                continue;
            }
            let acc = r.attack_accuracy.get(&p).copied().unwrap_or(0.0);
            let row = AblationRow {
                run_id: r.run_id.clone(),
                lambda: param(r, "lambda"),
                loss_terms: loss_terms(r),
                variant: r.variant.clone(),
                recon_metric: param(r, "recon_metric"),
                recon_error: r.recon_error,
                attack_accuracy: acc,
                config_hash: r.config_hash.clone(),
            };
            if row.recon_metric == "mse" {
                t1.push(row);
            } else {
                t6.push(row);
            }
            for (ev, a) in &r.attack_accuracy {
                t2.push(EvaluatorRow {
                    run_id: r.run_id.clone(),
                    target: param(r, "target"),
                    evaluator: ev.clone(),
                    variant: r.variant.clone(),
                    loss_terms: loss_terms(r),
                    attack_accuracy: *a,
                });
            }
            if r.params.get("augment").map(|s| s == "true").unwrap_or(false) {
                t4.push(OracleRow {
                    run_id: r.run_id.clone(),
                    variant: r.variant.clone(),
                    query_oracle: param(r, "query_oracle"),
                    max_rounds: param(r, "max_rounds"),
                    asr: r.asr.unwrap_or(0.0),
                    mean_l2: r.mean_l2.unwrap_or(0.0),
                    attack_accuracy: acc,
                    harvest_target_queries: harvest,
                    gen_adv_target_queries: r.extra.get("gen_adv_target_queries").copied().unwrap_or(0.0),
                });
            }
        }
        let def = run.cfg.defense.as_ref();
        let mut by_gamma: BTreeMap<String, BTreeMap<String, &MetricsRecord>> = BTreeMap::new();
        for r in run.records.iter().filter(|r| r.variant.starts_with("defense:")) {
            let mut parts = r.variant.splitn(3, ':').skip(1);
            let (Some(g), Some(v)) = (parts.next(), parts.next()) else { continue };
            by_gamma.entry(g.to_string()).or_default().insert(v.to_string(), r);
        }
        if let Some(def) = def {
            for (g, cells) in &by_gamma {
                let (Some(b), Some(o)) = (cells.get(&def.baseline), cells.get(&def.ours)) else { continue };
                for ev in ["nr", "rob"] {
                    t5.push(DefenseRow {
                        run_id: o.run_id.clone(),
                        gamma: g.clone(),
                        evaluator: ev.into(),
                        baseline: b.attack_accuracy.get(ev).copied().unwrap_or(0.0),
                        ours: o.attack_accuracy.get(ev).copied().unwrap_or(0.0),
                        std_acc: o.extra.get("std_acc").copied().unwrap_or(0.0),
                    });
                }
            }
        }
    }
    let mut table = |name: &str, ok: bool, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        if ok {
            let rel = format!("tables/{name}");
            f(&out.join(&rel))?;
            written.push(rel);
        }
        Ok(())
    };
    table("table1_ablation.csv", !t1.is_empty(), &|p| write_csv(p, &t1))?;
    table("table2_evaluators.csv", !t2.is_empty(), &|p| write_csv(p, &t2))?;
    table("table3_simba_budget.csv", !t3.is_empty(), &|p| write_csv(p, &t3))?;
    table("table4_query_oracle.csv", !t4.is_empty(), &|p| write_csv(p, &t4))?;
    table("table5_defense.csv", !t5.is_empty(), &|p| write_csv(p, &t5))?;
    table("table6_metrics.csv", !t6.is_empty(), &|p| write_csv(p, &t6))?;
    let timing = timing_rows(&runs)?;
    table("table7_timing.csv", !timing.is_empty(), &|p| write_csv(p, &timing))?;

    // figures
    if !t3.is_empty() {
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &t3 {
            let x: f64 = r.max_rounds.parse().unwrap_or(0.0);
            series.entry(format!("{} {}", r.run_id, r.oracle)).or_default().push((x, r.asr));
        }
        let rel = "figures/simba_budget.png".to_string();
        line_plot(&out.join(&rel), "Attack success vs budget", "max rounds", "ASR", &series, (0.0, 1.0))?;
        written.push(rel);
    }
    for run in &runs {
        let c = run.dir.join("probe/consistency.csv");
        if c.exists() {
            let mut r = csv::Reader::from_path(&c)?;
            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for row in r.deserialize::<ConsistencyCsvRow>() {
                let row = row?;
                let label = if row.k == 1 { format!("{} top-1", row.data) } else { format!("{} k={}", row.data, row.k) };
                series.entry(label).or_default().push((row.noise, row.consistency));
            }
            let rel = format!("figures/consistency-{}.png", run.cfg.name);
            line_plot(&out.join(&rel), "Pseudo-label consistency", "noise", "consistency", &series, (0.0, 1.0))?;
            written.push(rel);
        }
        let d = run.dir.join("defense/curve.csv");
        if d.exists() {
            let pts = read_defense_curve(&d)?;
            let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for p in &pts {
                for (name, v) in [
                    ("std acc", p.std_acc),
                    ("rob acc", p.rob_acc),
                    ("nr-base", p.nr_base),
                    ("rob-base", p.rob_base),
                    ("nr-ours", p.nr_ours),
                    ("rob-ours", p.rob_ours),
                ] {
                    series.entry(name.into()).or_default().push((p.gamma, v));
                }
            }
            let rel = format!("figures/defense-{}.png", run.cfg.name);
            line_plot(&out.join(&rel), "Adversarial training", "gamma", "accuracy", &series, (0.0, 1.0))?;
            written.push(rel);
        }
    }
    Ok(written)
}

fn timing_rows(runs: &[Run]) -> Result<Vec<TimingRow>> {
    let mut items: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for run in runs {
        for (phase, rec) in &run.state.phases {
            items.entry(format!("phase:{phase}")).or_default().push(rec.seconds);
            *counts.entry(format!("phase:{phase}")).or_default() += 1;
        }
        for r in &run.records {
            let key = format!("train-inversion:{}", r.variant);
            let per_repeat: Vec<f64> = r
                .extra
                .iter()
                .filter(|(k, _)| k.starts_with("train_inversion_seconds_"))
                .map(|(_, v)| *v)
                .collect();
            if !per_repeat.is_empty() {
                *counts.entry(key.clone()).or_default() += per_repeat.len();
                items.entry(key).or_default().extend(per_repeat);
            } else if let Some(t) = r.wall_times.get("train-inversion") {
                items.entry(key.clone()).or_default().push(*t);
                *counts.entry(key).or_default() += 1;
            }
        }
    }
    Ok(items
        .into_iter()
        .map(|(item, v)| TimingRow { samples: counts[&item], seconds: format_pm(&v), item })
        .collect())
}

fn font_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        for p in FONT_PATHS {
            if let Ok(bytes) = fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no TrueType font found; figures are drawn without text");
        false
    })
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &BTreeMap<String, Vec<(f64, f64)>>,
    y_range: (f64, f64),
) -> Result<()> {
    let plot_err = |e: String| CoreError::Format(format!("plot {}: {e}", path.display()));
    let text = font_available();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for pts in series.values() {
        for &(x, _) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    if !x0.is_finite() {
        return Ok(());
    }
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let root = BitMapBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16);
    if text {
        builder.caption(title, ("sans-serif", 22)).x_label_area_size(40).y_label_area_size(50);
    }
    let mut chart = builder
        .build_cartesian_2d(x0..x1, y_range.0..y_range.1 * 1.02)
        .map_err(|e| plot_err(e.to_string()))?;
    if text {
        chart
            .configure_mesh()
            .x_desc(x_label)
            .y_desc(y_label)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
    } else {
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(0)
            .y_labels(0)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let mut pts = pts.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[i % PALETTE.len()];
        let s = chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(e.to_string()))?;
        if text {
            s.label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(e.to_string()))?;
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
    }
    root.present().map_err(|e| plot_err(e.to_string()))?;
    Ok(())
}
