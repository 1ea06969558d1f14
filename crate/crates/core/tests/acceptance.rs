//! End-to-end acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs the MNIST desk-scale experiment from `configs/mnist_acceptance.toml`
//! into `target/acceptance/` (phases already completed there are reused), then
//! checks the recorded metrics. Set `ADVINV_MNIST` to point at the IDX files
//! when they are not in `data/mnist`. Failing lines are reported; the exit code
//! only reflects them when `ADVINV_ACCEPTANCE_STRICT=1`.

mod suites;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use advinv_core::config::{Overrides, RunConfig};
use advinv_core::defense::read_defense_curve;
use advinv_core::evalkit::{read_metrics, MetricsRecord};
use advinv_core::pipeline::{ConsistencyCsvRow, Pipeline, RunState};
use advinv_core::report::is_pm;

/// Reference attack accuracies for the three ablation cells.
const REFERENCE: [f64; 3] = [0.725, 0.904, 0.941];
const BAND: f64 = 0.10;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: &'static str,
    verdict: Verdict,
    detail: String,
}

fn line(id: &'static str, ok: bool, detail: String) -> Line {
    Line { id, verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root")
}

fn mnist_root(ws: &Path) -> Option<PathBuf> {
    let root = std::env::var_os("ADVINV_MNIST").map(PathBuf::from).unwrap_or_else(|| ws.join("data/mnist"));
    let present = ["train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"].iter().any(|f| root.join(f).exists());
    present.then_some(root)
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0] - 1e-12)
}

struct Run {
    dir: PathBuf,
    cfg: RunConfig,
    metrics: Vec<MetricsRecord>,
    state: RunState,
}

impl Run {
    fn record(&self, variant: &str) -> Result<&MetricsRecord, String> {
        self.metrics.iter().find(|r| r.variant == variant).ok_or_else(|| format!("no metrics for `{variant}`"))
    }

    fn acc(&self, variant: &str) -> Result<f64, String> {
        let ev = self.cfg.evaluators[0].arch.to_string();
        self.record(variant)?.attack_accuracy.get(&ev).copied().ok_or_else(|| format!("no {ev} accuracy for {variant}"))
    }

    fn counter(&self, phase: &str, name: &str) -> Result<f64, String> {
        self.state
            .phases
            .get(phase)
            .and_then(|p| p.counters.get(name))
            .copied()
            .ok_or_else(|| format!("no counter {phase}/{name}"))
    }
}

fn run_mnist(ws: &Path, data: &Path) -> Result<Run, String> {
    let mut cfg = RunConfig::load(&ws.join("configs/mnist_acceptance.toml")).map_err(|e| e.to_string())?;
    let out = std::env::var_os("ADVINV_ACCEPTANCE_DIR").map(PathBuf::from).unwrap_or_else(|| ws.join("target/acceptance"));
    let o = Overrides { data_root: Some(data.to_path_buf()), out_dir: Some(out), ..Default::default() };
    cfg.apply(&o).map_err(|e| e.to_string())?;
    let mut p = Pipeline::open(cfg.clone()).map_err(|e| e.to_string())?;
    for (phase, outcome) in p.run_all().map_err(|e| e.to_string())? {
        eprintln!("  {phase:<16} {outcome:?}");
    }
    let dir = p.dir.clone();
    let metrics = read_metrics(&dir.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    Ok(Run { dir, cfg, metrics, state: p.state().clone() })
}

fn criterion_1(r: &Run) -> Result<Line, String> {
    let a = [r.acc("lr")?, r.acc("lr+ls")?, r.acc("lr+ls+aa")?];
    let ordered = a[0] < a[1] && a[1] < a[2];
    let gaps = a[1] - a[0] >= 0.10 && a[2] - a[1] >= 0.02;
    let near = a.iter().zip(REFERENCE).all(|(x, r)| (x - r).abs() <= BAND);
    let detail = format!(
        "L_r {} < +L_s {} < +AA {} (gaps {:+.1} / {:+.1} pp; reference {} / {} / {} ± 10 pp)",
        pct(a[0]),
        pct(a[1]),
        pct(a[2]),
        100.0 * (a[1] - a[0]),
        100.0 * (a[2] - a[1]),
        pct(REFERENCE[0]),
        pct(REFERENCE[1]),
        pct(REFERENCE[2]),
    );
    Ok(line("1 ablation trend", ordered && gaps && near, detail))
}

fn criterion_2(r: &Run) -> Result<Line, String> {
    let (lr, aa) = (r.record("lr")?.recon_error, r.record("lr+ls+aa")?.recon_error);
    Ok(line("2 error inflation", aa - lr <= 0.01, format!("MSE/pixel L_r {lr:.4}, +L_s+AA {aa:.4}, diff {:+.4} <= 0.01", aa - lr)))
}

fn criterion_3(r: &Run) -> Result<Line, String> {
    let mut pts: Vec<(usize, f64, f64)> = r
        .metrics
        .iter()
        .filter_map(|m| {
            let rounds = m.variant.strip_prefix("budget:target:")?.parse().ok()?;
            Some((rounds, m.asr?, m.mean_l2?))
        })
        .collect();
    pts.sort_by_key(|p| p.0);
    if pts.is_empty() {
        return Err("no target budget curve recorded".into());
    }
    let asr: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let l2: Vec<f64> = pts.iter().map(|p| p.2).collect();
    let at200 = pts.iter().find(|p| p.0 == 200).map(|p| p.1);
    let eps = r.cfg.attack.epsilon;
    let ok = non_decreasing(&asr) && non_decreasing(&l2) && at200.is_some_and(|a| a >= 0.70) && eps == 0.2;
    let curve: Vec<String> = pts.iter().map(|p| format!("{}:{}/{:.2}", p.0, pct(p.1), p.2)).collect();
    Ok(line(
        "3 SimBA budget curve",
        ok,
        format!("rounds:ASR/mean‖δ‖ {} (ASR@200 {}, ε={eps})", curve.join(" "), at200.map(pct).unwrap_or("-".into())),
    ))
}

fn criterion_4(r: &Run) -> Result<Line, String> {
    let harvest = r.counter("distill", "harvest_queries")?;
    let shadow_q = r.counter("gen-adv", "shadow_target_queries")?;
    let recorded = r.record("lr+ls+aa-shadow")?.extra.get("gen_adv_target_queries").copied().unwrap_or(f64::NAN);
    let (t, s) = (r.acc("lr+ls+aa")?, r.acc("lr+ls+aa-shadow")?);
    let ok = shadow_q == 0.0 && recorded == 0.0 && (t - s).abs() <= 0.05;
    Ok(line(
        "4 shadow-query variant",
        ok,
        format!(
            "target queries: harvest {harvest:.0}, shadow-variant generation {shadow_q:.0}; acc target-query {} vs shadow-query {} (|Δ| {:.1} pp <= 5)",
            pct(t),
            pct(s),
            100.0 * (t - s).abs()
        ),
    ))
}

fn criterion_5(r: &Run) -> Result<Line, String> {
    let curve = read_defense_curve(&r.dir.join("defense/curve.csv")).map_err(|e| e.to_string())?;
    let mut ok = !curve.is_empty();
    let mut parts = Vec::new();
    for p in &curve {
        ok &= p.nr_ours >= p.nr_base && p.rob_ours >= p.rob_base && p.std_acc >= 0.99;
        parts.push(format!(
            "γ={}: nr {}→{}, rob {}→{}, std {}",
            p.gamma,
            pct(p.nr_base),
            pct(p.nr_ours),
            pct(p.rob_base),
            pct(p.rob_ours),
            pct(p.std_acc)
        ));
    }
    let gammas: Vec<f64> = curve.iter().map(|p| p.gamma).collect();
    ok &= gammas.contains(&0.02) && gammas.contains(&0.3);
    Ok(line("5 defense", ok, format!("baseline→ours {}", parts.join("; "))))
}

fn criterion_6(r: Option<&Run>) -> Vec<Line> {
    let t = Instant::now();
    let checks: Vec<(&str, suites::Check)> = vec![
        ("top-k oracle", suites::top_k_oracle(10_000)),
        ("SimBA audit", suites::simba_audit(100)),
        ("CE = H", suites::cross_entropy_at_target()),
        ("FD probes", suites::semantic_gradient(20)),
        ("variance probe", suites::variance_identity(4000)),
        ("diversity(A,A)", suites::diversity_identity()),
        ("consistency η=0", suites::consistency_without_noise()),
    ];
    let secs = t.elapsed().as_secs_f64();
    let mut out = Vec::new();
    let fails: Vec<String> =
        checks.iter().filter_map(|(n, c)| c.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    let passes: Vec<String> = checks.iter().filter_map(|(n, c)| c.as_ref().ok().map(|s| format!("{n}: {s}"))).collect();
    for p in &passes {
        eprintln!("    {p}");
    }
    out.push(line(
        "6 property suites",
        fails.is_empty() && secs < 300.0,
        if fails.is_empty() {
            format!("{} checks in {secs:.1}s (< 300s)", checks.len())
        } else {
            fails.join("; ")
        },
    ));
    let Some(r) = r else {
        out.push(Line { id: "6 trained-model checks", verdict: Verdict::Skip, detail: "MNIST not available".into() });
        return out;
    };
    out.push(match diversity_check(r) {
        Ok(l) => l,
        Err(e) => line("6 diversity on checkpoint", false, e),
    });
    out.push(match consistency_check(r) {
        Ok(l) => l,
        Err(e) => line("6 OOD consistency", false, e),
    });
    out
}

fn diversity_check(r: &Run) -> Result<Line, String> {
    let d = r.record("lr+ls+aa")?.diversity.ok_or("no diversity recorded")?;
    Ok(line("6 diversity on checkpoint", d.l_s > d.l_r, format!("Div L_s {:.4} > Div L_r {:.4}", d.l_s, d.l_r)))
}

fn consistency_check(r: &Run) -> Result<Line, String> {
    let mut rd = csv::Reader::from_path(r.dir.join("probe/consistency.csv")).map_err(|e| e.to_string())?;
    let mut by_noise: BTreeMap<String, Vec<(usize, f64, f64)>> = BTreeMap::new();
    let mut zero_ok = true;
    for row in rd.deserialize::<ConsistencyCsvRow>() {
        let row = row.map_err(|e| e.to_string())?;
        if row.noise == 0.0 {
            zero_ok &= row.consistency == 1.0;
        }
        if row.data == "out-of-distribution" && row.noise > 0.0 {
            by_noise.entry(format!("{}", row.noise)).or_default().push((row.k, row.consistency, row.exact));
        }
    }
    let mut ok = zero_ok && !by_noise.is_empty();
    let mut parts = Vec::new();
    for (noise, mut v) in by_noise {
        v.sort_by_key(|p| p.0);
        let c: Vec<f64> = v.iter().map(|p| p.1).collect();
        ok &= non_decreasing(&c);
        let cells: Vec<String> = v.iter().map(|(k, c, e)| format!("k{k} {} (exact {})", pct(*c), pct(*e))).collect();
        parts.push(format!("η={noise}: {}", cells.join(" ")));
    }
    Ok(line(
        "6 OOD consistency",
        ok,
        format!("noise 0 → 1.0: {zero_ok}; non-decreasing in k: {}", parts.join("; ")),
    ))
}

fn criterion_7(ws: &Path, r: Option<&Run>) -> Line {
    let mut problems = Vec::new();
    let mut presets = 0;
    let mut entries: Vec<PathBuf> = fs::read_dir(ws.join("configs"))
        .map(|d| d.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    entries.sort();
    for p in entries.iter().filter(|p| p.extension().is_some_and(|e| e == "toml")) {
        presets += 1;
        if let Err(e) = RunConfig::load(p) {
            problems.push(format!("{}: {e}", p.display()));
        }
    }
    let face = entries.iter().filter(|p| p.to_string_lossy().contains("facescrub")).count();
    if face == 0 {
        problems.push("no FaceScrub presets".into());
    }
    let mut cells = 0;
    if let Some(r) = r {
        match csv::Reader::from_path(r.dir.join("tables/table7_timing.csv")) {
            Ok(mut rd) => {
                for rec in rd.records() {
                    match rec {
                        Ok(rec) => {
                            let cell = rec.get(2).unwrap_or("");
                            cells += 1;
                            if !is_pm(cell) {
                                problems.push(format!("timing cell `{cell}` is not `a ± b`"));
                            }
                        }
                        Err(e) => problems.push(e.to_string()),
                    }
                }
            }
            Err(e) => problems.push(format!("timing table: {e}")),
        }
    }
    line(
        "7 presets + timing format",
        problems.is_empty(),
        if problems.is_empty() {
            format!("{presets} presets validate ({face} FaceScrub); {cells} timing cells in `a ± b` form")
        } else {
            problems.join("; ")
        },
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and filters from other targets
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let ws = workspace();
    let mut lines = Vec::new();
    let started = Instant::now();
    let run = match mnist_root(&ws) {
        None => None,
        Some(root) => {
            eprintln!("acceptance: running the MNIST experiment (cached phases are reused)");
            match run_mnist(&ws, &root) {
                Ok(r) => Some(r),
                Err(e) => {
                    lines.push(line("MNIST run", false, e));
                    None
                }
            }
        }
    };
    let run_secs = started.elapsed().as_secs_f64();
    if let Some(r) = &run {
        type Crit = fn(&Run) -> Result<Line, String>;
        let crits: [(&str, Crit); 5] = [
            ("1 ablation trend", criterion_1),
            ("2 error inflation", criterion_2),
            ("3 SimBA budget curve", criterion_3),
            ("4 shadow-query variant", criterion_4),
            ("5 defense", criterion_5),
        ];
        for (id, f) in crits {
            lines.push(f(r).unwrap_or_else(|e| line(id, false, e)));
        }
    } else if lines.is_empty() {
        for id in ["1 ablation trend", "2 error inflation", "3 SimBA budget curve", "4 shadow-query variant", "5 defense"] {
            lines.push(Line {
                id,
                verdict: Verdict::Skip,
                detail: "MNIST not found; run scripts/fetch_mnist.sh or set ADVINV_MNIST".into(),
            });
        }
    }
    lines.extend(criterion_6(run.as_ref()));
    lines.push(criterion_7(&ws, run.as_ref()));

    println!();
    println!("acceptance criteria (MNIST run {:.0}s)", run_secs);
    let mut failed = 0;
    for l in &lines {
        let v = match l.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{v}  criterion {:<28} {}", l.id, l.detail);
    }
    if failed == 0 {
        return ExitCode::SUCCESS;
    }
    println!("{failed} criterion line(s) failed");
    // A report by default; ADVINV_ACCEPTANCE_STRICT=1 turns failures into a failing exit code.
    if std::env::var("ADVINV_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
