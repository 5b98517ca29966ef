//! Artifacts written after a run: traces, ledgers, summaries and the plot.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use bilevel_fw::oracles::write_audit_csv;
use bilevel_fw::solvers::{write_trace_csv, Termination, Variant};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::runner::{RunError, SeedRun};

/// Gaps at or below this value are drawn at `log10(GAP_FLOOR)`.
pub const GAP_FLOOR: f64 = 1e-16;

/// `log10` of a gap as drawn in the plot.
pub fn plot_y(gap: f64) -> f64 {
    gap.max(GAP_FLOOR).log10()
}

fn out_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Output { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    fs::write(path, bytes).map_err(out_err(path))
}

/// The solver trace plus a trailing `best_gap` column (running minimum of the
/// exact gap when recorded, else of the estimated FW gap).
pub fn trace_csv(run: &SeedRun) -> Vec<u8> {
    let mut raw = Vec::new();
    write_trace_csv(&mut raw, &run.report.trace).expect("writing to memory");
    let text = String::from_utf8(raw).expect("trace is utf-8");
    let mut out = String::with_capacity(text.len() + 24 * run.best_gap.len());
    let mut lines = text.lines();
    let header = lines.next().expect("trace header");
    let _ = writeln!(out, "{header},best_gap");
    for (line, g) in lines.zip(&run.best_gap) {
        let _ = writeln!(out, "{line},{g}");
    }
    out.into_bytes()
}

fn complexity_ledger(runs: &[SeedRun]) -> Vec<u8> {
    let mut out = String::from("seed,outer_iter,t_used,k_used,cumulative_inner_iters\n");
    for run in runs {
        let mut total = 0u64;
        for r in &run.report.trace {
            total += r.inner_iters;
            let _ = writeln!(out, "{},{},{},{},{}", run.seed, r.iter, run.inner.t, run.inner.k, total);
        }
    }
    out.into_bytes()
}

/// Per-iteration mean, min and max over seeds. Runs that stopped early
/// carry their last value forward.
pub fn aggregate(series: &[&[f64]]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let len = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut mean = Vec::with_capacity(len);
    let mut min = Vec::with_capacity(len);
    let mut max = Vec::with_capacity(len);
    for i in 0..len {
        let vals: Vec<f64> = series.iter().filter_map(|s| s.get(i).or(s.last()).copied()).collect();
        mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
        min.push(vals.iter().copied().fold(f64::INFINITY, f64::min));
        max.push(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    (mean, min, max)
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::GapBelowTau => "gap_below_tau",
        Termination::MaxIters => "max_iters",
    }
}

fn variant_summary(cfg: &RunConfig, runs: &[SeedRun]) -> (Value, Vec<f64>) {
    let series: Vec<&[f64]> = runs.iter().map(|r| r.best_gap.as_slice()).collect();
    let (mean, min, max) = aggregate(&series);
    let first = runs.first().expect("at least one seed");
    let per_seed: Vec<Value> = runs
        .iter()
        .map(|r| {
            let rep = &r.report;
            json!({
                "seed": r.seed,
                "n_iters": rep.n_iters,
                "termination": termination_name(rep.termination),
                "theoretical_bound": rep.theoretical_bound,
                "bound_certified": rep.bound_certified,
                "initial_gap": r.best_gap.first(),
                "best_gap": rep.best_gap,
                "final_value": rep.trace.last().map(|t| t.f_value),
                "lipschitz_initial": rep.lipschitz_initial,
                "lipschitz_final": rep.lipschitz_final,
                "f_star": rep.f_star,
                "total_inner_iters": r.total_inner_iters,
                "audit_violations": r.audit.as_ref().map(|a| a.iter().filter(|x| x.violated).count()),
                "final_x": rep.final_iterate.x(),
                "details": r.details,
            })
        })
        .collect();
    let summary = json!({
        "problem": cfg.problem.name(),
        "solver": first.variant.name(),
        "oracle": cfg.hypergrad.map(|h| h.name()),
        "inner_iterations": { "mode": first.inner_mode, "t": first.inner.t, "k": first.inner.k },
        "tau": cfg.solver_cfg.tau,
        "sigma": cfg.solver_cfg.sigma,
        "seeds": cfg.seeds,
        "best_gap": { "mean": mean, "min": min, "max": max },
        "runs": per_seed,
    });
    (summary, mean)
}

fn write_variant(dir: &Path, cfg: &RunConfig, runs: &[SeedRun]) -> Result<(Value, Vec<f64>), RunError> {
    fs::create_dir_all(dir).map_err(out_err(dir))?;
    for run in runs {
        write_file(&dir.join(format!("trace_{}.csv", run.seed)), &trace_csv(run))?;
        if let Some(records) = &run.audit {
            let mut buf = Vec::new();
            write_audit_csv(&mut buf, records).expect("writing to memory");
            write_file(&dir.join(format!("audit_{}.csv", run.seed)), &buf)?;
        }
    }
    write_file(&dir.join("complexity_ledger.csv"), &complexity_ledger(runs))?;
    let (summary, mean) = variant_summary(cfg, runs);
    let path = dir.join("summary.json");
    let mut f = fs::File::create(&path).map_err(out_err(&path))?;
    serde_json::to_writer_pretty(&mut f, &summary).expect("summary serializes");
    writeln!(f).map_err(out_err(&path))?;
    Ok((summary, mean))
}

/// Writes a single-solver run into `cfg.output_dir`.
pub fn write_run(cfg: &RunConfig, runs: &[SeedRun]) -> Result<PathBuf, RunError> {
    let dir = &cfg.output_dir;
    let (_, mean) = write_variant(dir, cfg, runs)?;
    let svg = gap_plot(&[(runs[0].variant, mean)], &format!("{} on {}", runs[0].variant.name(), cfg.problem.name()));
    write_file(&dir.join("gap_plot.svg"), svg.as_bytes())?;
    Ok(dir.clone())
}

/// Writes one subdirectory per solver plus a shared plot and summary.
pub fn write_compare(cfg: &RunConfig, grouped: &[Vec<SeedRun>]) -> Result<PathBuf, RunError> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(out_err(dir))?;
    let mut summaries = serde_json::Map::new();
    let mut curves = Vec::new();
    for runs in grouped {
        let v = runs[0].variant;
        let (summary, mean) = write_variant(&dir.join(v.name()), cfg, runs)?;
        curves.push((v, mean));
        summaries.insert(v.name().to_string(), summary);
    }
    let path = dir.join("summary.json");
    let mut f = fs::File::create(&path).map_err(out_err(&path))?;
    serde_json::to_writer_pretty(&mut f, &json!({ "problem": cfg.problem.name(), "solvers": summaries }))
        .expect("summary serializes");
    writeln!(f).map_err(out_err(&path))?;
    let svg = gap_plot(&curves, &format!("solvers on {}", cfg.problem.name()));
    write_file(&dir.join("gap_plot.svg"), svg.as_bytes())?;
    Ok(dir.clone())
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 450.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

fn color(v: Variant) -> &'static str {
    match v {
        Variant::Fw => "#1f77b4",
        Variant::Asfw => "#d62728",
        Variant::Pwfw => "#2ca02c",
    }
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

/// Best FW gap (log scale) versus outer iteration. Each polyline holds raw
/// `(iteration, log10 gap)` pairs; an affine `transform` on the enclosing
/// group maps them to pixels, so the data can be read back from the file.
pub fn gap_plot(curves: &[(Variant, Vec<f64>)], title: &str) -> String {
    let ys: Vec<f64> =
        curves.iter().flat_map(|(_, s)| s.iter().map(|g| plot_y(*g))).filter(|y| y.is_finite()).collect();
    let x_max = curves.iter().map(|(_, s)| s.len().saturating_sub(1)).max().unwrap_or(0).max(1) as f64;
    let (mut y0, mut y1) = (
        ys.iter().copied().fold(f64::INFINITY, f64::min).floor(),
        ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil(),
    );
    if !(y0.is_finite() && y1.is_finite()) {
        (y0, y1) = (-1.0, 0.0);
    }
    if y1 <= y0 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = pw / x_max;
    let sy = ph / (y1 - y0);
    let px = |x: f64| LEFT + sx * x;
    let py = |y: f64| TOP + sy * (y1 - y);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(s, r#"<g class="axes" stroke="dimgray" fill="none">"#);
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}"/>"#);
    let ystep = if y1 - y0 > 12.0 { ((y1 - y0) / 8.0).ceil() } else { 1.0 };
    let mut y = y0;
    while y <= y1 + 1e-9 {
        let _ = writeln!(s, r#"<line x1="{0}" y1="{1}" x2="{LEFT}" y2="{1}"/>"#, LEFT - 5.0, py(y));
        y += ystep;
    }
    let xstep = nice_step(x_max).max(1.0);
    let mut x = 0.0;
    while x <= x_max + 1e-9 {
        let _ = writeln!(s, r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}"/>"#, px(x), TOP + ph, TOP + ph + 5.0);
        x += xstep;
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="tick-labels" fill="black">"#);
    let mut y = y0;
    while y <= y1 + 1e-9 {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">1e{}</text>"#, LEFT - 8.0, py(y) + 4.0, y as i64);
        y += ystep;
    }
    let mut x = 0.0;
    while x <= x_max + 1e-9 {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, px(x), TOP + ph + 20.0, x);
        x += xstep;
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">outer iteration</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{0}" text-anchor="middle" transform="rotate(-90 20 {0})">best FW gap (log scale)</text>"#,
        TOP + ph / 2.0
    );
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g class="data" transform="matrix({sx} 0 0 {} {} {})">"#, -sy, LEFT, TOP + sy * y1);
    for (v, series) in curves {
        let points: Vec<String> = series.iter().enumerate().map(|(i, g)| format!("{},{}", i, plot_y(*g))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-solver="{}" fill="none" stroke="{}" stroke-width="1.5" vector-effect="non-scaling-stroke" points="{}"/>"#,
            v.name(),
            color(*v),
            points.join(" ")
        );
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g class="legend">"#);
    for (i, (v, _)) in curves.iter().enumerate() {
        let ly = TOP + 15.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 25.0,
            color(*v),
            lx + 32.0,
            ly + 4.0,
            v.name().to_uppercase()
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads the data polylines of a plot back as `(solver, [(x, y)])`.
pub fn parse_polylines(svg: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out = Vec::new();
    for chunk in svg.split("<polyline").skip(1) {
        let attr = |name: &str| -> Option<String> {
            let key = format!("{name}=\"");
            let start = chunk.find(&key)? + key.len();
            let end = chunk[start..].find('"')? + start;
            Some(chunk[start..end].to_string())
        };
        let solver = attr("data-solver").unwrap_or_default();
        let points = attr("points")
            .unwrap_or_default()
            .split_whitespace()
            .filter_map(|p| {
                let (x, y) = p.split_once(',')?;
                Some((x.parse().ok()?, y.parse().ok()?))
            })
            .collect();
        out.push((solver, points));
    }
    out
}
