//! Episode runner, metrics aggregation, the (N, rho) ablation grid, reports
//! and SVG trajectory plots.

use crate::baselines::{apf_command, ApfConfig};
use crate::controller::{fine_tune, FineTuneConfig};
use crate::geometry::Pose;
use crate::policy::{PolicyConfig, PolicyModel};
use crate::world::{Command, EpisodeConfig, EpisodeStatus, MapSpec, TrajectorySample, World, WorldError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Produces one velocity command per control step.
pub trait Planner {
    fn name(&self) -> String;
    /// Called before every episode with that episode's seed.
    fn reset(&mut self, _seed: u64) {}
    fn command(&mut self, world: &World) -> Result<Command, String>;
}

/// Learned path policy followed through the fine-tuning controller.
pub struct RlPgPlanner {
    pub model: PolicyModel,
    pub fine_tune: FineTuneConfig,
    rng: ChaCha8Rng,
}

impl RlPgPlanner {
    /// Uses the mean path; set `model.cfg.stochastic` to sample instead.
    pub fn new(mut model: PolicyModel, fine_tune: FineTuneConfig) -> Self {
        model.cfg = PolicyConfig {
            stochastic: false,
            ..model.cfg
        };
        Self {
            model,
            fine_tune,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Planner for RlPgPlanner {
    fn name(&self) -> String {
        "rlpg".into()
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn command(&mut self, world: &World) -> Result<Command, String> {
        let path = self.model.generate(&world.observation(), &mut self.rng).map_err(|e| e.to_string())?;
        let (_, cmd) = fine_tune(world.latest_scan(), &path.path.first(), world.distance_to_goal(), &self.fine_tune);
        Ok(cmd)
    }
}

pub struct ApfPlanner(pub ApfConfig);

impl Planner for ApfPlanner {
    fn name(&self) -> String {
        "apf".into()
    }

    fn command(&mut self, world: &World) -> Result<Command, String> {
        Ok(apf_command(world.latest_scan(), &world.state().pose, world.goal(), &self.0))
    }
}

/// Planner defined by a closure over the world.
pub struct ScriptedPlanner<F>(pub String, pub F);

impl<F: FnMut(&World) -> Command> Planner for ScriptedPlanner<F> {
    fn name(&self) -> String {
        self.0.clone()
    }

    fn command(&mut self, world: &World) -> Result<Command, String> {
        Ok((self.1)(world))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episode: EpisodeConfig,
    pub repeats: u64,
    /// Runs use seeds `first_seed..first_seed + repeats`.
    pub first_seed: u64,
    /// Uniform start position perturbation per seed, meters.
    pub jitter_pos: f64,
    /// Uniform start heading perturbation per seed, radians.
    pub jitter_heading: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episode: EpisodeConfig::default(),
            repeats: 10,
            first_seed: 0,
            jitter_pos: 0.05,
            jitter_heading: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Success,
    Collision,
    Timeout,
    Failure,
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunStatus::Success => "success",
            RunStatus::Collision => "collision",
            RunStatus::Timeout => "timeout",
            RunStatus::Failure => "failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub status: RunStatus,
    pub trajectory: Vec<TrajectorySample>,
    pub length_m: f64,
    pub time_s: f64,
}

/// Start pose for `seed`: the map start moved by the configured jitter.
pub fn jittered_start(map: &MapSpec, seed: u64, cfg: &EvalConfig) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    let (dx, dy, dth) = (u(cfg.jitter_pos), u(cfg.jitter_pos), u(cfg.jitter_heading));
    Pose::new(map.start.x + dx, map.start.y + dy, map.start.theta() + dth)
}

pub fn run_episode(map: &MapSpec, planner: &mut dyn Planner, seed: u64, cfg: &EvalConfig) -> Result<EpisodeResult, EvalError> {
    let mut episode = cfg.episode.clone();
    episode.rng_seed = seed;
    let mut world = World::new(map.clone(), episode)?;
    world.reset(jittered_start(map, seed, cfg), map.goal);
    planner.reset(seed);
    let mut status = world.status();
    while status == EpisodeStatus::Running {
        match planner.command(&world) {
            Ok(cmd) => status = world.step(cmd),
            Err(e) => {
                log::warn!("{} aborted on {} seed {seed}: {e}", planner.name(), map.name);
                return Ok(finish(&world, RunStatus::Failure));
            }
        }
    }
    let s = match status {
        EpisodeStatus::Success => RunStatus::Success,
        EpisodeStatus::Collision => RunStatus::Collision,
        _ => RunStatus::Timeout,
    };
    Ok(finish(&world, s))
}

fn finish(world: &World, status: RunStatus) -> EpisodeResult {
    EpisodeResult {
        status,
        trajectory: world.trajectory().to_vec(),
        length_m: world.distance_travelled(),
        time_s: world.state().elapsed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetail {
    pub seed: u64,
    pub status: RunStatus,
    pub length_m: f64,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub map: String,
    pub planner: String,
    pub runs: u64,
    pub successes: u64,
    pub failures: u64,
    /// Percent of runs reaching the goal.
    pub success_rate: f64,
    /// Mean over successful runs; `None` when no run succeeded.
    pub avg_trajectory_length: Option<f64>,
    pub avg_time_cost: Option<f64>,
    pub details: Vec<RunDetail>,
}

impl MetricsRecord {
    pub fn from_details(map: &str, planner: &str, details: Vec<RunDetail>) -> Self {
        let runs = details.len() as u64;
        let ok: Vec<&RunDetail> = details.iter().filter(|d| d.status == RunStatus::Success).collect();
        let successes = ok.len() as u64;
        let mean = |f: fn(&RunDetail) -> f64| {
            (!ok.is_empty()).then(|| ok.iter().map(|d| f(d)).sum::<f64>() / ok.len() as f64)
        };
        Self {
            map: map.to_owned(),
            planner: planner.to_owned(),
            runs,
            successes,
            failures: runs - successes,
            success_rate: if runs == 0 { 0.0 } else { 100.0 * successes as f64 / runs as f64 },
            avg_trajectory_length: mean(|d| d.length_m),
            avg_time_cost: mean(|d| d.time_s),
            details,
        }
    }
}

/// Runs every map once per seed. `on_episode` sees each finished run.
pub fn run_suite_with(
    maps: &[MapSpec],
    planner: &mut dyn Planner,
    cfg: &EvalConfig,
    mut on_episode: impl FnMut(&MapSpec, u64, &EpisodeResult),
) -> Result<Vec<MetricsRecord>, EvalError> {
    let mut out = vec![];
    for map in maps {
        let mut details = vec![];
        for seed in cfg.first_seed..cfg.first_seed + cfg.repeats {
            let r = run_episode(map, planner, seed, cfg)?;
            on_episode(map, seed, &r);
            details.push(RunDetail {
                seed,
                status: r.status,
                length_m: r.length_m,
                time_s: r.time_s,
            });
        }
        out.push(MetricsRecord::from_details(&map.name, &planner.name(), details));
    }
    Ok(out)
}

pub fn run_suite(maps: &[MapSpec], planner: &mut dyn Planner, cfg: &EvalConfig) -> Result<Vec<MetricsRecord>, EvalError> {
    run_suite_with(maps, planner, cfg, |_, _, _| {})
}

/// True when the run never beat the speed cap on average.
pub fn respects_speed_cap(d: &RunDetail, v_max: f64) -> bool {
    d.time_s >= d.length_m / v_max
}

pub const ABLATION_N: [usize; 4] = [3, 5, 10, 15];
pub const ABLATION_RHO: [f64; 6] = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30];

pub fn ablation_checkpoint_name(n: usize, rho: f64) -> String {
    format!("n{n}_rho{rho:.2}.ckpt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub n_points: usize,
    pub rho_max: f64,
    /// `None` when no checkpoint exists for the cell.
    pub record: Option<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub map: String,
    pub n_values: Vec<usize>,
    pub rho_values: Vec<f64>,
    /// Row-major over `n_values` then `rho_values`.
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn cell(&self, n: usize, rho: f64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.n_points == n && c.rho_max == rho)
    }
}

/// Evaluates every `n{N}_rho{rho}.ckpt` found in `dir` on `map`.
pub fn run_ablation(dir: &Path, map: &MapSpec, fine_tune: &FineTuneConfig, cfg: &EvalConfig) -> Result<AblationGrid, EvalError> {
    let mut cells = vec![];
    for &n in &ABLATION_N {
        for &rho in &ABLATION_RHO {
            let path = dir.join(ablation_checkpoint_name(n, rho));
            let record = if path.exists() {
                match PolicyModel::load(&path) {
                    Ok(mut model) => {
                        model.cfg.n_points = n;
                        model.cfg.rho_max = rho;
                        let mut p = RlPgPlanner::new(model, *fine_tune);
                        run_suite(std::slice::from_ref(map), &mut p, cfg)?.pop()
                    }
                    Err(e) => {
                        log::warn!("skipping {}: {e}", path.display());
                        None
                    }
                }
            } else {
                None
            };
            cells.push(AblationCell {
                n_points: n,
                rho_max: rho,
                record,
            });
        }
    }
    Ok(AblationGrid {
        map: map.name.clone(),
        n_values: ABLATION_N.to_vec(),
        rho_values: ABLATION_RHO.to_vec(),
        cells,
    })
}

fn cell_text(v: Option<f64>, scale: f64) -> String {
    match v {
        Some(x) => format!("{:.2}", x / scale),
        None => "∞".into(),
    }
}

/// Two blocks (length in m, time in units of 10 s) with one row per N and one
/// column per rho, then the reference footnotes.
pub fn format_ablation(grid: &AblationGrid) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Ablation on map {}", grid.map);
    for (title, pick, scale) in [
        ("Average trajectory length (m)", 0, 1.0),
        ("Average time cost (x10 s)", 1, 10.0),
        ("Success rate (%)", 2, 1.0),
    ] {
        let _ = writeln!(s, "\n{title}");
        let _ = write!(s, "{:>6}", "N\\rho");
        for rho in &grid.rho_values {
            let _ = write!(s, "{:>9.2}", rho);
        }
        s.push('\n');
        for &n in &grid.n_values {
            let _ = write!(s, "{:>6}", n);
            for &rho in &grid.rho_values {
                let text = match grid.cell(n, rho).and_then(|c| c.record.as_ref()) {
                    None => "-".to_owned(),
                    Some(r) => match pick {
                        0 => cell_text(r.avg_trajectory_length, scale),
                        1 => cell_text(r.avg_time_cost, scale),
                        _ => format!("{:.0}", r.success_rate),
                    },
                };
                let _ = write!(s, "{:>9}", text);
            }
            s.push('\n');
        }
    }
    s.push_str("\n- : no checkpoint for the cell; inf : no successful run\n");
    s.push_str("Reference: shortest average length 5.63 m at N=10, rho=0.30\n");
    s.push_str("Reference: shortest average time 7.45 (x10 s) at N=5, rho=0.05\n");
    s
}

/// Table with one row per (map, planner); time in units of 10 s.
pub fn format_report(records: &[MetricsRecord]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:<8} {:>5} {:>9} {:>12} {:>14}",
        "map", "planner", "runs", "success%", "length (m)", "time (x10 s)"
    );
    for r in records {
        let _ = writeln!(
            s,
            "{:<18} {:<8} {:>5} {:>9.0} {:>12} {:>14}",
            r.map,
            r.planner,
            r.runs,
            r.success_rate,
            cell_text(r.avg_trajectory_length, 1.0),
            cell_text(r.avg_time_cost, 10.0)
        );
    }
    s
}

pub fn write_metrics_json(records: &[MetricsRecord], path: &Path) -> Result<(), EvalError> {
    fs::write(path, serde_json::to_string_pretty(records)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    map: &'a str,
    planner: &'a str,
    seed: u64,
    status: RunStatus,
    length_m: f64,
    time_s: f64,
}

/// One row per run.
pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        for d in &r.details {
            w.serialize(CsvRow {
                map: &r.map,
                planner: &r.planner,
                seed: d.seed,
                status: d.status,
                length_m: d.length_m,
                time_s: d.time_s,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const PX: f64 = 100.0;

/// SVG of the map with one polyline per labelled trajectory.
pub fn render_svg(map: &MapSpec, trajectories: &[(String, Vec<TrajectorySample>)]) -> String {
    let b = map.bounds;
    let w = b.width() * PX;
    let h = b.height() * PX;
    let tx = |x: f64| (x - b.x0) * PX;
    let ty = |y: f64| (b.y1 - y) * PX;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{w:.0}" height="{h:.0}" fill="#ffffff" stroke="#000000" stroke-width="2"/>"##);
    for r in &map.rects {
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#555555"/>"##,
            tx(r.x0),
            ty(r.y1),
            r.width() * PX,
            r.height() * PX
        );
    }
    for seg in &map.segments {
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#555555" stroke-width="4"/>"##,
            tx(seg.a.x),
            ty(seg.a.y),
            tx(seg.b.x),
            ty(seg.b.y)
        );
    }
    for (k, (label, traj)) in trajectories.iter().enumerate().filter(|(_, (_, t))| !t.is_empty()) {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = traj.iter().map(|p| format!("{:.2},{:.2}", tx(p.x), ty(p.y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-label="{label}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="8" y="{:.0}" font-family="sans-serif" font-size="14" fill="{color}">{label}</text>"#,
            20.0 + 18.0 * k as f64
        );
    }
    let _ = writeln!(
        s,
        r##"<circle cx="{:.2}" cy="{:.2}" r="8" fill="#2ca02c"/>"##,
        tx(map.start.x),
        ty(map.start.y)
    );
    let _ = writeln!(
        s,
        r##"<circle cx="{:.2}" cy="{:.2}" r="8" fill="#ffbf00" stroke="#000000"/>"##,
        tx(map.goal.x),
        ty(map.goal.y)
    );
    s.push_str("</svg>\n");
    s
}

pub fn emit_plots(map: &MapSpec, trajectories: &[(String, Vec<TrajectorySample>)], out: &Path) -> Result<(), EvalError> {
    fs::write(out, render_svg(map, trajectories))?;
    Ok(())
}
