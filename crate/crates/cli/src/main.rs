use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rlpg_core::baselines::ApfConfig;
use rlpg_core::controller::FineTuneConfig;
use rlpg_core::eval::{
    emit_plots, format_ablation, format_report, run_ablation, run_episode, run_suite_with, write_metrics_csv,
    write_metrics_json, ApfPlanner, EvalConfig, Planner, RlPgPlanner,
};
use rlpg_core::policy::PolicyModel;
use rlpg_core::trainer::{train, TrainConfig};
use rlpg_core::world::{write_trajectory_csv, MapSpec, TrajectorySample};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

static STOP: AtomicBool = AtomicBool::new(false);

#[derive(Parser, Debug)]
#[command(name = "rlpg", version, about = "Train and evaluate lidar path generation planners")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a path policy with PPO.
    Train,
    /// Evaluate planners on a set of maps.
    Eval,
    /// Evaluate a directory of n{N}_rho{rho}.ckpt checkpoints on one map.
    Ablate,
    /// Draw one run per planner on each map.
    Plot,
    /// Check that map files parse and have a free start and goal.
    MapValidate {
        files: Vec<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct Flags {
    /// Directory of map JSON files.
    #[arg(long, global = true)]
    maps: Option<PathBuf>,
    /// Single map file; may be repeated.
    #[arg(long, global = true)]
    map: Vec<PathBuf>,
    /// Planner to evaluate; may be repeated.
    #[arg(long, global = true, value_enum)]
    planner: Vec<PlannerKind>,
    /// Policy checkpoint, or the checkpoint directory for `ablate`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Total training episodes across workers.
    #[arg(long, global = true)]
    episodes: Option<u64>,
    /// Evaluation runs per map.
    #[arg(long, global = true)]
    repeats: Option<u64>,
    #[arg(long, global = true)]
    n_points: Option<usize>,
    #[arg(long, global = true)]
    rho_max: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    success_bonus: Option<f64>,
    /// JSON file with any subset of the run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PlannerKind {
    Rlpg,
    Apf,
}

/// Everything a subcommand may read, after config file and flags are applied.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    train: TrainConfig,
    eval: EvalConfig,
    /// Controller used when evaluating a learned policy.
    fine_tune: FineTuneConfig,
    apf: ApfConfig,
}

#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    maps: Vec<String>,
    checkpoint: Option<String>,
    planners: &'a [PlannerKind],
    config: &'a RunConfig,
}

/// Bad invocation, reported with exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

type Outcome = anyhow::Result<()>;

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RLPG_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nRun `rlpg --help` for usage.");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let f = &cli.flags;
    let cfg = resolve_config(f)?;
    match &cli.cmd {
        Cmd::Train => cmd_train(f, cfg),
        Cmd::Eval => cmd_eval(f, cfg),
        Cmd::Ablate => cmd_ablate(f, cfg),
        Cmd::Plot => cmd_plot(f, cfg),
        Cmd::MapValidate { files } => cmd_map_validate(f, files, &cfg),
    }
}

fn resolve_config(f: &Flags) -> anyhow::Result<RunConfig> {
    let mut cfg = match &f.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(w) = f.workers {
        t.ppo.workers = w;
    }
    if let Some(e) = f.episodes {
        t.ppo.total_episodes = e;
    }
    if let Some(n) = f.n_points {
        t.policy.n_points = n;
    }
    if let Some(r) = f.rho_max {
        t.policy.rho_max = r;
    }
    if let Some(s) = f.seed {
        t.ppo.seed = s;
        cfg.eval.first_seed = s;
    }
    if f.deterministic {
        t.ppo.deterministic = true;
    }
    if let Some(b) = f.success_bonus {
        t.ppo.success_bonus = b;
    }
    if let Some(r) = f.repeats {
        cfg.eval.repeats = r;
    }
    Ok(cfg)
}

fn map_paths(f: &Flags) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = f.map.clone();
    if let Some(dir) = &f.maps {
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading map directory {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn load_maps(f: &Flags, robot_radius: f64) -> anyhow::Result<(Vec<PathBuf>, Vec<MapSpec>)> {
    let paths = map_paths(f)?;
    if paths.is_empty() {
        return usage("no maps given; use --maps DIR or --map FILE");
    }
    let mut maps = vec![];
    for p in &paths {
        let m = MapSpec::load(p)?;
        m.validate(robot_radius)?;
        maps.push(m);
    }
    Ok((paths, maps))
}

fn out_dir(f: &Flags) -> anyhow::Result<&Path> {
    match &f.out {
        Some(p) => {
            fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(p)
        }
        None => usage("--out is required"),
    }
}

fn write_echo(out: &Path, command: &str, f: &Flags, planners: &[PlannerKind], cfg: &RunConfig) -> anyhow::Result<()> {
    let echo = Echo {
        command,
        maps: map_paths(f)?.iter().map(|p| p.display().to_string()).collect(),
        checkpoint: f.checkpoint.as_ref().map(|p| p.display().to_string()),
        planners,
        config: cfg,
    };
    let path = out.join("run_config.json");
    fs::write(&path, serde_json::to_string_pretty(&echo)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_train(f: &Flags, cfg: RunConfig) -> Outcome {
    cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;
    let (_, maps) = load_maps(f, cfg.train.episode.robot_radius)?;
    let out = out_dir(f)?;
    write_echo(out, "train", f, &[], &cfg)?;
    if let Err(e) = ctrlc::set_handler(|| {
        log::warn!("interrupt received, stopping after the current update");
        STOP.store(true, Ordering::SeqCst);
    }) {
        log::warn!("could not install the interrupt handler: {e}");
    }
    let o = train(&cfg.train, &maps, out, Some(&STOP))?;
    println!(
        "{} after {} updates and {} episodes; latest checkpoint {}",
        if o.interrupted { "paused" } else { "finished" },
        o.updates,
        o.episodes,
        o.latest.display()
    );
    Ok(())
}

fn planners_for(f: &Flags) -> Vec<PlannerKind> {
    if !f.planner.is_empty() {
        let mut p = f.planner.clone();
        p.dedup();
        return p;
    }
    if f.checkpoint.is_some() {
        vec![PlannerKind::Rlpg, PlannerKind::Apf]
    } else {
        vec![PlannerKind::Apf]
    }
}

fn build_planners(f: &Flags, kinds: &[PlannerKind], cfg: &RunConfig) -> anyhow::Result<Vec<Box<dyn Planner>>> {
    let mut out: Vec<Box<dyn Planner>> = vec![];
    for k in kinds {
        match k {
            PlannerKind::Apf => {
                cfg.apf.validate().map_err(UsageError)?;
                out.push(Box::new(ApfPlanner(cfg.apf)));
            }
            PlannerKind::Rlpg => {
                let Some(path) = &f.checkpoint else {
                    return usage("planner rlpg needs --checkpoint");
                };
                let mut model =
                    PolicyModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
                if let Some(n) = f.n_points {
                    model.cfg.n_points = n;
                }
                if let Some(r) = f.rho_max {
                    model.cfg.rho_max = r;
                }
                model.cfg.validate().map_err(|e| UsageError(e.to_string()))?;
                cfg.fine_tune.validate().map_err(UsageError)?;
                out.push(Box::new(RlPgPlanner::new(model, cfg.fine_tune)));
            }
        }
    }
    Ok(out)
}

type Trajectories = BTreeMap<String, Vec<(String, Vec<TrajectorySample>)>>;

fn cmd_eval(f: &Flags, cfg: RunConfig) -> Outcome {
    cfg.eval.episode.validate().map_err(|e| UsageError(e.to_string()))?;
    let (_, maps) = load_maps(f, cfg.eval.episode.robot_radius)?;
    let kinds = planners_for(f);
    let mut planners = build_planners(f, &kinds, &cfg)?;
    let out = out_dir(f)?;
    write_echo(out, "eval", f, &kinds, &cfg)?;
    let mut records = vec![];
    let mut plots = Trajectories::new();
    for p in planners.iter_mut() {
        let name = p.name();
        let recs = run_suite_with(&maps, p.as_mut(), &cfg.eval, |map, seed, r| {
            log::info!("{name} {} seed {seed}: {} {:.2} m {:.1} s", map.name, r.status, r.length_m, r.time_s);
            if seed == cfg.eval.first_seed {
                plots
                    .entry(map.name.clone())
                    .or_default()
                    .push((name.clone(), r.trajectory.clone()));
            }
        })
        ?;
        records.extend(recs);
    }
    write_metrics_json(&records, &out.join("metrics.json"))?;
    write_metrics_csv(&records, &out.join("metrics.csv"))?;
    let report = format_report(&records);
    fs::write(out.join("report.txt"), &report).context("writing report")?;
    write_plots(&maps, &plots, out)?;
    print!("{report}");
    Ok(())
}

fn write_plots(maps: &[MapSpec], plots: &Trajectories, out: &Path) -> anyhow::Result<()> {
    for m in maps {
        let trajs = plots.get(&m.name).map(Vec::as_slice).unwrap_or(&[]);
        emit_plots(m, trajs, &out.join(format!("{}.svg", m.name)))?;
    }
    Ok(())
}

fn cmd_ablate(f: &Flags, cfg: RunConfig) -> Outcome {
    let Some(dir) = &f.checkpoint else {
        return usage("ablate needs --checkpoint DIR");
    };
    if !dir.is_dir() {
        return Err(anyhow!("{} is not a directory", dir.display()));
    }
    cfg.fine_tune.validate().map_err(UsageError)?;
    let (_, maps) = load_maps(f, cfg.eval.episode.robot_radius)?;
    if maps.len() != 1 {
        return usage("ablate takes exactly one map");
    }
    let out = out_dir(f)?;
    write_echo(out, "ablate", f, &[PlannerKind::Rlpg], &cfg)?;
    let grid = run_ablation(dir, &maps[0], &cfg.fine_tune, &cfg.eval)?;
    let text = format_ablation(&grid);
    fs::write(out.join("ablation.txt"), &text).context("writing ablation table")?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&grid)? + "\n")
        .context("writing ablation json")?;
    print!("{text}");
    Ok(())
}

fn cmd_plot(f: &Flags, cfg: RunConfig) -> Outcome {
    let (_, maps) = load_maps(f, cfg.eval.episode.robot_radius)?;
    let kinds = planners_for(f);
    let mut planners = build_planners(f, &kinds, &cfg)?;
    let out = out_dir(f)?;
    write_echo(out, "plot", f, &kinds, &cfg)?;
    let seed = cfg.eval.first_seed;
    let mut plots = Trajectories::new();
    for m in &maps {
        for p in planners.iter_mut() {
            let r = run_episode(m, p.as_mut(), seed, &cfg.eval)?;
            let name = p.name();
            log::info!("{name} {} seed {seed}: {} {:.2} m", m.name, r.status, r.length_m);
            let csv = out.join(format!("{}_{name}.csv", m.name));
            let file = fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?;
            write_trajectory_csv(file, &r.trajectory)?;
            plots.entry(m.name.clone()).or_default().push((name, r.trajectory));
        }
    }
    write_plots(&maps, &plots, out)?;
    Ok(())
}

fn cmd_map_validate(f: &Flags, files: &[PathBuf], cfg: &RunConfig) -> Outcome {
    let mut paths = files.to_vec();
    paths.extend(map_paths(f)?);
    if paths.is_empty() {
        return usage("map-validate needs at least one map file");
    }
    let radius = cfg.eval.episode.robot_radius;
    let mut bad = 0;
    for p in &paths {
        match MapSpec::load(p).and_then(|m| m.validate(radius).map(|_| m)) {
            Ok(m) => {
                let b = m.bounds;
                println!(
                    "{}: ok bounds [{}, {}, {}, {}] start [{}, {}, {}] goal [{}, {}] rects {} segments {}",
                    p.display(),
                    b.x0,
                    b.y0,
                    b.x1,
                    b.y1,
                    m.start.x,
                    m.start.y,
                    m.start.theta(),
                    m.goal.x,
                    m.goal.y,
                    m.rects.len(),
                    m.segments.len()
                );
            }
            Err(e) => {
                eprintln!("{}: {e}", p.display());
                bad += 1;
            }
        }
    }
    if bad > 0 {
        return Err(anyhow!("{bad} of {} maps failed validation", paths.len()));
    }
    Ok(())
}
