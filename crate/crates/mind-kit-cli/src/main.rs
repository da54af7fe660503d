//! mind-kit: scenario-tree planning from the command line.
//!
//! Five subcommands cover the pipeline stage by stage: `predict` (one
//! scene prediction), `tree` (grow a scenario tree), `plan` (full policy
//! selection with a trajectory tree), `sim` (closed-loop episode), and
//! `bench` (strategy and planner comparison tables).
//!
//! Configuration layers: built-in defaults, then the JSON config file
//! (`--config`, or `$MIND_KIT_CONFIG`), then individual flags. The merged
//! config is echoed into every JSON artifact, so a run is reproducible from
//! its outputs alone. All outputs are canonical: same inputs, same seed,
//! same bytes.
//!
//! Exit codes: 0 success (including degraded plans, which carry a warning
//! field instead), 1 internal error, 2 input error, 3 resource budget
//! exceeded.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mind_kit::aime::{bench_strategies, tree_dump, Strategy, TreeError};
use mind_kit::canon;
use mind_kit::config::{ConfigError, RunConfig};
use mind_kit::contingency::SolveError;
use mind_kit::plot;
use mind_kit::predictor::{predict_scene, IntentionMixturePredictor, PredictError};
use mind_kit::sim::{
    compare_planners, plan_scene, run_episode, CertifyMode, PlannerKind, SimError,
};
use mind_kit::world::{
    candidate_routes, classify_route, load_scenario, LaneId, RouteCommand, ScenarioFile,
    TurnClass, WorldError,
};

#[derive(Parser)]
#[command(
    name = "mind-kit",
    version,
    about = "Scenario-tree behavior planning over Gaussian-mixture scene predictions"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One scene prediction: weighted joint futures as JSON (optionally SVG).
    Predict(PredictArgs),
    /// Grow a scenario tree and dump it; prints leaf count, depth, modalities.
    Tree(TreeArgs),
    /// Full planning pass: tree, per-policy trajectory trees, selection.
    Plan(PlanArgs),
    /// Closed-loop episode: log (JSONL) and metrics (JSON).
    Sim(SimArgs),
    /// Strategy coverage table and closed-loop planner comparison (CSV).
    Bench(BenchArgs),
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Scenario file (JSON: map, history, ego route, policies, sim block).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for every stochastic stage (sampling, certification).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Config file; when absent, $MIND_KIT_CONFIG is tried.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Branching tolerance on the uncertainty growth rate (aime.beta).
    #[arg(long)]
    beta: Option<f64>,
    /// Homotopy quantization width in radians (aime.delta).
    #[arg(long)]
    delta: Option<f64>,
    /// Maximum tree depth (aime.d_max).
    #[arg(long)]
    dmax: Option<usize>,
    /// Prediction horizon in steps (predictor.horizon).
    #[arg(long)]
    horizon: Option<usize>,
    /// Chance-constraint tolerance (planner.p).
    #[arg(long)]
    p: Option<f64>,
    /// Decision-tracking weight (planner.gamma).
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// Route override: `left`/`straight`/`right` picks among the routes
    /// reachable from the ego's lane; anything else is read as a
    /// comma-separated lane-id chain.
    #[arg(long)]
    command: Option<String>,
    /// Also render prediction.svg.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct TreeArgs {
    #[command(flatten)]
    common: Common,
    /// Tree construction strategy.
    #[arg(long, default_value = "aime", value_parser = parse_strategy)]
    strategy: Strategy,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "aime", value_parser = parse_strategy)]
    strategy: Strategy,
    /// Also render plan.svg.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Ego planner variant; `none` requires a scripted ego policy.
    #[arg(long, default_value = "mind", value_parser = parse_planner)]
    planner: PlannerKind,
}

#[derive(Args)]
struct BenchArgs {
    /// Scenario files; each contributes one row group per table.
    #[arg(long, required = true, num_args = 1..)]
    scenario: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for closed-loop episodes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    dmax: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "ss" => Ok(Strategy::SingleShot),
        "aime" => Ok(Strategy::Aime),
        "bf" => Ok(Strategy::BruteForce),
        other => Err(format!("unknown strategy `{other}` (expected ss|aime|bf)")),
    }
}

fn parse_planner(s: &str) -> Result<PlannerKind, String> {
    match s {
        "mind" => Ok(PlannerKind::Mind),
        "nn-cp" => Ok(PlannerKind::NnCp),
        "mb-cp" => Ok(PlannerKind::MbCp),
        "none" => Ok(PlannerKind::None),
        other => Err(format!(
            "unknown planner `{other}` (expected mind|nn-cp|mb-cp|none)"
        )),
    }
}

// ============================================================================
// Errors and exit codes
// ============================================================================

struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn input(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }
    fn internal(msg: impl Into<String>) -> Self {
        CliError { code: 1, msg: msg.into() }
    }
    fn budget(msg: impl Into<String>) -> Self {
        CliError { code: 3, msg: msg.into() }
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<PredictError> for CliError {
    fn from(e: PredictError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<TreeError> for CliError {
    fn from(e: TreeError) -> Self {
        match e {
            TreeError::Budget { .. } => CliError::budget(e.to_string()),
            TreeError::Predict(p) => p.into(),
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        CliError::internal(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::World(w) => w.into(),
            SimError::Predict(p) => p.into(),
            SimError::Tree(t) => t.into(),
            SimError::Solve(s) => s.into(),
            SimError::Setup(msg) => CliError::input(msg),
        }
    }
}

// ============================================================================
// Setup shared by the subcommands
// ============================================================================

/// Loads the scenario and the layered config. The scenario's clock wins:
/// `predictor.dt` is forced to the history's dt so every stage steps on the
/// same grid.
fn setup(
    scenario: &Path,
    config: Option<&Path>,
    overlay: serde_json::Value,
) -> Result<(ScenarioFile, RunConfig), CliError> {
    let file = load_scenario(scenario)?;
    let cfg_path = config
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("MIND_KIT_CONFIG").map(PathBuf::from));
    let text = match &cfg_path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| {
            CliError::input(format!("cannot read config {}: {e}", p.display()))
        })?),
        None => None,
    };
    let mut cfg = RunConfig::layered(text.as_deref(), Some(&overlay))?;
    cfg.predictor.dt = file.history.dt;
    cfg.validate()?;
    Ok((file, cfg))
}

/// Builds the flag overlay: only flags that were given end up in the JSON,
/// so file and default values survive underneath.
fn flag_overlay(c: &Common) -> serde_json::Value {
    overlay_from(c.beta, c.delta, c.dmax, c.horizon, c.p, c.gamma)
}

fn overlay_from(
    beta: Option<f64>,
    delta: Option<f64>,
    dmax: Option<usize>,
    horizon: Option<usize>,
    p: Option<f64>,
    gamma: Option<f64>,
) -> serde_json::Value {
    let mut aime = serde_json::Map::new();
    if let Some(v) = beta {
        aime.insert("beta".into(), v.into());
    }
    if let Some(v) = delta {
        aime.insert("delta".into(), v.into());
    }
    if let Some(v) = dmax {
        aime.insert("d_max".into(), v.into());
    }
    let mut predictor = serde_json::Map::new();
    if let Some(v) = horizon {
        predictor.insert("horizon".into(), v.into());
    }
    let mut planner = serde_json::Map::new();
    if let Some(v) = p {
        planner.insert("p".into(), v.into());
    }
    if let Some(v) = gamma {
        planner.insert("gamma".into(), v.into());
    }
    let mut root = serde_json::Map::new();
    if !aime.is_empty() {
        root.insert("aime".into(), aime.into());
    }
    if !predictor.is_empty() {
        root.insert("predictor".into(), predictor.into());
    }
    if !planner.is_empty() {
        root.insert("planner".into(), planner.into());
    }
    root.into()
}

/// Resolves a `--command` string against the map: a turn word picks the
/// first matching candidate route from the ego's lane, anything else is a
/// comma-separated lane chain.
fn resolve_command(file: &ScenarioFile, text: &str, max_len: f64) -> Result<RouteCommand, CliError> {
    let turn = match text {
        "left" => Some(TurnClass::Left),
        "straight" => Some(TurnClass::Straight),
        "right" => Some(TurnClass::Right),
        _ => None,
    };
    if let Some(turn) = turn {
        let ego = file.history.ego().states.last().expect("validated history");
        let routes = candidate_routes(&file.map, ego.pos(), ego.heading, max_len)?;
        return routes
            .into_iter()
            .find(|r| classify_route(&file.map, r) == turn)
            .ok_or_else(|| CliError::input(format!("no {text} route reachable from the ego")));
    }
    let route = RouteCommand::new(text.split(',').map(|s| LaneId(s.trim().to_string())).collect());
    route.validate(&file.map)?;
    Ok(route)
}

fn write_out(dir: &Path, name: &str, bytes: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, bytes)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

/// JSON artifact: payload fields plus the merged config, canonical bytes.
fn artifact(cfg: &RunConfig, fields: Vec<(&str, serde_json::Value)>) -> String {
    let mut map = serde_json::Map::new();
    map.insert(
        "config".into(),
        serde_json::to_value(cfg).expect("config serializes"),
    );
    for (k, v) in fields {
        map.insert(k.into(), v);
    }
    let mut text = canon::to_canonical_value(&serde_json::Value::Object(map));
    text.push('\n');
    text
}

fn json_of<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("value serializes")
}

// ============================================================================
// Subcommands
// ============================================================================

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let (file, cfg) = setup(&args.common.scenario, args.common.config.as_deref(), flag_overlay(&args.common))?;
    let command = match &args.command {
        Some(text) => Some(resolve_command(&file, text, cfg.predictor.route_max_len)?),
        None => Some(file.ego_route.clone()),
    };
    let pred = predict_scene(&file.history, &file.map, command.as_ref(), &cfg.predictor)?;

    let out = artifact(&cfg, vec![("prediction", json_of(&pred))]);
    write_out(&args.common.out, "prediction.json", &out)?;
    if args.svg {
        let svg = plot::render_prediction(&file.map, &pred, cfg.planner.corridor_half_width);
        write_out(&args.common.out, "prediction.svg", &svg)?;
    }
    println!("scenarios: {}", pred.scenarios.len());
    Ok(())
}

fn cmd_tree(args: &TreeArgs) -> Result<(), CliError> {
    let (file, cfg) = setup(&args.common.scenario, args.common.config.as_deref(), flag_overlay(&args.common))?;
    let predictor = IntentionMixturePredictor::new(cfg.predictor.clone());
    let tree = mind_kit::aime::build_tree(
        &file.history,
        &file.map,
        Some(&file.ego_route),
        &predictor,
        &cfg.aime,
        args.strategy,
        cfg.predictor.horizon,
        cfg.sim.bf_node_budget,
    )?;

    let out = artifact(&cfg, vec![("tree", tree_dump(&tree))]);
    write_out(&args.common.out, "tree.json", &out)?;

    let modalities: Vec<String> = tree
        .leaf_modalities(cfg.aime.delta)
        .into_iter()
        .map(|m| {
            let parts: Vec<String> = m.0.iter().map(i64::to_string).collect();
            format!("({})", parts.join(","))
        })
        .collect();
    println!("strategy: {}", args.strategy);
    println!("leaves: {}", tree.leaves.len());
    println!("depth: {}", tree.depth());
    println!("predictor calls: {}", tree.predictor_calls);
    println!("modalities: {}", modalities.join(" "));
    Ok(())
}

fn cmd_plan(args: &PlanArgs) -> Result<(), CliError> {
    let (file, cfg) = setup(&args.common.scenario, args.common.config.as_deref(), flag_overlay(&args.common))?;
    let predictor = IntentionMixturePredictor::new(cfg.predictor.clone());
    let scene = plan_scene(
        &file.history,
        &file.map,
        Some(&file.ego_route),
        &predictor,
        &cfg,
        args.strategy,
        args.common.seed,
        CertifyMode::All,
    )?;
    let report = scene.report();

    let plan_json = match scene.selected_traj() {
        Some(traj) => traj.dump(file.history.dt),
        None => serde_json::Value::Null,
    };
    let mut fields = vec![("plan", plan_json)];
    if scene.degraded {
        fields.push((
            "warning",
            serde_json::Value::String("degraded: no candidate passed certification".into()),
        ));
    }
    write_out(&args.common.out, "plan.json", &artifact(&cfg, fields))?;
    write_out(
        &args.common.out,
        "report.json",
        &artifact(&cfg, vec![("report", json_of(&report))]),
    )?;
    if args.svg {
        if let Some(traj) = scene.selected_traj() {
            let svg =
                plot::render_plan(&file.map, &scene.tree, traj, cfg.planner.corridor_half_width);
            write_out(&args.common.out, "plan.svg", &svg)?;
        }
    }

    let sel = &report.candidates[scene.selected];
    println!(
        "selected: policy {} (q: {}, cost: {})",
        sel.policy_id,
        canon::format_f64(sel.q),
        canon::format_f64(sel.cost),
    );
    println!("candidates: {}", report.candidates.len());
    if scene.degraded {
        println!("warning: degraded selection, no candidate passed certification");
    }
    Ok(())
}

fn cmd_sim(args: &SimArgs) -> Result<(), CliError> {
    let (file, cfg) = setup(&args.common.scenario, args.common.config.as_deref(), flag_overlay(&args.common))?;
    let (log, metrics) = run_episode(&file, &cfg, args.planner, args.common.seed)?;

    // JSONL: header, one line per step, terminator. Each line is canonical
    // JSON on its own.
    let mut lines = String::new();
    let header = serde_json::json!({
        "type": "header",
        "dt": log.dt,
        "planner": args.planner.to_string(),
        "seed": args.common.seed,
        "config": json_of(&cfg),
        "initial": json_of(&log.initial),
    });
    lines.push_str(&canon::to_canonical_value(&header));
    lines.push('\n');
    for r in &log.records {
        let mut v = json_of(r);
        v.as_object_mut()
            .expect("record is an object")
            .insert("type".into(), "step".into());
        lines.push_str(&canon::to_canonical_value(&v));
        lines.push('\n');
    }
    let end = serde_json::json!({"type": "end", "termination": json_of(&log.termination)});
    lines.push_str(&canon::to_canonical_value(&end));
    lines.push('\n');
    write_out(&args.common.out, "episode.jsonl", &lines)?;
    write_out(
        &args.common.out,
        "metrics.json",
        &artifact(&cfg, vec![("metrics", json_of(&metrics))]),
    )?;

    println!(
        "termination: {}",
        match log.termination {
            mind_kit::sim::Termination::Horizon => "horizon".to_string(),
            mind_kit::sim::Termination::Collision { step } => format!("collision@{step}"),
            mind_kit::sim::Termination::Goal { step } => format!("goal@{step}"),
        }
    );
    println!(
        "avg_spd: {}  max_abs_acc: {}  rms_acc: {}",
        canon::format_f64(metrics.avg_spd),
        canon::format_f64(metrics.max_abs_acc),
        canon::format_f64(metrics.rms_acc),
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let overlay = overlay_from(args.beta, args.delta, args.dmax, args.horizon, args.p, args.gamma);

    let mut strategy_csv = String::from(
        "fixture,strategy,coverage_pct,scenario_count,predictor_calls,cost_ratio\n",
    );
    let mut planner_csv = String::from(
        "fixture,variant,mean_avg_spd,mean_max_abs_acc,mean_rms_acc,collisions,goals\n",
    );
    let mut bench_json = Vec::new();

    for path in &args.scenario {
        let fixture = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let (file, cfg) = setup(path, args.config.as_deref(), overlay.clone())?;
        let predictor = IntentionMixturePredictor::new(cfg.predictor.clone());

        let strategies = bench_strategies(
            &file.history,
            &file.map,
            Some(&file.ego_route),
            &predictor,
            &cfg.aime,
            cfg.predictor.horizon,
            cfg.sim.bf_node_budget,
        )?;
        for row in &strategies.rows {
            strategy_csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fixture,
                row.strategy,
                canon::format_f64(row.coverage_pct),
                row.scenario_count,
                row.predictor_calls,
                canon::format_f64(row.cost_ratio),
            ));
        }

        let seeds: Vec<u64> = (0..cfg.sim.bench_seeds as u64)
            .map(|i| args.seed.wrapping_add(i))
            .collect();
        let variants = [PlannerKind::Mind, PlannerKind::NnCp, PlannerKind::MbCp];
        let table = compare_planners(&file, &cfg, &variants, &seeds, args.jobs)?;
        for s in &table.summary {
            planner_csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                fixture,
                s.variant,
                canon::format_f64(s.mean_avg_spd),
                canon::format_f64(s.mean_max_abs_acc),
                canon::format_f64(s.mean_rms_acc),
                s.collisions,
                s.goals,
            ));
        }

        bench_json.push(serde_json::json!({
            "fixture": fixture,
            "config": json_of(&cfg),
            "strategies": json_of(&strategies),
            "comparison": json_of(&table),
        }));
    }

    write_out(&args.out, "strategies.csv", &strategy_csv)?;
    write_out(&args.out, "planners.csv", &planner_csv)?;
    let mut all = canon::to_canonical_value(&serde_json::Value::Array(bench_json));
    all.push('\n');
    write_out(&args.out, "bench.json", &all)?;

    print!("{strategy_csv}");
    print!("{planner_csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Tree(a) => cmd_tree(a),
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Sim(a) => cmd_sim(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mind-kit: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
