//! Deterministic synchronous closed-loop simulator.
//!
//! Each step the ego runs the full pipeline — scenario tree, policy solves,
//! chance certification, selection — and executes only the first control of
//! the winning trajectory tree. Everyone else follows a scripted or
//! trigger-based policy under the same bicycle kinematics. Perception is
//! perfect: the planner sees exact states.
//!
//! Logs are self-sufficient (metrics can be recomputed from them) and, for
//! a fixed (scenario, config, seed), byte-reproducible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aime::{build_tree, enumerate_policies, Policy, ScenarioTree, Strategy, TreeError};
use crate::config::RunConfig;
use crate::contingency::{
    bicycle_step, check_chance, ilqr_solve_tree, BicycleDynamics, ChanceReport, Control,
    ControlBounds, IlqrParams, PlanProblem, SolveError, TrajectoryTree, VehicleState,
};
use crate::geom::Polyline;
use crate::policy::{evaluate, select, Candidate, CandidateReport, EvaluationReport, Selection};
use crate::predictor::{
    ConstantVelocityPredictor, IntentionMixturePredictor, PredictError, ScenePredictor,
};
use crate::world::{
    candidate_routes, classify_route, AgentId, AgentState, LaneGraph, ObservationHistory,
    PolicySpec, Role, RouteCommand, ScenarioFile, TurnClass, WorldError,
};

/// Steps of history kept for the predictor while the episode rolls.
const OBS_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("simulation setup: {0}")]
    Setup(String),
}

// ============================================================================
// Agent policies
// ============================================================================

/// How a scripted agent advances. Everything integrates through the bicycle
/// model; playback states are taken verbatim.
#[derive(Debug, Clone)]
pub enum AgentPolicy {
    /// Follow a pre-recorded state sequence; once exhausted, continue
    /// straight at the last speed.
    Playback { states: Vec<AgentState> },
    /// Track the attached lane route at a fixed target speed.
    LaneFollow { target_speed: f64 },
    /// Lane-follow at `base_speed` until the trigger time, then hold a
    /// fixed (typically aggressive) acceleration, optionally capped.
    AdversarialTrigger {
        trigger_step: usize,
        accel: f64,
        base_speed: f64,
        max_speed: Option<f64>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaybackParams {
    states: Vec<[f64; 4]>,
    #[serde(default)]
    radius: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneFollowParams {
    target_speed: f64,
    #[serde(default)]
    radius: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TriggerParams {
    /// Seconds; converted to a step index at the sim dt.
    trigger_time: f64,
    accel: f64,
    base_speed: f64,
    #[serde(default)]
    max_speed: Option<f64>,
    #[serde(default)]
    radius: Option<f64>,
}

/// Parses one scripted-agent entry; returns the policy and an optional
/// footprint-radius override.
pub fn parse_policy(spec: &PolicySpec, dt: f64) -> Result<(AgentPolicy, Option<f64>), SimError> {
    let bad = |e: serde_json::Error| {
        SimError::Setup(format!("policy params for {}: {e}", spec.agent_id))
    };
    match spec.kind.as_str() {
        "playback" => {
            let p: PlaybackParams = serde_json::from_value(spec.params.clone()).map_err(bad)?;
            Ok((
                AgentPolicy::Playback {
                    states: p.states.into_iter().map(AgentState::from).collect(),
                },
                p.radius,
            ))
        }
        "lane-follow" => {
            let p: LaneFollowParams = serde_json::from_value(spec.params.clone()).map_err(bad)?;
            Ok((
                AgentPolicy::LaneFollow {
                    target_speed: p.target_speed,
                },
                p.radius,
            ))
        }
        "adversarial-trigger" => {
            let p: TriggerParams = serde_json::from_value(spec.params.clone()).map_err(bad)?;
            Ok((
                AgentPolicy::AdversarialTrigger {
                    trigger_step: (p.trigger_time / dt).round() as usize,
                    accel: p.accel,
                    base_speed: p.base_speed,
                    max_speed: p.max_speed,
                },
                p.radius,
            ))
        }
        other => Err(SimError::Setup(format!(
            "unknown policy kind \"{other}\" for {}",
            spec.agent_id
        ))),
    }
}

/// Per-entity runtime: the policy, its attached route (for lane tracking),
/// the playback cursor, and the collision footprint.
struct EntityRuntime {
    policy: Option<AgentPolicy>,
    route: Option<Polyline>,
    cursor: usize,
    radius: f64,
}

impl EntityRuntime {
    /// Advances a scripted entity one step. `step` is the 0-based index of
    /// the control interval being executed.
    fn advance(&mut self, cur: AgentState, step: usize, dt: f64) -> AgentState {
        let policy = match &self.policy {
            Some(p) => p,
            // Unscripted, planner-less entities coast straight.
            None => return integrate(cur, 0.0, 0.0, dt),
        };
        match policy {
            AgentPolicy::Playback { states } => {
                if self.cursor < states.len() {
                    let s = states[self.cursor];
                    self.cursor += 1;
                    s
                } else {
                    integrate(cur, 0.0, 0.0, dt)
                }
            }
            AgentPolicy::LaneFollow { target_speed } => {
                let (a, kappa) = self.track(cur, *target_speed);
                integrate(cur, a, kappa, dt)
            }
            AgentPolicy::AdversarialTrigger {
                trigger_step,
                accel,
                base_speed,
                max_speed,
            } => {
                if step >= *trigger_step {
                    let capped = match max_speed {
                        Some(vm) if cur.speed >= *vm => 0.0,
                        _ => *accel,
                    };
                    let kappa = self.steer(cur);
                    integrate(cur, capped, kappa, dt)
                } else {
                    let (a, kappa) = self.track(cur, *base_speed);
                    integrate(cur, a, kappa, dt)
                }
            }
        }
    }

    fn steer(&self, cur: AgentState) -> f64 {
        self.route
            .as_ref()
            .map_or(0.0, |pl| pl.lookahead_curvature(cur.pos(), cur.heading, cur.speed))
    }

    /// Proportional speed tracking plus lane steering.
    fn track(&self, cur: AgentState, target: f64) -> (f64, f64) {
        let a = ((target - cur.speed) * 1.0).clamp(-3.0, 2.0);
        (a, self.steer(cur))
    }
}

fn integrate(s: AgentState, a: f64, kappa: f64, dt: f64) -> AgentState {
    let next = bicycle_step(
        &VehicleState {
            x: s.x,
            y: s.y,
            theta: s.heading,
            v: s.speed,
        },
        &Control { a, kappa },
        dt,
    );
    AgentState {
        x: next.x,
        y: next.y,
        heading: next.theta,
        speed: next.v.max(0.0),
    }
}

/// Picks the route an agent follows: straight candidate if there is one,
/// then lexicographic.
fn attach_route(map: &LaneGraph, state: &AgentState, max_len: f64) -> Option<Polyline> {
    let mut routes = candidate_routes(map, state.pos(), state.heading, max_len).ok()?;
    routes.sort_by_key(|r| {
        (
            classify_route(map, r) != TurnClass::Straight,
            r.lanes.clone(),
        )
    });
    routes.first().map(|r| r.polyline(map))
}

// ============================================================================
// The ego planner
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlannerKind {
    /// Adaptive scenario tree over the intention-mixture predictor.
    Mind,
    /// Same predictor, single-shot tree: commits to one predicted mode.
    NnCp,
    /// Constant-velocity predictor, single-shot tree.
    MbCp,
    /// No planner; the ego must be scripted like any other agent.
    None,
}

impl std::fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlannerKind::Mind => "MIND",
            PlannerKind::NnCp => "NN+CP",
            PlannerKind::MbCp => "MB+CP",
            PlannerKind::None => "none",
        })
    }
}

/// Whether plan_scene certifies every candidate or stops at the first
/// feasible one in selection order (cheaper; same selection).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertifyMode {
    All,
    Lazy,
}

/// One scored-and-certified policy plan.
pub struct PlannedCandidate {
    pub policy: Policy,
    pub problem: PlanProblem,
    /// None when the solve diverged.
    pub traj: Option<TrajectoryTree>,
    pub q: f64,
    /// None when lazy certification skipped this candidate.
    pub chance: Option<ChanceReport>,
    pub feasible: bool,
}

/// Full output of one planning invocation.
pub struct PlanScene {
    pub tree: ScenarioTree,
    pub candidates: Vec<PlannedCandidate>,
    pub selected: usize,
    pub degraded: bool,
    reward: crate::config::RewardWeights,
}

impl PlanScene {
    pub fn selected_traj(&self) -> Option<&TrajectoryTree> {
        self.candidates[self.selected].traj.as_ref()
    }

    pub fn report(&self) -> EvaluationReport {
        EvaluationReport {
            candidates: self
                .candidates
                .iter()
                .enumerate()
                .map(|(i, c)| CandidateReport {
                    policy_id: c.policy.id,
                    q: c.q,
                    reward: c
                        .traj
                        .as_ref()
                        .map(|t| crate::policy::evaluate_detailed(t, &c.problem, &self.reward))
                        .unwrap_or_default(),
                    cost: c.traj.as_ref().map_or(f64::INFINITY, |t| t.cost),
                    cost_breakdown: c.traj.as_ref().map(|t| t.breakdown).unwrap_or_default(),
                    mass: c.policy.mass,
                    feasible: c.feasible,
                    chance_estimate: c.chance.as_ref().map_or(f64::NAN, |r| r.max_estimate),
                    selected: i == self.selected,
                })
                .collect(),
            selected: self.selected,
            degraded: self.degraded,
        }
    }
}

/// Runs the pipeline once: tree, per-policy solves, certification,
/// selection.
pub fn plan_scene(
    obs: &ObservationHistory,
    map: &LaneGraph,
    command: Option<&RouteCommand>,
    predictor: &dyn ScenePredictor,
    cfg: &RunConfig,
    strategy: Strategy,
    seed: u64,
    certify: CertifyMode,
) -> Result<PlanScene, SimError> {
    let tree = build_tree(
        obs,
        map,
        command,
        predictor,
        &cfg.aime,
        strategy,
        cfg.predictor.horizon,
        cfg.sim.bf_node_budget,
    )?;
    let policies = enumerate_policies(&tree);
    if policies.is_empty() {
        return Err(SimError::Setup("scenario tree has no scenarios".into()));
    }

    let ego = obs.ego().states.last().copied().expect("validated history");
    let x0 = nalgebra::Vector4::new(ego.x, ego.y, ego.heading, ego.speed);
    let dynamics = BicycleDynamics { dt: obs.dt };

    let mut candidates: Vec<PlannedCandidate> = policies
        .into_iter()
        .map(|policy| {
            let problem = PlanProblem::from_policy(&tree, &policy, map, &cfg.planner);
            // Two longitudinal seeds bracket the arrival-time decision at
            // each conflict; the soft costs rank the resulting basins.
            let traj = [false, true]
                .into_iter()
                .filter_map(|track| {
                    let init = problem.warm_start(&dynamics, &x0, track);
                    ilqr_solve_tree(
                        &problem.topo,
                        &problem,
                        &dynamics,
                        &x0,
                        IlqrParams::from(&cfg.planner),
                        ControlBounds::from(&cfg.planner),
                        Some(&init),
                    )
                    .ok()
                })
                .min_by(|a, b| a.cost.partial_cmp(&b.cost).unwrap());
            let q = traj
                .as_ref()
                .map_or(f64::NEG_INFINITY, |t| evaluate(t, &problem, &cfg.reward));
            PlannedCandidate {
                policy,
                problem,
                traj,
                q,
                chance: None,
                feasible: false,
            }
        })
        .collect();

    // Certify in the selector's preference order so that in lazy mode the
    // first pass is exactly the final selection.
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .q
            .partial_cmp(&candidates[a].q)
            .unwrap()
            .then(
                candidates[b]
                    .policy
                    .mass
                    .partial_cmp(&candidates[a].policy.mass)
                    .unwrap(),
            )
            .then(a.cmp(&b))
    });
    for &i in &order {
        let c = &mut candidates[i];
        let Some(traj) = c.traj.as_ref() else { continue };
        // Independent sampling stream per policy: certification outcomes do
        // not depend on the order candidates are checked in.
        let chance_seed = seed ^ ((c.policy.id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let report = check_chance(
            traj,
            &c.problem.raw_agents,
            cfg.planner.p,
            cfg.planner.chance_samples,
            chance_seed,
            cfg.planner.footprint_radius,
        );
        c.feasible = traj.converged && report.pass;
        c.chance = Some(report);
        if c.feasible && certify == CertifyMode::Lazy {
            break;
        }
    }

    let rows: Vec<Candidate> = candidates
        .iter()
        .map(|c| Candidate {
            policy_id: c.policy.id,
            mass: c.policy.mass,
            q: c.q,
            feasible: c.feasible,
            violation: c.chance.as_ref().map_or(1.0, |r| r.max_estimate),
        })
        .collect();
    let Selection { index, degraded } = select(&rows);

    Ok(PlanScene {
        tree,
        candidates,
        selected: index,
        degraded,
        reward: cfg.reward.clone(),
    })
}

/// The ego's planning stack for one episode.
pub struct EgoPlanner {
    pub kind: PlannerKind,
    strategy: Strategy,
    predictor: Option<Box<dyn ScenePredictor>>,
}

impl EgoPlanner {
    pub fn new(kind: PlannerKind, cfg: &RunConfig) -> Self {
        let (strategy, predictor): (Strategy, Option<Box<dyn ScenePredictor>>) = match kind {
            PlannerKind::Mind => (
                Strategy::Aime,
                Some(Box::new(IntentionMixturePredictor::new(cfg.predictor.clone()))),
            ),
            PlannerKind::NnCp => (
                Strategy::SingleShot,
                Some(Box::new(IntentionMixturePredictor::new(cfg.predictor.clone()))),
            ),
            PlannerKind::MbCp => (
                Strategy::SingleShot,
                Some(Box::new(ConstantVelocityPredictor::new(cfg.predictor.clone()))),
            ),
            PlannerKind::None => (Strategy::SingleShot, None),
        };
        EgoPlanner {
            kind,
            strategy,
            predictor,
        }
    }
}

// ============================================================================
// Logs and metrics
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: AgentId,
    pub state: AgentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 0-based index of the executed control interval.
    pub step: usize,
    /// States after the step: ego first, then agents by id.
    pub entities: Vec<EntityRecord>,
    /// Executed ego control, absent when the ego is scripted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ego_control: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_id: Option<usize>,
    pub degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree_hash: Option<String>,
    /// Present only when timings are enabled; excluded from determinism.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "lowercase")]
pub enum Termination {
    Horizon,
    Collision { step: usize },
    Goal { step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub dt: f64,
    /// States before the first step: ego first, then agents by id.
    pub initial: Vec<EntityRecord>,
    pub records: Vec<StepRecord>,
    pub termination: Termination,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub avg_spd: f64,
    pub max_abs_acc: f64,
    pub rms_acc: f64,
    pub collision: bool,
    pub goal: bool,
}

impl Metrics {
    /// Recomputes the metrics from a log; the log is self-sufficient.
    /// Executed accelerations come from the logged controls, or from speed
    /// differences when the ego was scripted.
    pub fn from_log(log: &EpisodeLog) -> Metrics {
        let mut speeds = Vec::with_capacity(log.records.len());
        let mut accs = Vec::with_capacity(log.records.len());
        let mut prev_speed = log.initial[0].state.speed;
        for r in &log.records {
            let v = r.entities[0].state.speed;
            speeds.push(v);
            match r.ego_control {
                Some([a, _]) => accs.push(a),
                None => accs.push((v - prev_speed) / log.dt),
            }
            prev_speed = v;
        }
        let n = speeds.len().max(1) as f64;
        Metrics {
            avg_spd: speeds.iter().sum::<f64>() / n,
            max_abs_acc: accs.iter().fold(0.0_f64, |m, a| m.max(a.abs())),
            rms_acc: (accs.iter().map(|a| a * a).sum::<f64>() / n).sqrt(),
            collision: matches!(log.termination, Termination::Collision { .. }),
            goal: matches!(log.termination, Termination::Goal { .. }),
        }
    }
}

/// FNV-1a over the canonical form; enough to summarize a tree in a log.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Short structural hash of a scenario tree: ids, parents, weights,
/// modalities. Gaussians excluded — this summarizes shape, not content.
pub fn tree_summary_hash(tree: &ScenarioTree) -> String {
    let summary: Vec<serde_json::Value> = tree
        .nodes
        .iter()
        .map(|n| {
            serde_json::json!([
                n.id,
                n.parent,
                n.entry_step,
                crate::canon::format_f64(n.weight),
                n.modality,
            ])
        })
        .collect();
    let text = crate::canon::to_canonical(&summary);
    format!("{:016x}", fnv1a(text.as_bytes()))
}

// ============================================================================
// The episode loop
// ============================================================================

/// Mutable world: rolling observation history plus per-entity runtimes.
pub struct SimState {
    pub history: ObservationHistory,
    runtimes: Vec<EntityRuntime>,
    pub step: usize,
}

impl SimState {
    /// Sets up runtimes: scripted policies from the scenario, routes
    /// attached, footprints resolved.
    pub fn new(scenario: &ScenarioFile, cfg: &RunConfig, ego_scripted: bool) -> Result<Self, SimError> {
        scenario.validate()?;
        if (scenario.sim.dt - scenario.history.dt).abs() > 1e-12 {
            return Err(SimError::Setup(format!(
                "sim dt {} != history dt {}",
                scenario.sim.dt, scenario.history.dt
            )));
        }
        let mut runtimes = Vec::with_capacity(scenario.history.agents.len());
        for track in &scenario.history.agents {
            let spec = scenario.policies.iter().find(|p| p.agent_id == track.id);
            let (policy, radius) = match spec {
                Some(s) => {
                    let (p, r) = parse_policy(s, scenario.sim.dt)?;
                    (Some(p), r)
                }
                None => (None, None),
            };
            if track.role == Role::Ego && !ego_scripted && policy.is_some() {
                return Err(SimError::Setup(
                    "ego has a scripted policy but a planner is active".into(),
                ));
            }
            let cur = *track.states.last().expect("validated history");
            let needs_route = matches!(
                policy,
                Some(AgentPolicy::LaneFollow { .. }) | Some(AgentPolicy::AdversarialTrigger { .. })
            );
            let route = if needs_route {
                let r = attach_route(&scenario.map, &cur, cfg.predictor.route_max_len);
                if r.is_none() {
                    return Err(SimError::Setup(format!(
                        "agent {} needs a lane route but none attaches",
                        track.id
                    )));
                }
                r
            } else {
                None
            };
            runtimes.push(EntityRuntime {
                policy,
                route,
                cursor: 0,
                radius: radius.unwrap_or(cfg.sim.disc_radius),
            });
        }
        Ok(SimState {
            history: scenario.history.clone(),
            runtimes,
            step: 0,
        })
    }

    fn entity_records(&self) -> Vec<EntityRecord> {
        let mut out = vec![EntityRecord {
            id: self.history.ego().id.clone(),
            state: *self.history.ego().states.last().unwrap(),
        }];
        for t in self.history.agents_sorted() {
            out.push(EntityRecord {
                id: t.id.clone(),
                state: *t.states.last().unwrap(),
            });
        }
        out
    }

    fn ego_index(&self) -> usize {
        self.history
            .agents
            .iter()
            .position(|t| t.role == Role::Ego)
            .expect("validated history")
    }

    /// Collision: ego disc against every agent disc.
    fn ego_collides(&self) -> bool {
        let ei = self.ego_index();
        let ego = self.history.agents[ei].states.last().unwrap().pos();
        let er = self.runtimes[ei].radius;
        self.history.agents.iter().enumerate().any(|(i, t)| {
            i != ei && {
                let p = t.states.last().unwrap().pos();
                (p - ego).norm() < er + self.runtimes[i].radius
            }
        })
    }

    /// Advances the whole scene one step. The planner (when present) is
    /// invoked on the current history; its first control is executed.
    pub fn step(
        &mut self,
        planner: &EgoPlanner,
        scenario: &ScenarioFile,
        cfg: &RunConfig,
        seed: u64,
    ) -> Result<StepRecord, SimError> {
        let started = std::time::Instant::now();
        let ei = self.ego_index();

        // Plan for the ego before anyone moves.
        let mut ego_control = None;
        let mut policy_id = None;
        let mut degraded = false;
        let mut tree_hash = None;
        if let Some(predictor) = planner.predictor.as_deref() {
            let step_seed = seed.wrapping_add((self.step as u64) << 24);
            let scene = plan_scene(
                &self.history,
                &scenario.map,
                Some(&scenario.ego_route),
                predictor,
                cfg,
                planner.strategy,
                step_seed,
                CertifyMode::Lazy,
            )?;
            degraded = scene.degraded;
            policy_id = Some(scene.candidates[scene.selected].policy.id);
            tree_hash = Some(tree_summary_hash(&scene.tree));
            // Divergence of every policy solve leaves no trajectory; brake
            // straight as the degraded fallback rather than aborting.
            let control = scene
                .selected_traj()
                .and_then(TrajectoryTree::first_control)
                .unwrap_or(Control {
                    a: cfg.planner.a_min / 2.0,
                    kappa: 0.0,
                });
            ego_control = Some([control.a, control.kappa]);
        }

        // Advance every entity from the same pre-step states.
        let dt = scenario.sim.dt;
        let mut next_states = Vec::with_capacity(self.history.agents.len());
        for (i, track) in self.history.agents.iter().enumerate() {
            let cur = *track.states.last().unwrap();
            let next = if i == ei {
                match ego_control {
                    Some([a, kappa]) => integrate(cur, a, kappa, dt),
                    None => self.runtimes[i].advance(cur, self.step, dt),
                }
            } else {
                self.runtimes[i].advance(cur, self.step, dt)
            };
            next_states.push(next);
        }
        for (track, next) in self.history.agents.iter_mut().zip(next_states) {
            track.states.push(next);
            if track.states.len() > OBS_WINDOW {
                track.states.remove(0);
            }
        }

        let record = StepRecord {
            step: self.step,
            entities: self.entity_records(),
            ego_control,
            policy_id,
            degraded,
            tree_hash,
            wall_ms: cfg
                .sim
                .timings
                .then(|| started.elapsed().as_secs_f64() * 1e3),
        };
        self.step += 1;
        Ok(record)
    }
}

/// Runs a full episode: loops step until the horizon, a collision, or the
/// ego reaching the end of its route.
pub fn run_episode(
    scenario: &ScenarioFile,
    cfg: &RunConfig,
    kind: PlannerKind,
    seed: u64,
) -> Result<(EpisodeLog, Metrics), SimError> {
    let planner = EgoPlanner::new(kind, cfg);
    let mut state = SimState::new(scenario, cfg, kind == PlannerKind::None)?;
    let goal_route = scenario.ego_route.polyline(&scenario.map);

    let initial = state.entity_records();
    let mut records = Vec::with_capacity(scenario.sim.horizon_steps);
    let mut termination = Termination::Horizon;

    for _ in 0..scenario.sim.horizon_steps {
        let record = state.step(&planner, scenario, cfg, seed)?;
        let step = record.step;
        records.push(record);

        if state.ego_collides() {
            termination = Termination::Collision { step };
            break;
        }
        let ego = state.history.ego().states.last().unwrap();
        let s = goal_route.project(ego.pos()).arclength;
        if s >= goal_route.length() - cfg.sim.goal_margin {
            termination = Termination::Goal { step };
            break;
        }
    }

    let log = EpisodeLog {
        dt: scenario.sim.dt,
        initial,
        records,
        termination,
    };
    let metrics = Metrics::from_log(&log);
    Ok((log, metrics))
}

// ============================================================================
// Planner comparison
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_avg_spd: f64,
    pub mean_max_abs_acc: f64,
    pub mean_rms_acc: f64,
    pub collisions: usize,
    pub goals: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub summary: Vec<VariantSummary>,
}

/// Runs every (variant, seed) episode on the same scenario and aggregates.
/// Episodes are independent; `jobs` > 1 fans them out across threads with
/// results placed by index, so the table is order-deterministic.
pub fn compare_planners(
    scenario: &ScenarioFile,
    cfg: &RunConfig,
    variants: &[PlannerKind],
    seeds: &[u64],
    jobs: usize,
) -> Result<ComparisonTable, SimError> {
    let tasks: Vec<(PlannerKind, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();

    let mut results: Vec<Option<Result<Metrics, SimError>>> =
        (0..tasks.len()).map(|_| None).collect();

    let jobs = jobs.max(1).min(tasks.len().max(1));
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<usize>> = (0..jobs)
            .map(|w| (w..tasks.len()).step_by(jobs).collect())
            .collect();
        let mut handles = Vec::new();
        for chunk in chunks {
            let tasks = &tasks;
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|i| {
                        let (kind, seed) = tasks[i];
                        (i, run_episode(scenario, cfg, kind, seed).map(|(_, m)| m))
                    })
                    .collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("episode worker") {
                results[i] = Some(r);
            }
        }
    });

    let mut rows = Vec::with_capacity(tasks.len());
    for ((kind, seed), result) in tasks.iter().zip(results) {
        rows.push(ComparisonRow {
            variant: kind.to_string(),
            seed: *seed,
            metrics: result.expect("all tasks ran")?,
        });
    }

    let summary = variants
        .iter()
        .map(|&v| {
            let name = v.to_string();
            let ms: Vec<&Metrics> = rows
                .iter()
                .filter(|r| r.variant == name)
                .map(|r| &r.metrics)
                .collect();
            let n = ms.len().max(1) as f64;
            VariantSummary {
                variant: name,
                mean_avg_spd: ms.iter().map(|m| m.avg_spd).sum::<f64>() / n,
                mean_max_abs_acc: ms.iter().map(|m| m.max_abs_acc).sum::<f64>() / n,
                mean_rms_acc: ms.iter().map(|m| m.rms_acc).sum::<f64>() / n,
                collisions: ms.iter().filter(|m| m.collision).count(),
                goals: ms.iter().filter(|m| m.goal).count(),
            }
        })
        .collect();

    Ok(ComparisonTable { rows, summary })
}
