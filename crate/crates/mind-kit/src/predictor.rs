//! Scene prediction: a pluggable interface plus a built-in analytic
//! intention-mixture predictor.
//!
//! The built-in predictor enumerates joint intention hypotheses (per-entity
//! route x longitudinal mode), filters out jointly impossible combinations,
//! rolls each hypothesis out with simple longitudinal/lateral controllers,
//! and wraps the mean trajectories in linearly propagated Gaussians. Action
//! noise fires in short bursts when an entity enters the approach window of
//! an unresolved crossing conflict: interaction onsets are where futures
//! genuinely diverge, so that is where positional uncertainty jumps.

use nalgebra::{Matrix2, Point2, Vector2};
use thiserror::Error;

use crate::config::PredictorConfig;
use crate::geom::{first_contact, heading_vec, wrap_angle, Polyline};
use crate::gmm::{EntityTrajectory, Gaussian2, ScenePrediction, Scenario};
use crate::world::{
    candidate_routes, classify_route, AgentId, LaneGraph, ObservationHistory, RouteCommand,
    TurnClass, WorldError,
};

/// Meters past a conflict point after which the conflict counts as cleared.
const PASS_CLEAR: f64 = 4.0;
/// A yielding entity aims to stop this far before the conflict point, m.
const STOP_MARGIN: f64 = 3.0;
/// Noise-boost window around an unresolved conflict: from this far before
/// the conflict point to `PASS_CLEAR` past it, m.
const APPROACH_WINDOW: f64 = 15.0;
/// Steps of boosted action noise after a mover first enters the approach
/// window of an unresolved conflict. The burst models the micro-timing
/// ambiguity of the decision moment itself; holding the boost for the whole
/// approach would instead diffuse a committed yielder over several meters,
/// which no downstream collision check could live with.
const BURST_STEPS: usize = 3;
/// Contact radius used when intersecting two route polylines, m.
const CONFLICT_RADIUS: f64 = 2.0;
/// Tangent misalignment beyond which a route contact counts as a crossing
/// rather than car-following, rad.
const CROSSING_ANGLE: f64 = 30.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("entity {id} attaches to no lane")]
    NoRoute { id: AgentId },
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Longitudinal behavior mode of one entity within a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LongitudinalMode {
    Yield,
    Maintain,
    Assert,
}

pub const ALL_MODES: [LongitudinalMode; 3] = [
    LongitudinalMode::Yield,
    LongitudinalMode::Maintain,
    LongitudinalMode::Assert,
];

#[derive(Debug, Clone, PartialEq)]
pub struct AgentIntention {
    pub id: AgentId,
    pub route: RouteCommand,
    pub mode: LongitudinalMode,
}

/// One joint hypothesis: an ego decision plus one intention per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentionHypothesis {
    pub ego_route: RouteCommand,
    pub ego_mode: LongitudinalMode,
    /// Sorted by agent id.
    pub agents: Vec<AgentIntention>,
    /// Unnormalized prior weight, > 0.
    pub prior: f64,
}

/// Anything that can predict weighted joint futures for a scene. The
/// planning stack depends only on this interface, so the analytic model can
/// be swapped for a learned one.
pub trait ScenePredictor {
    fn predict(
        &self,
        obs: &ObservationHistory,
        map: &LaneGraph,
        command: Option<&RouteCommand>,
        horizon: usize,
    ) -> Result<ScenePrediction, PredictError>;

    /// Prediction step period, s.
    fn dt(&self) -> f64;
}

// ============================================================================
// Intention enumeration
// ============================================================================

/// Picks the default ego route when no command is given: prefer a straight
/// candidate, then lexicographic lane order.
pub fn default_ego_route(
    obs: &ObservationHistory,
    map: &LaneGraph,
    max_len: f64,
) -> Result<RouteCommand, PredictError> {
    let ego = obs.ego();
    let cur = *ego.states.last().expect("validated history");
    let mut routes = candidate_routes(map, cur.pos(), cur.heading, max_len).map_err(|e| {
        match e {
            WorldError::NoLane { .. } => PredictError::NoRoute { id: ego.id.clone() },
            other => PredictError::World(other),
        }
    })?;
    routes.sort_by_key(|r| (classify_route(map, r) != TurnClass::Straight, r.lanes.clone()));
    Ok(routes.into_iter().next().expect("candidate_routes returns at least one"))
}

/// Enumerates joint intention hypotheses with the default ego route and the
/// full mode vocabulary, ranked by prior and truncated to `cfg.k`.
pub fn enumerate_intentions(
    obs: &ObservationHistory,
    map: &LaneGraph,
    cfg: &PredictorConfig,
) -> Result<Vec<IntentionHypothesis>, PredictError> {
    let ego_route = default_ego_route(obs, map, cfg.route_max_len)?;
    enumerate_intentions_with(obs, map, cfg, &ego_route, &ALL_MODES)
}

/// Enumeration core with an explicit ego route and a restricted mode
/// vocabulary for the agents.
pub fn enumerate_intentions_with(
    obs: &ObservationHistory,
    map: &LaneGraph,
    cfg: &PredictorConfig,
    ego_route: &RouteCommand,
    agent_modes: &[LongitudinalMode],
) -> Result<Vec<IntentionHypothesis>, PredictError> {
    let ego_pl = ego_route.polyline(map);

    // Per-agent option lists: candidate routes x modes, with cached
    // polylines for the consistency filter.
    let mut per_agent: Vec<(AgentId, Vec<RouteOption>)> = Vec::new();
    for track in obs.agents_sorted() {
        let cur = *track.states.last().expect("validated history");
        let routes =
            candidate_routes(map, cur.pos(), cur.heading, cfg.route_max_len).map_err(|e| {
                match e {
                    WorldError::NoLane { .. } => PredictError::NoRoute { id: track.id.clone() },
                    other => PredictError::World(other),
                }
            })?;
        let mut opts = Vec::new();
        for route in routes {
            let pl = route.polyline(map);
            for &mode in agent_modes {
                opts.push(RouteOption {
                    route: route.clone(),
                    pl: pl.clone(),
                    mode,
                });
            }
        }
        per_agent.push((track.id.clone(), opts));
    }

    // The ego only has a longitudinal choice to make where its route crosses
    // somebody; otherwise a single maintain decision stands in.
    let ego_interacts = per_agent.iter().any(|(_, opts)| {
        opts.iter()
            .any(|o| crossing_contact(&ego_pl, &o.pl).is_some())
    });
    let ego_modes: &[LongitudinalMode] = if ego_interacts {
        &ALL_MODES
    } else {
        &[LongitudinalMode::Maintain]
    };

    // Cartesian product over ego mode and per-agent options.
    let mut hyps: Vec<IntentionHypothesis> = Vec::new();
    let mut picks = vec![0usize; per_agent.len()];
    for &ego_mode in ego_modes {
        picks.iter_mut().for_each(|p| *p = 0);
        'product: loop {
            let combo: Vec<(&AgentId, &RouteOption)> = per_agent
                .iter()
                .zip(&picks)
                .map(|((id, opts), &p)| (id, &opts[p]))
                .collect();

            if jointly_consistent(&combo) {
                let asserts = combo
                    .iter()
                    .filter(|(_, o)| o.mode == LongitudinalMode::Assert)
                    .count()
                    + usize::from(ego_mode == LongitudinalMode::Assert);
                hyps.push(IntentionHypothesis {
                    ego_route: ego_route.clone(),
                    ego_mode,
                    agents: combo
                        .iter()
                        .map(|(id, o)| AgentIntention {
                            id: (*id).clone(),
                            route: o.route.clone(),
                            mode: o.mode,
                        })
                        .collect(),
                    prior: 0.6f64.powi(asserts as i32),
                });
            }

            // Odometer increment over the option lists; with no agents this
            // still emits exactly one (empty) combo per ego mode.
            let mut axis = picks.len();
            loop {
                if axis == 0 {
                    break 'product;
                }
                axis -= 1;
                picks[axis] += 1;
                if picks[axis] < per_agent[axis].1.len() {
                    break;
                }
                picks[axis] = 0;
            }
        }
    }

    // Rank by prior; stable sort keeps enumeration order among ties.
    hyps.sort_by(|a, b| b.prior.partial_cmp(&a.prior).unwrap());
    interleave_ego_ties(&mut hyps);
    hyps.truncate(cfg.k);
    Ok(hyps)
}

/// Spreads equal-prior runs across the ego's own modes before truncation.
///
/// Priors are shared by every hypothesis with the same assert count, so a
/// crowded scene produces flat blocks larger than `k`. Cutting such a block
/// in plain enumeration order keeps whichever ego mode enumerates first and
/// starves the survivor set of the one axis the downstream planner branches
/// on. Round-robin over the ego-mode buckets keeps the cut fair; order
/// within a bucket still follows enumeration, so scenes whose blocks fit
/// inside `k` come out unchanged.
fn interleave_ego_ties(hyps: &mut [IntentionHypothesis]) {
    let mut start = 0;
    while start < hyps.len() {
        let mut end = start + 1;
        while end < hyps.len() && hyps[end].prior == hyps[start].prior {
            end += 1;
        }
        let run = &mut hyps[start..end];
        let mut buckets: Vec<Vec<IntentionHypothesis>> = ALL_MODES
            .iter()
            .map(|&m| run.iter().filter(|h| h.ego_mode == m).cloned().collect())
            .collect();
        let mut slot = 0;
        while buckets.iter().any(|b| !b.is_empty()) {
            for bucket in &mut buckets {
                if !bucket.is_empty() {
                    run[slot] = bucket.remove(0);
                    slot += 1;
                }
            }
        }
        start = end;
    }
}

/// One choice available to an agent: a route with a longitudinal mode.
struct RouteOption {
    route: RouteCommand,
    pl: Polyline,
    mode: LongitudinalMode,
}

/// Two agents cannot both assert through a shared crossing conflict.
fn jointly_consistent(combo: &[(&AgentId, &RouteOption)]) -> bool {
    for i in 0..combo.len() {
        for j in (i + 1)..combo.len() {
            let (a, b) = (combo[i].1, combo[j].1);
            if a.mode == LongitudinalMode::Assert
                && b.mode == LongitudinalMode::Assert
                && crossing_contact(&a.pl, &b.pl).is_some()
            {
                return false;
            }
        }
    }
    true
}

/// First contact between two route polylines, classified as a crossing (as
/// opposed to car-following overlap) by tangent misalignment.
fn crossing_contact(a: &Polyline, b: &Polyline) -> Option<(f64, f64)> {
    let (sa, sb) = first_contact(a, b, CONFLICT_RADIUS, 0.5)?;
    let misalign = wrap_angle(a.tangent_at(sa) - b.tangent_at(sb)).abs();
    (misalign > CROSSING_ANGLE).then_some((sa, sb))
}

// ============================================================================
// Joint rollout
// ============================================================================

struct Mover {
    id: AgentId,
    route: RouteCommand,
    pl: Polyline,
    mode: LongitudinalMode,
    pos: Point2<f64>,
    heading: f64,
    v: f64,
    /// Progress along the route, m.
    s: f64,
}

struct PairConflict {
    a: usize,
    b: usize,
    s_a: f64,
    s_b: f64,
}

impl PairConflict {
    fn resolved(&self, movers: &[Mover]) -> bool {
        movers[self.a].s > self.s_a + PASS_CLEAR || movers[self.b].s > self.s_b + PASS_CLEAR
    }

    /// Conflict arclength on `idx`'s route, if `idx` participates.
    fn s_for(&self, idx: usize) -> Option<f64> {
        if idx == self.a {
            Some(self.s_a)
        } else if idx == self.b {
            Some(self.s_b)
        } else {
            None
        }
    }
}

/// Whether mover `i` currently sits in the approach window of any unresolved
/// crossing conflict: closer than `APPROACH_WINDOW` before the conflict point
/// and not yet `PASS_CLEAR` past it.
fn in_approach_window(i: usize, movers: &[Mover], conflicts: &[PairConflict]) -> bool {
    conflicts
        .iter()
        .filter(|c| !c.resolved(movers))
        .filter_map(|c| c.s_for(i))
        .any(|sc| {
            let ahead = sc - movers[i].s;
            ahead < APPROACH_WINDOW && ahead > -PASS_CLEAR
        })
}

/// Rolls one hypothesis out jointly over `horizon` steps and wraps the means
/// in propagated Gaussians. Entity order: ego first, then agents by id.
fn rollout(
    hyp: &IntentionHypothesis,
    obs: &ObservationHistory,
    map: &LaneGraph,
    cfg: &PredictorConfig,
    horizon: usize,
) -> Vec<EntityTrajectory> {
    let mut movers: Vec<Mover> = Vec::new();
    let ego = obs.ego();
    let ecur = *ego.states.last().expect("validated history");
    let ego_pl = hyp.ego_route.polyline(map);
    let s0 = ego_pl.project(ecur.pos()).arclength;
    movers.push(Mover {
        id: ego.id.clone(),
        route: hyp.ego_route.clone(),
        pl: ego_pl,
        mode: hyp.ego_mode,
        pos: ecur.pos(),
        heading: ecur.heading,
        v: ecur.speed,
        s: s0,
    });
    for intent in &hyp.agents {
        let track = obs
            .agents
            .iter()
            .find(|t| t.id == intent.id)
            .expect("hypothesis agents come from the history");
        let cur = *track.states.last().expect("validated history");
        let pl = intent.route.polyline(map);
        let s0 = pl.project(cur.pos()).arclength;
        movers.push(Mover {
            id: intent.id.clone(),
            route: intent.route.clone(),
            pl,
            mode: intent.mode,
            pos: cur.pos(),
            heading: cur.heading,
            v: cur.speed,
            s: s0,
        });
    }

    // Crossing conflicts between every mover pair, fixed for the rollout.
    let mut conflicts: Vec<PairConflict> = Vec::new();
    for i in 0..movers.len() {
        for j in (i + 1)..movers.len() {
            if let Some((s_a, s_b)) = crossing_contact(&movers[i].pl, &movers[j].pl) {
                conflicts.push(PairConflict {
                    a: i,
                    b: j,
                    s_a,
                    s_b,
                });
            }
        }
    }

    let dt = cfg.dt;
    let mut trajs: Vec<EntityTrajectory> = movers
        .iter()
        .map(|m| EntityTrajectory {
            id: m.id.clone(),
            steps: Vec::with_capacity(horizon),
        })
        .collect();
    let mut covs: Vec<Matrix2<f64>> = vec![Matrix2::zeros(); movers.len()];

    // Decision-burst bookkeeping. A burst fires when a mover transitions
    // into an approach window during the rollout; seeding `inside_prev`
    // from the initial state means a rollout that starts inside a window
    // (e.g. the re-prediction right after a branch) does not burst again.
    let mut inside_prev: Vec<bool> = (0..movers.len())
        .map(|i| in_approach_window(i, &movers, &conflicts))
        .collect();
    let mut burst_left: Vec<usize> = vec![0; movers.len()];

    for _ in 0..horizon {
        // Decide controls synchronously from the current joint state.
        let mut controls: Vec<(f64, f64)> = Vec::with_capacity(movers.len());
        let mut sigmas: Vec<f64> = Vec::with_capacity(movers.len());
        for i in 0..movers.len() {
            let m = &movers[i];
            let limit = m.route.speed_limit_at(map, m.s);

            // Nearest unresolved crossing conflict ahead of this mover.
            let pending: Option<f64> = conflicts
                .iter()
                .filter(|c| !c.resolved(&movers))
                .filter_map(|c| c.s_for(i))
                .filter(|&sc| m.s < sc + PASS_CLEAR)
                .fold(None, |acc, sc| Some(acc.map_or(sc, |a: f64| a.min(sc))));

            let mut a = match (m.mode, pending) {
                (LongitudinalMode::Yield, Some(sc)) => brake_to_stop(m.v, sc - STOP_MARGIN - m.s),
                (LongitudinalMode::Assert, _) | (LongitudinalMode::Yield, None) => {
                    speed_up(m.v, limit, cfg.assert_accel, dt)
                }
                (LongitudinalMode::Maintain, _) => hold_speed(m.v, limit),
            };

            // Gap capping behind a leader on this mover's corridor.
            if let Some(gap) = leader_gap(i, &movers) {
                if gap < cfg.min_gap + m.v * cfg.time_headway {
                    a = a.min(-cfg.yield_decel);
                }
                if gap < 0.5 * cfg.min_gap {
                    a = a.min(-6.0);
                }
            }

            let kappa = pure_pursuit(m);
            controls.push((a.clamp(-6.0, 3.0), kappa));

            // Interaction burst: entering the approach window of an
            // unresolved conflict fires `BURST_STEPS` of boosted noise.
            let inside_now = in_approach_window(i, &movers, &conflicts);
            if inside_now && !inside_prev[i] {
                burst_left[i] = BURST_STEPS;
            }
            inside_prev[i] = inside_now;
            sigmas.push(if burst_left[i] > 0 {
                burst_left[i] -= 1;
                cfg.sigma_a * cfg.sigma_boost
            } else {
                cfg.sigma_a
            });
        }

        // Advance everyone with the decided controls.
        for (i, m) in movers.iter_mut().enumerate() {
            let (a, kappa) = controls[i];
            let prev = m.pos;
            let v_new = (m.v + a * dt).max(0.0);
            m.pos += heading_vec(m.heading) * (m.v * dt);
            m.heading = wrap_angle(m.heading + m.v * kappa * dt);
            m.v = v_new;
            m.s = m.pl.project(m.pos).arclength;

            // Publish the step as a linear-Gaussian propagation of the
            // previous step: the action mean is the realized displacement
            // rate, the action covariance the (possibly boosted) noise.
            let action = Gaussian2::new(
                (m.pos - prev) / dt,
                Matrix2::identity() * sigmas[i] * sigmas[i],
            );
            let prev_g = Gaussian2::new(prev.coords, covs[i]);
            let next_g = prev_g.propagate(&action, dt);
            covs[i] = next_g.cov_mat();
            trajs[i].steps.push(next_g);
        }
    }
    trajs
}

/// Deceleration profile toward a stop `dist` meters ahead; coasts until
/// braking is actually needed, holds position once essentially stopped.
fn brake_to_stop(v: f64, dist: f64) -> f64 {
    if v < 0.05 {
        return 0.0;
    }
    if dist <= 0.1 {
        return -6.0;
    }
    let needed = -v * v / (2.0 * dist);
    if needed <= -0.3 {
        needed.max(-6.0)
    } else {
        0.0
    }
}

fn speed_up(v: f64, limit: f64, accel: f64, dt: f64) -> f64 {
    if v < limit {
        accel.min((limit - v) / dt)
    } else {
        hold_speed(v, limit)
    }
}

fn hold_speed(v: f64, limit: f64) -> f64 {
    if v > limit {
        ((limit - v) * 1.0).max(-2.0)
    } else {
        0.0
    }
}

/// Distance (bumper gap along the route) to the nearest leader in this
/// mover's corridor, if any.
fn leader_gap(i: usize, movers: &[Mover]) -> Option<f64> {
    let m = &movers[i];
    let mut best: Option<f64> = None;
    for (j, other) in movers.iter().enumerate() {
        if j == i {
            continue;
        }
        let pr = m.pl.project(other.pos);
        if pr.distance > 1.5 {
            continue;
        }
        let ds = pr.arclength - m.s;
        if !(0.0..=40.0).contains(&ds) {
            continue;
        }
        if wrap_angle(other.heading - pr.tangent).abs() > std::f64::consts::FRAC_PI_2 {
            continue;
        }
        best = Some(best.map_or(ds, |b: f64| b.min(ds)));
    }
    best
}

/// Curvature command steering toward a lookahead point on the route.
fn pure_pursuit(m: &Mover) -> f64 {
    let lookahead = (0.8 * m.v).max(3.0);
    let target = m.pl.point_at(m.s + lookahead);
    let to_target = target - m.pos;
    if to_target.norm() < 1e-6 {
        return 0.0;
    }
    let alpha = wrap_angle(to_target.y.atan2(to_target.x) - m.heading);
    (2.0 * alpha.sin() / lookahead).clamp(-0.4, 0.4)
}

// ============================================================================
// The intention-mixture predictor
// ============================================================================

#[derive(Debug, Clone, Default)]
pub struct IntentionMixturePredictor {
    pub cfg: PredictorConfig,
}

impl IntentionMixturePredictor {
    pub fn new(cfg: PredictorConfig) -> Self {
        Self { cfg }
    }
}

impl ScenePredictor for IntentionMixturePredictor {
    fn predict(
        &self,
        obs: &ObservationHistory,
        map: &LaneGraph,
        command: Option<&RouteCommand>,
        horizon: usize,
    ) -> Result<ScenePrediction, PredictError> {
        let cfg = &self.cfg;
        let ego_route = match command {
            Some(r) => r.clone(),
            None => default_ego_route(obs, map, cfg.route_max_len)?,
        };
        let hyps = enumerate_intentions_with(obs, map, cfg, &ego_route, &ALL_MODES)?;

        // Pad to exactly K by round-robin duplication, splitting each
        // hypothesis' prior across its copies.
        let mut copies = vec![0usize; hyps.len()];
        for i in 0..cfg.k {
            copies[i % hyps.len()] += 1;
        }
        let mut scenarios = Vec::with_capacity(cfg.k);
        for i in 0..cfg.k {
            let h = &hyps[i % hyps.len()];
            let entities = rollout(h, obs, map, cfg, horizon);
            scenarios.push(Scenario {
                weight: h.prior / copies[i % hyps.len()] as f64,
                entities,
            });
        }
        let mut pred = ScenePrediction {
            dt: cfg.dt,
            scenarios,
        };
        pred.normalize();
        Ok(pred)
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }
}

/// Spec-level convenience: predict with the configured horizon.
pub fn predict_scene(
    obs: &ObservationHistory,
    map: &LaneGraph,
    command: Option<&RouteCommand>,
    cfg: &PredictorConfig,
) -> Result<ScenePrediction, PredictError> {
    IntentionMixturePredictor::new(cfg.clone()).predict(obs, map, command, cfg.horizon)
}

// ============================================================================
// Constant-velocity baseline predictor
// ============================================================================

/// Single-scenario constant-velocity extrapolation: agents keep their
/// heading and speed; the ego follows its route at its current speed.
#[derive(Debug, Clone, Default)]
pub struct ConstantVelocityPredictor {
    pub cfg: PredictorConfig,
}

impl ConstantVelocityPredictor {
    pub fn new(cfg: PredictorConfig) -> Self {
        Self { cfg }
    }
}

impl ScenePredictor for ConstantVelocityPredictor {
    fn predict(
        &self,
        obs: &ObservationHistory,
        map: &LaneGraph,
        command: Option<&RouteCommand>,
        horizon: usize,
    ) -> Result<ScenePrediction, PredictError> {
        let cfg = &self.cfg;
        let ego_route = match command {
            Some(r) => r.clone(),
            None => default_ego_route(obs, map, cfg.route_max_len)?,
        };
        let hyp = IntentionHypothesis {
            ego_route,
            ego_mode: LongitudinalMode::Maintain,
            agents: Vec::new(),
            prior: 1.0,
        };
        // Ego via the route-following rollout (no agents in the hypothesis,
        // so nothing interacts)...
        let mut entities = rollout(&hyp, obs, map, cfg, horizon);
        // ...agents by straight-line extrapolation.
        let dt = cfg.dt;
        let noise = Matrix2::identity() * cfg.sigma_a * cfg.sigma_a;
        for track in obs.agents_sorted() {
            let cur = *track.states.last().expect("validated history");
            let vel: Vector2<f64> = heading_vec(cur.heading) * cur.speed;
            let mut g = Gaussian2::point(cur.pos());
            let action = Gaussian2::new(vel, noise);
            let mut steps = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                g = g.propagate(&action, dt);
                steps.push(g);
            }
            entities.push(EntityTrajectory {
                id: track.id.clone(),
                steps,
            });
        }
        Ok(ScenePrediction {
            dt,
            scenarios: vec![Scenario {
                weight: 1.0,
                entities,
            }],
        })
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }
}
