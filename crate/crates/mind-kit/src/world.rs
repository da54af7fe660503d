//! Scenario, map, and agent-history data model: ingestion, validation, and
//! route enumeration over a flat lane-polyline graph.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{wrap_angle, Polyline};

/// Default lateral attachment radius for snapping a state to a lane, meters.
pub const LATERAL_ATTACH_MAX: f64 = 5.0;
/// Default route length horizon for candidate enumeration, meters.
pub const ROUTE_MAX_LEN: f64 = 80.0;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(serde_json::Error),
    #[error("schema error: {0}")]
    Schema(serde_json::Error),
    #[error("reference error: {0}")]
    Reference(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("no lane within {max:.1} m of ({x:.2}, {y:.2})")]
    NoLane { x: f64, y: f64, max: f64 },
}

// ============================================================================
// Lane graph
// ============================================================================

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LaneId(pub String);

impl std::fmt::Display for LaneId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LaneId {
    fn from(s: &str) -> Self {
        LaneId(s.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lane {
    pub id: LaneId,
    /// Centerline polyline, meters. At least two points, consecutive points
    /// non-coincident.
    pub centerline: Vec<[f64; 2]>,
    /// Speed limit along this lane, m/s.
    pub speed_limit: f64,
    #[serde(default)]
    pub successors: Vec<LaneId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<LaneId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<LaneId>,
}

impl Lane {
    pub fn polyline(&self) -> Polyline {
        Polyline::from_xy(&self.centerline).expect("validated centerline")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaneGraph {
    pub lanes: Vec<Lane>,
}

impl LaneGraph {
    pub fn lane(&self, id: &LaneId) -> Option<&Lane> {
        self.lanes.iter().find(|l| &l.id == id)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let mut seen = BTreeSet::new();
        for lane in &self.lanes {
            if !seen.insert(&lane.id) {
                return Err(WorldError::Invariant(format!("duplicate lane id {}", lane.id)));
            }
            if lane.centerline.len() < 2 {
                return Err(WorldError::Invariant(format!(
                    "lane {} has fewer than 2 centerline points",
                    lane.id
                )));
            }
            if Polyline::from_xy(&lane.centerline).is_none() {
                return Err(WorldError::Invariant(format!(
                    "lane {} has coincident consecutive centerline points",
                    lane.id
                )));
            }
            if !(lane.speed_limit > 0.0) {
                return Err(WorldError::Invariant(format!(
                    "lane {} speed limit must be positive",
                    lane.id
                )));
            }
        }
        for lane in &self.lanes {
            for s in &lane.successors {
                if self.lane(s).is_none() {
                    return Err(WorldError::Reference(format!(
                        "lane {} references unknown successor {s}",
                        lane.id
                    )));
                }
            }
            for n in lane.left.iter().chain(lane.right.iter()) {
                if self.lane(n).is_none() {
                    return Err(WorldError::Reference(format!(
                        "lane {} references unknown neighbor {n}",
                        lane.id
                    )));
                }
            }
        }
        Ok(())
    }
}

// ============================================================================
// Observation history
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Ego,
    Agent,
}

/// One observed state: position (m), heading (rad), speed (m/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl AgentState {
    pub fn pos(&self) -> Point2<f64> {
        Point2::new(self.x, self.y)
    }
}

impl From<[f64; 4]> for AgentState {
    fn from(v: [f64; 4]) -> Self {
        AgentState {
            x: v[0],
            y: v[1],
            heading: v[2],
            speed: v[3],
        }
    }
}

impl From<AgentState> for [f64; 4] {
    fn from(s: AgentState) -> Self {
        [s.x, s.y, s.heading, s.speed]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub String);

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        AgentId(s.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Track {
    pub id: AgentId,
    pub role: Role,
    /// States over the past H steps, oldest first; the last entry is the
    /// current state.
    pub states: Vec<AgentState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationHistory {
    /// Step period, seconds.
    pub dt: f64,
    pub agents: Vec<Track>,
}

impl ObservationHistory {
    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.dt > 0.0) {
            return Err(WorldError::Invariant("history dt must be positive".into()));
        }
        let egos = self.agents.iter().filter(|a| a.role == Role::Ego).count();
        if egos != 1 {
            return Err(WorldError::Invariant(format!(
                "history must contain exactly one ego, found {egos}"
            )));
        }
        let h = match self.agents.first() {
            Some(t) => t.states.len(),
            None => return Err(WorldError::Invariant("history has no tracks".into())),
        };
        if h < 1 {
            return Err(WorldError::Invariant("history window must be >= 1".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.agents {
            if t.states.len() != h {
                return Err(WorldError::Invariant(format!(
                    "track {} has {} states, expected {h}",
                    t.id,
                    t.states.len()
                )));
            }
            if !seen.insert(&t.id) {
                return Err(WorldError::Invariant(format!("duplicate agent id {}", t.id)));
            }
        }
        Ok(())
    }

    /// History window length H.
    pub fn window(&self) -> usize {
        self.agents.first().map_or(0, |t| t.states.len())
    }

    pub fn ego(&self) -> &Track {
        self.agents
            .iter()
            .find(|a| a.role == Role::Ego)
            .expect("validated history has one ego")
    }

    /// Non-ego tracks sorted by id. All per-agent tuples in the pipeline
    /// (intentions, modalities) follow this order.
    pub fn agents_sorted(&self) -> Vec<&Track> {
        let mut v: Vec<&Track> = self.agents.iter().filter(|a| a.role == Role::Agent).collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    }

    /// Count of non-ego agents.
    pub fn num_agents(&self) -> usize {
        self.agents.iter().filter(|a| a.role == Role::Agent).count()
    }
}

// ============================================================================
// Route commands
// ============================================================================

/// An intended route: an ordered lane-id sequence connected by successor
/// links.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RouteCommand {
    pub lanes: Vec<LaneId>,
}

impl RouteCommand {
    pub fn new(lanes: Vec<LaneId>) -> Self {
        Self { lanes }
    }

    pub fn validate(&self, map: &LaneGraph) -> Result<(), WorldError> {
        if self.lanes.is_empty() {
            return Err(WorldError::Invariant("route has no lanes".into()));
        }
        for id in &self.lanes {
            if map.lane(id).is_none() {
                return Err(WorldError::Reference(format!("route references unknown lane {id}")));
            }
        }
        for w in self.lanes.windows(2) {
            let lane = map.lane(&w[0]).unwrap();
            if !lane.successors.contains(&w[1]) {
                return Err(WorldError::Reference(format!(
                    "route lanes {} -> {} are not connected by a successor link",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Concatenated centerline of the route.
    pub fn polyline(&self, map: &LaneGraph) -> Polyline {
        let mut it = self.lanes.iter();
        let first = map
            .lane(it.next().expect("non-empty route"))
            .expect("validated route");
        let mut pl = first.polyline();
        for id in it {
            pl.extend_with(&map.lane(id).expect("validated route").polyline());
        }
        pl
    }

    /// Speed limit at an arclength along the route.
    pub fn speed_limit_at(&self, map: &LaneGraph, s: f64) -> f64 {
        let mut acc = 0.0;
        for id in &self.lanes {
            let lane = map.lane(id).expect("validated route");
            acc += lane.polyline().length();
            if s <= acc {
                return lane.speed_limit;
            }
        }
        map.lane(self.lanes.last().unwrap()).unwrap().speed_limit
    }
}

/// Coarse turn classification by net tangent change over a route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnClass {
    Left,
    Straight,
    Right,
}

/// Classifies a route by comparing start and end tangents. Threshold 25 deg.
pub fn classify_route(map: &LaneGraph, route: &RouteCommand) -> TurnClass {
    let pl = route.polyline(map);
    let d = wrap_angle(pl.tangent_at(pl.length()) - pl.tangent_at(0.0));
    let thresh = 25f64.to_radians();
    if d > thresh {
        TurnClass::Left
    } else if d < -thresh {
        TurnClass::Right
    } else {
        TurnClass::Straight
    }
}

// ============================================================================
// Scenario file
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySpec {
    pub agent_id: AgentId,
    pub kind: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSpec {
    pub horizon_steps: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub map: LaneGraph,
    pub history: ObservationHistory,
    pub ego_route: RouteCommand,
    #[serde(default)]
    pub policies: Vec<PolicySpec>,
    pub sim: SimSpec,
}

impl ScenarioFile {
    pub fn validate(&self) -> Result<(), WorldError> {
        self.map.validate()?;
        self.history.validate()?;
        self.ego_route.validate(&self.map)?;
        for p in &self.policies {
            if !self.history.agents.iter().any(|a| a.id == p.agent_id) {
                return Err(WorldError::Reference(format!(
                    "policy references unknown agent {}",
                    p.agent_id
                )));
            }
        }
        if self.sim.horizon_steps == 0 || !(self.sim.dt > 0.0) {
            return Err(WorldError::Invariant(
                "sim horizon_steps must be >= 1 and dt positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        crate::canon::to_canonical(self)
    }
}

/// Loads and fully validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioFile, WorldError> {
    let text = std::fs::read_to_string(path).map_err(|source| WorldError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

/// Parses and validates scenario JSON text.
pub fn parse_scenario(text: &str) -> Result<ScenarioFile, WorldError> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| {
        if matches!(
            e.classify(),
            serde_json::error::Category::Syntax | serde_json::error::Category::Eof
        ) {
            WorldError::Parse(e)
        } else {
            WorldError::Schema(e)
        }
    })?;
    file.validate()?;
    Ok(file)
}

// ============================================================================
// Route enumeration
// ============================================================================

/// Finds the lane a state attaches to: within `attach_max` laterally,
/// preferring lanes whose tangent aligns with the heading.
pub fn attach_lane<'a>(
    map: &'a LaneGraph,
    pos: Point2<f64>,
    heading: f64,
    attach_max: f64,
) -> Result<(&'a Lane, f64), WorldError> {
    let mut best: Option<(&Lane, f64, f64, bool)> = None; // lane, arclength, dist, aligned
    for lane in &map.lanes {
        let pr = lane.polyline().project(pos);
        if pr.distance > attach_max {
            continue;
        }
        let aligned = wrap_angle(pr.tangent - heading).abs() <= std::f64::consts::FRAC_PI_2;
        let better = match best {
            None => true,
            Some((_, _, bd, ba)) => (aligned && !ba) || (aligned == ba && pr.distance < bd),
        };
        if better {
            best = Some((lane, pr.arclength, pr.distance, aligned));
        }
    }
    match best {
        Some((lane, s, _, _)) => Ok((lane, s)),
        None => Err(WorldError::NoLane {
            x: pos.x,
            y: pos.y,
            max: attach_max,
        }),
    }
}

/// Enumerates candidate routes from a state: start at the attached lane,
/// follow successor links until the accumulated length reaches `max_len` or
/// a terminal lane; deduplicated, lexicographic by lane-id sequence.
pub fn candidate_routes(
    map: &LaneGraph,
    pos: Point2<f64>,
    heading: f64,
    max_len: f64,
) -> Result<Vec<RouteCommand>, WorldError> {
    let (lane, s) = attach_lane(map, pos, heading, LATERAL_ATTACH_MAX)?;
    let mut out = Vec::new();
    let first_remaining = lane.polyline().length() - s;
    walk(map, vec![lane.id.clone()], first_remaining, max_len, &mut out);
    out.sort();
    out.dedup();
    Ok(out.into_iter().map(RouteCommand::new).collect())
}

fn walk(map: &LaneGraph, chain: Vec<LaneId>, len: f64, max_len: f64, out: &mut Vec<Vec<LaneId>>) {
    let last = map.lane(chain.last().unwrap()).expect("validated graph");
    if len >= max_len || last.successors.is_empty() {
        out.push(chain);
        return;
    }
    for succ in &last.successors {
        if chain.contains(succ) {
            // Cycle: cut the route here.
            out.push(chain.clone());
            continue;
        }
        let mut next = chain.clone();
        next.push(succ.clone());
        let add = map.lane(succ).expect("validated graph").polyline().length();
        walk(map, next, len + add, max_len, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_lane(id: &str, x0: f64, x1: f64, succ: &[&str]) -> Lane {
        Lane {
            id: id.into(),
            centerline: vec![[x0, 0.0], [x1, 0.0]],
            speed_limit: 15.0,
            successors: succ.iter().map(|s| (*s).into()).collect(),
            left: None,
            right: None,
        }
    }

    #[test]
    fn minimal_scenario_parses() {
        let text = r#"{
            "map": {"lanes": [{"id": "a", "centerline": [[0,0],[50,0]], "speed_limit": 15, "successors": []}]},
            "history": {"dt": 0.1, "agents": [
                {"id": "ego", "role": "ego", "states": [[0,0,0,5],[0.5,0,0,5],[1,0,0,5],[1.5,0,0,5],[2,0,0,5],[2.5,0,0,5],[3,0,0,5],[3.5,0,0,5],[4,0,0,5],[4.5,0,0,5]]}
            ]},
            "ego_route": ["a"],
            "policies": [],
            "sim": {"horizon_steps": 50, "dt": 0.1}
        }"#;
        let f = parse_scenario(text).unwrap();
        assert_eq!(f.history.num_agents(), 0);
        assert_eq!(f.history.window(), 10);
    }

    #[test]
    fn unknown_successor_is_reference_error() {
        let text = r#"{
            "map": {"lanes": [{"id": "a", "centerline": [[0,0],[50,0]], "speed_limit": 15, "successors": ["missing"]}]},
            "history": {"dt": 0.1, "agents": [{"id": "ego", "role": "ego", "states": [[0,0,0,5]]}]},
            "ego_route": ["a"],
            "sim": {"horizon_steps": 10, "dt": 0.1}
        }"#;
        match parse_scenario(text) {
            Err(WorldError::Reference(_)) => {}
            other => panic!("expected reference error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_parse_error() {
        match parse_scenario("{ not json") {
            Err(WorldError::Parse(_)) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_schema_error() {
        match parse_scenario(r#"{"map": {"lanes": []}}"#) {
            Err(WorldError::Schema(_)) => {}
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn single_lane_single_route() {
        let map = LaneGraph {
            lanes: vec![straight_lane("a", 0.0, 100.0, &[])],
        };
        let routes = candidate_routes(&map, Point2::new(0.0, 1.0), 0.0, 80.0).unwrap();
        assert_eq!(routes.len(), 1);
        assert_eq!(routes[0].lanes, vec![LaneId::from("a")]);
    }

    #[test]
    fn fork_yields_two_routes() {
        let map = LaneGraph {
            lanes: vec![
                straight_lane("a", 0.0, 30.0, &["b", "c"]),
                Lane {
                    id: "b".into(),
                    centerline: vec![[30.0, 0.0], [90.0, 0.0]],
                    speed_limit: 15.0,
                    successors: vec![],
                    left: None,
                    right: None,
                },
                Lane {
                    id: "c".into(),
                    centerline: vec![[30.0, 0.0], [90.0, 30.0]],
                    speed_limit: 15.0,
                    successors: vec![],
                    left: None,
                    right: None,
                },
            ],
        };
        let routes = candidate_routes(&map, Point2::new(0.0, 0.0), 0.0, 80.0).unwrap();
        assert_eq!(routes.len(), 2);
        // Lexicographic by lane ids.
        assert_eq!(routes[0].lanes, vec![LaneId::from("a"), LaneId::from("b")]);
        assert_eq!(routes[1].lanes, vec![LaneId::from("a"), LaneId::from("c")]);
    }

    #[test]
    fn far_from_all_lanes_is_no_lane_error() {
        let map = LaneGraph {
            lanes: vec![straight_lane("a", 0.0, 100.0, &[])],
        };
        match candidate_routes(&map, Point2::new(0.0, 50.0), 0.0, 80.0) {
            Err(WorldError::NoLane { .. }) => {}
            other => panic!("expected no-lane error, got {other:?}"),
        }
    }

    #[test]
    fn routes_connected_by_successor_links() {
        let map = LaneGraph {
            lanes: vec![
                straight_lane("a", 0.0, 30.0, &["b"]),
                straight_lane("b", 30.0, 60.0, &["c"]),
                straight_lane("c", 60.0, 90.0, &[]),
            ],
        };
        let routes = candidate_routes(&map, Point2::new(5.0, 0.0), 0.0, 80.0).unwrap();
        for r in &routes {
            r.validate(&map).unwrap();
        }
        assert_eq!(routes[0].lanes.len(), 3);
    }
}
