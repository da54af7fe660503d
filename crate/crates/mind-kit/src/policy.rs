//! Reward evaluation of candidate trajectory trees and policy selection.
//!
//! Each solved trajectory tree gets a scalar quality Q: a per-step reward
//! summed over every segment and step, weighting safety margin, speed
//! tracking and ride comfort by the scenario's likelihood. The selector
//! takes the best feasible candidate and falls back to the least-violating
//! one — flagged as degraded — when the chance gate rejected everything.

use serde::{Deserialize, Serialize};

use crate::config::RewardWeights;
use crate::contingency::{Control, CostBreakdown, PlanProblem, TrajectoryTree, VehicleState};
use crate::gmm::Gaussian2;

/// Per-step reward inputs: who else is around, how likely this scenario is,
/// and how fast the ego should be going.
pub struct StepContext<'a> {
    pub agents: &'a [Gaussian2],
    /// Normalized probability of the scenario this step belongs to.
    pub scenario_prob: f64,
    pub v_target: f64,
}

/// Accumulated reward per category; Q is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub safety: f64,
    pub efficiency: f64,
    pub comfort: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.safety + self.efficiency + self.comfort
    }
}

/// Per-step reward R = λ_p (λ₁ F_s + λ₂ F_e + λ₃ F_c), with λ_p the
/// scenario probability raised to the preference exponent.
///
/// F_s is the smallest Mahalanobis distance to any agent, saturated at
/// `d_sat` (and maximal when nobody is around). F_e rewards holding the
/// target speed, F_c penalizes longitudinal and lateral acceleration
/// relative to their comfort bounds; both are clamped to [0, 1].
pub fn reward(x: &VehicleState, u: &Control, ctx: &StepContext<'_>, w: &RewardWeights) -> f64 {
    reward_terms(x, u, ctx, w).total()
}

fn reward_terms(
    x: &VehicleState,
    u: &Control,
    ctx: &StepContext<'_>,
    w: &RewardWeights,
) -> RewardTerms {
    let lambda_p = ctx.scenario_prob.max(0.0).powf(w.eta);

    let f_s = ctx
        .agents
        .iter()
        .map(|g| g.mahalanobis(x.pos()))
        .fold(w.d_sat, f64::min);

    let f_e = if ctx.v_target > 0.0 {
        (1.0 - (x.v - ctx.v_target).abs() / ctx.v_target).clamp(0.0, 1.0)
    } else {
        1.0
    };

    let lon = u.a / w.a_max;
    let lat = u.kappa * x.v * x.v / w.ay_max;
    let f_c = (1.0 - lon * lon - lat * lat).clamp(0.0, 1.0);

    RewardTerms {
        safety: lambda_p * w.lambda1 * f_s,
        efficiency: lambda_p * w.lambda2 * f_e,
        comfort: lambda_p * w.lambda3 * f_c,
    }
}

/// Q of a solved trajectory tree: the reward summed over all segments and
/// steps, with each segment's scenario probability feeding λ_p.
pub fn evaluate(traj: &TrajectoryTree, problem: &PlanProblem, w: &RewardWeights) -> f64 {
    evaluate_detailed(traj, problem, w).total()
}

/// Same sum, kept split by reward category for reporting.
pub fn evaluate_detailed(
    traj: &TrajectoryTree,
    problem: &PlanProblem,
    w: &RewardWeights,
) -> RewardTerms {
    let mut terms = RewardTerms::default();
    for (j, seg) in traj.segments.iter().enumerate() {
        for t in 0..seg.controls.len() {
            let ctx = StepContext {
                agents: &problem.raw_agents[j][t],
                scenario_prob: seg.weight,
                v_target: w.target_speed.unwrap_or(problem.v_targets[j][t]),
            };
            let r = reward_terms(&seg.states[t + 1], &seg.controls[t], &ctx, w);
            terms.safety += r.safety;
            terms.efficiency += r.efficiency;
            terms.comfort += r.comfort;
        }
    }
    terms
}

/// One scored candidate: a policy's solved plan plus its certification
/// outcome.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub policy_id: usize,
    /// Probability mass of the policy's scenarios.
    pub mass: f64,
    pub q: f64,
    /// Passed the chance gate (and converged).
    pub feasible: bool,
    /// Largest estimated per-step collision probability, for the degraded
    /// fallback ordering.
    pub violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    /// Index into the candidate slice.
    pub index: usize,
    /// No feasible candidate existed; the pick merely minimizes the
    /// estimated violation.
    pub degraded: bool,
}

/// Picks the highest-Q feasible candidate, breaking ties by higher policy
/// mass and then lower index. With no feasible candidate the selection
/// degrades to the lowest estimated chance violation instead of failing.
pub fn select(candidates: &[Candidate]) -> Selection {
    assert!(!candidates.is_empty(), "select requires at least one candidate");

    let mut feasible: Vec<(usize, &Candidate)> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.feasible)
        .collect();
    if !feasible.is_empty() {
        feasible.sort_by(|a, b| {
            b.1.q
                .partial_cmp(&a.1.q)
                .unwrap()
                .then(b.1.mass.partial_cmp(&a.1.mass).unwrap())
                .then(a.0.cmp(&b.0))
        });
        return Selection {
            index: feasible[0].0,
            degraded: false,
        };
    }

    let mut all: Vec<(usize, &Candidate)> = candidates.iter().enumerate().collect();
    all.sort_by(|a, b| {
        a.1.violation
            .partial_cmp(&b.1.violation)
            .unwrap()
            .then(b.1.mass.partial_cmp(&a.1.mass).unwrap())
            .then(a.0.cmp(&b.0))
    });
    Selection {
        index: all[0].0,
        degraded: true,
    }
}

/// Per-candidate entry of the evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateReport {
    pub policy_id: usize,
    pub q: f64,
    pub reward: RewardTerms,
    pub cost: f64,
    pub cost_breakdown: CostBreakdown,
    pub mass: f64,
    pub feasible: bool,
    pub chance_estimate: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub candidates: Vec<CandidateReport>,
    pub selected: usize,
    pub degraded: bool,
}
