//! Layered run configuration: hard-coded defaults, overridden by a JSON
//! config file, overridden by CLI flags. The merged result is echoed into
//! every output artifact so runs are reproducible from their outputs alone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config invariant violated: {0}")]
    Invariant(String),
}

/// Scenario-tree construction parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AimeConfig {
    /// Uncertainty-rate tolerance that triggers branching, m/step.
    pub beta: f64,
    /// Homotopy quantization width, rad.
    pub delta: f64,
    /// Maximum branch depth.
    pub d_max: usize,
    /// Scenarios below this weight are pruned.
    pub alpha_min: f64,
    /// Scenarios whose ego mean strays further than this from the commanded
    /// route are pruned, m.
    pub route_dev_max: f64,
    /// Minimum segment length in steps.
    pub t_min: usize,
}

impl Default for AimeConfig {
    fn default() -> Self {
        AimeConfig {
            beta: 0.15,
            delta: std::f64::consts::PI,
            d_max: 3,
            alpha_min: 0.05,
            route_dev_max: 3.0,
            t_min: 5,
        }
    }
}

impl AimeConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.beta > 0.0) {
            return Err(ConfigError::Invariant("aime.beta must be > 0".into()));
        }
        if !(self.delta > 0.0) {
            return Err(ConfigError::Invariant("aime.delta must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.alpha_min) {
            return Err(ConfigError::Invariant("aime.alpha_min must be in [0, 1)".into()));
        }
        if self.t_min < 1 {
            return Err(ConfigError::Invariant("aime.t_min must be >= 1".into()));
        }
        Ok(())
    }
}

/// Analytic intention-mixture predictor parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    /// Mixture component count K.
    pub k: usize,
    /// Prediction horizon, steps.
    pub horizon: usize,
    /// Step period, s.
    pub dt: f64,
    /// Per-axis action noise, m/s².
    pub sigma_a: f64,
    /// Noise multiplier while an entity approaches an unresolved conflict;
    /// interaction is where predictions genuinely diverge, so uncertainty
    /// grows faster there.
    pub sigma_boost: f64,
    /// Deceleration magnitude of a yielding entity, m/s².
    pub yield_decel: f64,
    /// Acceleration magnitude of an asserting entity, m/s².
    pub assert_accel: f64,
    /// Time headway kept behind a leading entity in the same corridor, s.
    pub time_headway: f64,
    /// Minimum gap kept behind a leading entity, m.
    pub min_gap: f64,
    /// Route enumeration length horizon, m.
    pub route_max_len: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            k: 6,
            horizon: 60,
            dt: 0.1,
            sigma_a: 0.4,
            sigma_boost: 10.0,
            yield_decel: 2.0,
            assert_accel: 1.5,
            time_headway: 1.5,
            min_gap: 4.0,
            route_max_len: 80.0,
        }
    }
}

impl PredictorConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.k < 1 {
            return Err(ConfigError::Invariant("predictor.k must be >= 1".into()));
        }
        if self.horizon < 1 {
            return Err(ConfigError::Invariant("predictor.horizon must be >= 1".into()));
        }
        if self.sigma_a < 0.0 {
            return Err(ConfigError::Invariant("predictor.sigma_a must be >= 0".into()));
        }
        if !(self.dt > 0.0) {
            return Err(ConfigError::Invariant("predictor.dt must be > 0".into()));
        }
        Ok(())
    }
}

/// Trajectory-tree optimizer parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Corridor-keeping weight (squared hinge on lateral overrun).
    pub w_safe: f64,
    /// Target speed tracking weight.
    pub w_tar: f64,
    /// Kinematic bound penalty weight.
    pub w_kin: f64,
    /// Comfort weight on acceleration.
    pub w_acc: f64,
    /// Comfort weight on curvature.
    pub w_kappa: f64,
    /// Comfort weight on per-step control differences.
    pub w_diff: f64,
    /// Decision-tracking weight γ on the squared Mahalanobis distance to the
    /// scenario's ego decision Gaussian.
    pub gamma: f64,
    /// Collision penalty gain inside the Mahalanobis bound.
    pub w_col: f64,
    /// Chance-constraint tolerance, probability in (0, 1).
    pub p: f64,
    /// Acceleration bounds, m/s².
    pub a_min: f64,
    pub a_max: f64,
    /// Curvature bound, 1/m.
    pub kappa_max: f64,
    /// Speed bounds, m/s.
    pub v_min: f64,
    pub v_max: f64,
    /// Corridor half-width around the route centerline, m.
    pub corridor_half_width: f64,
    /// Ego/agent disc footprint radius, m.
    pub footprint_radius: f64,
    /// Target speed; `null` means the route speed limit.
    pub target_speed: Option<f64>,
    /// iLQR iteration cap.
    pub max_iters: usize,
    /// Convergence tolerance on absolute cost decrease.
    pub tol: f64,
    /// Initial Levenberg regularization.
    pub reg_init: f64,
    /// Monte Carlo sample count per step for chance certification.
    pub chance_samples: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            // Heavy enough that leaving the corridor never beats braking:
            // conflicts must be resolved along the route, not around it.
            w_safe: 30.0,
            w_tar: 0.5,
            w_kin: 20.0,
            w_acc: 0.3,
            w_kappa: 3.0,
            w_diff: 0.5,
            gamma: 0.1,
            w_col: 20.0,
            p: 0.05,
            a_min: -4.0,
            a_max: 3.0,
            kappa_max: 0.3,
            v_min: 0.0,
            v_max: 20.0,
            corridor_half_width: 1.75,
            footprint_radius: 1.0,
            target_speed: None,
            max_iters: 80,
            tol: 1e-6,
            reg_init: 1e-6,
            chance_samples: 10_000,
        }
    }
}

impl PlannerConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(ConfigError::Invariant("planner.p must be in (0, 1)".into()));
        }
        for (name, w) in [
            ("w_safe", self.w_safe),
            ("w_tar", self.w_tar),
            ("w_kin", self.w_kin),
            ("w_acc", self.w_acc),
            ("w_kappa", self.w_kappa),
            ("w_diff", self.w_diff),
            ("gamma", self.gamma),
            ("w_col", self.w_col),
        ] {
            if w < 0.0 {
                return Err(ConfigError::Invariant(format!("planner.{name} must be >= 0")));
            }
        }
        if self.a_min >= self.a_max {
            return Err(ConfigError::Invariant("planner.a_min must be < a_max".into()));
        }
        if !(self.kappa_max > 0.0) {
            return Err(ConfigError::Invariant("planner.kappa_max must be > 0".into()));
        }
        Ok(())
    }
}

/// Reward weights for policy evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// Safety, efficiency, comfort weights.
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Preference exponent on scenario probability.
    pub eta: f64,
    /// Mahalanobis distance at which safety saturates.
    pub d_sat: f64,
    /// Comfort normalizers, m/s².
    pub a_max: f64,
    pub ay_max: f64,
    /// Target speed; `null` means the route speed limit.
    pub target_speed: Option<f64>,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            eta: 1.0,
            d_sat: 6.0,
            a_max: 3.0,
            ay_max: 3.0,
            target_speed: None,
        }
    }
}

impl RewardWeights {
    fn validate(&self) -> Result<(), ConfigError> {
        for (name, w) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if w < 0.0 {
                return Err(ConfigError::Invariant(format!("reward.{name} must be >= 0")));
            }
        }
        if !(self.d_sat > 0.0) {
            return Err(ConfigError::Invariant("reward.d_sat must be > 0".into()));
        }
        Ok(())
    }
}

/// Closed-loop simulation options.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    /// Disc footprint radius used for collision detection, m.
    pub disc_radius: f64,
    /// Episode ends as reached-goal when the ego is within this arclength of
    /// the route end, m.
    pub goal_margin: f64,
    /// Seed count for comparative benchmark runs.
    pub bench_seeds: usize,
    /// Node budget for the brute-force strategy.
    pub bf_node_budget: usize,
    /// Record wall-clock timings in logs (off by default: timing fields break
    /// byte-level determinism).
    pub timings: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            disc_radius: 1.0,
            goal_margin: 2.0,
            bench_seeds: 10,
            bf_node_budget: 100_000,
            timings: false,
        }
    }
}

/// Merged run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub aime: AimeConfig,
    pub predictor: PredictorConfig,
    pub planner: PlannerConfig,
    pub reward: RewardWeights,
    pub sim: SimOptions,
}

impl RunConfig {
    /// Builds a config from defaults, then an optional config-file JSON text,
    /// then an optional flag overlay (a partial JSON object mirroring the
    /// config shape). Later layers win field-by-field.
    pub fn layered(
        file_text: Option<&str>,
        flag_overlay: Option<&serde_json::Value>,
    ) -> Result<RunConfig, ConfigError> {
        let mut merged = serde_json::to_value(RunConfig::default())?;
        if let Some(text) = file_text {
            let v: serde_json::Value = serde_json::from_str(text)?;
            deep_merge(&mut merged, &v);
        }
        if let Some(v) = flag_overlay {
            deep_merge(&mut merged, v);
        }
        let cfg: RunConfig = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.aime.validate()?;
        self.predictor.validate()?;
        self.planner.validate()?;
        self.reward.validate()?;
        Ok(())
    }
}

/// Recursively merges `overlay` into `base`: objects merge key-by-key,
/// anything else replaces.
pub fn deep_merge(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn file_overrides_defaults_and_flags_override_file() {
        let file = r#"{"aime": {"beta": 0.3}, "planner": {"p": 0.01}}"#;
        let flags = serde_json::json!({"aime": {"beta": 0.2}});
        let cfg = RunConfig::layered(Some(file), Some(&flags)).unwrap();
        assert_eq!(cfg.aime.beta, 0.2);
        assert_eq!(cfg.planner.p, 0.01);
        // Untouched fields keep defaults.
        assert_eq!(cfg.aime.d_max, 3);
    }

    #[test]
    fn unknown_field_is_rejected() {
        let file = r#"{"aime": {"betta": 0.3}}"#;
        assert!(RunConfig::layered(Some(file), None).is_err());
    }

    #[test]
    fn out_of_range_value_is_rejected() {
        let file = r#"{"planner": {"p": 1.5}}"#;
        match RunConfig::layered(Some(file), None) {
            Err(ConfigError::Invariant(_)) => {}
            other => panic!("expected invariant error, got {other:?}"),
        }
    }
}
