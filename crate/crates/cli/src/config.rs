//! Experiment configuration: one JSON document per run, assembled from the
//! experiment's defaults, an optional config file, and dot-path overrides.
//!
//! Assembly order, later layers winning:
//!
//! ```text
//! registry defaults  <-  --config FILE (deep merge)  <-  --seed / --out  <-  KEY=VALUE
//! ```
//!
//! Override keys mirror the JSON field paths, dot-separated: `seed=11`,
//! `flow.step_size=0.005`, `alphas=[0.5,1]`. Values parse as JSON first and
//! fall back to a bare string. A key that does not name an existing field is
//! an error, as is a final document that fails to deserialize.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use softpref::dynamics::FlowConfig;

/// Environment variable consulted for the default output directory.
pub const OUT_ENV: &str = "SOFTPREF_OUT";

/// Fallback output directory when the flag and [`OUT_ENV`] are both absent.
pub const OUT_FALLBACK: &str = "runs";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FlowParams {
    pub step_size: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub epsilon: f64,
    pub inits: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        let base = FlowConfig::default();
        Self {
            step_size: base.step_size,
            max_iters: base.max_iters,
            convergence_tol: base.convergence_tol,
            epsilon: base.epsilon,
            inits: base.inits,
        }
    }
}

impl FlowParams {
    pub fn to_flow_config(&self, seed: u64) -> FlowConfig {
        FlowConfig {
            step_size: self.step_size,
            max_iters: self.max_iters,
            convergence_tol: self.convergence_tol,
            epsilon: self.epsilon,
            inits: self.inits,
            seed,
            snapshot_every: 0,
        }
    }
}

/// Full knob set shared by every experiment; each experiment reads the
/// fields it needs and ignores the rest. `seed` drives sampling and inits,
/// `instance_seed` pins the drawn reward table or sequence-reward draw so
/// the instance survives a change of run seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    /// Inline reward rows; wins over `rewards_file` and the random draw.
    pub rewards: Option<Vec<Vec<f64>>>,
    /// Reward table in the text format; wins over the random draw.
    pub rewards_file: Option<PathBuf>,
    pub instance_seed: u64,
    pub responses: usize,
    pub reward_lo: f64,
    pub reward_hi: f64,
    pub alphas: Vec<f64>,
    pub gamma: f64,
    pub beta: f64,
    pub etas: Vec<f64>,
    pub set_size: usize,
    pub flow: FlowParams,
    pub trials: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub alphabet: usize,
    pub max_len: usize,
    pub refresh_period: usize,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: String::new(),
            rewards: None,
            rewards_file: None,
            instance_seed: 0,
            responses: 5,
            reward_lo: -2.0,
            reward_hi: 2.0,
            alphas: vec![1.0],
            gamma: 0.0,
            beta: 1.0,
            etas: vec![1.0],
            set_size: 2,
            flow: FlowParams::default(),
            trials: 50,
            batches: 1000,
            batch_size: 16,
            alphabet: 3,
            max_len: 4,
            refresh_period: 8,
            steps: 24,
            seed: 7,
            out: default_out(),
        }
    }
}

pub fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(OUT_FALLBACK))
}

impl ExperimentConfig {
    /// Directory all artifacts of this run land in.
    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.experiment).join(self.seed.to_string())
    }

    /// Cheap cross-field checks; the core modules re-validate everything
    /// they consume.
    pub fn validate(&self) -> Result<(), String> {
        if self.responses < 2 {
            return Err(format!("responses {} must be at least 2", self.responses));
        }
        if !(self.reward_lo < self.reward_hi) {
            return Err(format!(
                "reward range [{}, {}) is empty",
                self.reward_lo, self.reward_hi
            ));
        }
        if self.alphas.is_empty() {
            return Err("alphas must not be empty".into());
        }
        if self.etas.is_empty() {
            return Err("etas must not be empty".into());
        }
        if self.trials == 0 || self.batches == 0 || self.batch_size == 0 {
            return Err("trials, batches, and batch_size must be positive".into());
        }
        if self.steps < 2 {
            return Err(format!("steps {} must be at least 2", self.steps));
        }
        if self.refresh_period == 0 {
            return Err("refresh_period must be at least 1".into());
        }
        if let Some(rows) = &self.rewards {
            if rows.is_empty() || rows.iter().any(|r| r.len() < 2) {
                return Err("inline rewards need at least one row of at least 2 entries".into());
            }
        }
        if let Some(path) = &self.rewards_file {
            if !path.is_file() {
                return Err(format!("rewards file {} does not exist", path.display()));
            }
        }
        Ok(())
    }
}

/// Recursively folds `patch` onto `base`: objects merge key-wise, anything
/// else replaces the base value.
fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(base_map), Value::Object(patch_map)) => {
            for (key, value) in patch_map {
                match base_map.get_mut(&key) {
                    Some(slot) => deep_merge(slot, value),
                    None => {
                        base_map.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Applies one `KEY=VALUE` override to the document. The dot-separated path
/// must lead to an existing field.
fn apply_override(doc: &mut Value, entry: &str) -> Result<(), String> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| format!("override '{entry}' is not KEY=VALUE"))?;
    if path.is_empty() {
        return Err(format!("override '{entry}' has an empty key"));
    }
    let value: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let map = slot
            .as_object_mut()
            .ok_or_else(|| format!("override path '{path}' descends into a non-object"))?;
        slot = map
            .get_mut(*segment)
            .ok_or_else(|| format!("override path '{path}' has no field '{segment}'"))?;
        if i + 1 == segments.len() {
            *slot = value;
            return Ok(());
        }
    }
    unreachable!("segments is nonempty");
}

/// Assembles the final config for `experiment`. `defaults` comes from the
/// registry; the file, the two flags, and the overrides are layered on top.
pub fn build_config(
    defaults: ExperimentConfig,
    config_file: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
    overrides: &[String],
) -> Result<ExperimentConfig, String> {
    let mut doc = serde_json::to_value(&defaults).expect("config serializes");
    if let Some(path) = config_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| format!("config {} is not valid JSON: {e}", path.display()))?;
        if !patch.is_object() {
            return Err(format!(
                "config {} must be a JSON object",
                path.display()
            ));
        }
        deep_merge(&mut doc, patch);
    }
    if let Some(seed) = seed {
        deep_merge(
            &mut doc,
            serde_json::json!({ "seed": seed }),
        );
    }
    if let Some(out) = out {
        deep_merge(
            &mut doc,
            serde_json::json!({ "out": out }),
        );
    }
    for entry in overrides {
        apply_override(&mut doc, entry)?;
    }
    let config: ExperimentConfig =
        serde_json::from_value(doc).map_err(|e| format!("invalid config: {e}"))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig {
            experiment: "thm1-pairwise".into(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let config = build_config(
            base(),
            None,
            None,
            None,
            &["flow.step_size=0.005".into(), "alphas=[0.5,2]".into()],
        )
        .unwrap();
        assert_eq!(config.flow.step_size, 0.005);
        assert_eq!(config.alphas, vec![0.5, 2.0]);
    }

    #[test]
    fn seed_and_out_flags_apply() {
        let config = build_config(
            base(),
            None,
            Some(99),
            Some(Path::new("elsewhere")),
            &[],
        )
        .unwrap();
        assert_eq!(config.seed, 99);
        assert_eq!(config.out, PathBuf::from("elsewhere"));
        assert_eq!(config.run_dir(), PathBuf::from("elsewhere/thm1-pairwise/99"));
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        let err = build_config(base(), None, None, None, &["flow.speed=3".into()])
            .unwrap_err();
        assert!(err.contains("no field 'speed'"), "{err}");
    }

    #[test]
    fn malformed_override_is_rejected() {
        let err = build_config(base(), None, None, None, &["flow.step_size".into()])
            .unwrap_err();
        assert!(err.contains("not KEY=VALUE"), "{err}");
    }

    #[test]
    fn type_errors_surface_on_deserialize() {
        let err = build_config(base(), None, None, None, &["trials=-3".into()]).unwrap_err();
        assert!(err.contains("invalid config"), "{err}");
    }

    #[test]
    fn validation_rejects_empty_alpha_list() {
        let err = build_config(base(), None, None, None, &["alphas=[]".into()]).unwrap_err();
        assert!(err.contains("alphas"), "{err}");
    }

    #[test]
    fn string_values_fall_back_to_strings() {
        let config = build_config(base(), None, None, None, &["out=custom-dir".into()])
            .unwrap();
        assert_eq!(config.out, PathBuf::from("custom-dir"));
    }

    #[test]
    fn missing_rewards_file_is_rejected() {
        let err = build_config(
            base(),
            None,
            None,
            None,
            &["rewards_file=/nonexistent/rewards.txt".into()],
        )
        .unwrap_err();
        assert!(err.contains("does not exist"), "{err}");
    }
}
