//! Rewards for sampled structures.
//!
//! An [`Evaluator`] turns an [`EvalRequest`] into an accuracy curve plus a
//! complexity report; [`composite_reward`] folds both into the scalar the agent
//! learns from:
//!
//! ```text
//! reward = 100 * ACC_EarlyStop - mu * ln(FLOPs) - rho * ln(Density)
//! ```

mod external;
mod surrogate;

pub use external::ExternalEvaluator;
pub use surrogate::{topology_hash, StructureFeatures, SurrogateConfig, SurrogateEvaluator};

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::complexity::ComplexityReport;
use crate::graph::{build_block, build_connection_network, GraphError, Template};
use crate::nsc::NscCode;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("structure error: {0}")]
    Structure(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("remote failure: {reason}")]
    Remote { reason: String, retriable: bool },
}

impl EvalError {
    /// Whether the scheduler may retry the job on another attempt.
    pub fn is_retriable(&self) -> bool {
        matches!(self, EvalError::Timeout(_) | EvalError::Io(_) | EvalError::Remote { retriable: true, .. })
    }
}

impl From<GraphError> for EvalError {
    fn from(e: GraphError) -> Self {
        EvalError::Structure(e.to_string())
    }
}

/// The fixed block and template a connection-search structure is built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionContext {
    pub block: Vec<NscCode>,
    pub template: String,
}

/// One training job. Also the wire form of a job message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub id: u64,
    pub codes: Vec<NscCode>,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default)]
    pub seed: u64,
    /// Present for connection-search jobs; absent for blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connection: Option<ConnectionContext>,
}

fn default_epochs() -> u32 {
    12
}

impl EvalRequest {
    pub fn block(id: u64, codes: Vec<NscCode>, epochs: u32, seed: u64) -> Self {
        EvalRequest { id, codes, epochs, seed, connection: None }
    }

    pub fn check(&self) -> Result<(), EvalError> {
        if self.epochs == 0 {
            return Err(EvalError::Validation("epochs must be at least 1".into()));
        }
        self.complexity().map(|_| ())
    }

    /// Builds the structure and measures it: block complexity at the canonical
    /// input, or full-plan complexity for connection jobs.
    pub fn complexity(&self) -> Result<ComplexityReport, EvalError> {
        match &self.connection {
            None => Ok(ComplexityReport::of_block(&self.codes)?),
            Some(ctx) => {
                let template = Template::from_name(&ctx.template)?;
                let block = build_block(&ctx.block, template.base_width)?;
                let plan = build_connection_network(&self.codes, &block, &template)?;
                Ok(ComplexityReport::of_plan(&plan)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy_curve: Vec<f64>,
    pub early_stop_accuracy: f64,
    pub complexity: ComplexityReport,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl EvalResult {
    pub fn new(curve: Vec<f64>, complexity: ComplexityReport, wall_time: Duration) -> Result<Self, EvalError> {
        let last = *curve.last().ok_or_else(|| EvalError::Validation("empty accuracy curve".into()))?;
        if let Some((t, v)) = curve.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(EvalError::Validation(format!("curve value {v} at epoch {} outside [0, 1]", t + 1)));
        }
        Ok(EvalResult { accuracy_curve: curve, early_stop_accuracy: last, complexity, wall_time })
    }

    pub fn check_epochs(&self, epochs: u32) -> Result<(), EvalError> {
        if self.accuracy_curve.len() != epochs as usize {
            return Err(EvalError::Validation(format!(
                "curve has {} values for {epochs} epochs",
                self.accuracy_curve.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub mu: f64,
    pub rho: f64,
    /// Multiplier applied to accuracy in [0, 1]; 100 puts it in percent.
    pub accuracy_scale: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { mu: 1.0, rho: 8.0, accuracy_scale: 100.0 }
    }
}

impl RewardConfig {
    pub fn check(&self) -> Result<(), EvalError> {
        for (name, v) in [("mu", self.mu), ("rho", self.rho), ("accuracy_scale", self.accuracy_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EvalError::Validation(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Early-stop accuracy corrected by FLOPs and density. FLOPs below 1 (blocks
/// without convolutions) are clamped to 1.
pub fn composite_reward(result: &EvalResult, cfg: &RewardConfig) -> Result<f64, EvalError> {
    let acc = result.early_stop_accuracy;
    let density = result.complexity.density;
    if !acc.is_finite() || !density.is_finite() {
        return Err(EvalError::Numeric(format!("accuracy {acc}, density {density}")));
    }
    if density <= 0.0 {
        return Err(EvalError::Numeric(format!("density {density} must be positive")));
    }
    let flops = (result.complexity.flops as f64).max(1.0);
    let r = cfg.accuracy_scale * acc - cfg.mu * flops.ln() - cfg.rho * density.ln();
    if !r.is_finite() {
        return Err(EvalError::Numeric(format!("reward {r}")));
    }
    Ok(r)
}

/// Anything that can score a structure: the surrogate, a remote trainer, the predictor.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, request: &EvalRequest) -> Result<EvalResult, EvalError>;

    fn name(&self) -> &str;
}

impl<E: Evaluator + ?Sized> Evaluator for std::sync::Arc<E> {
    fn evaluate(&self, request: &EvalRequest) -> Result<EvalResult, EvalError> {
        (**self).evaluate(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(acc: f64, flops: u64, density: f64) -> EvalResult {
        let complexity = ComplexityReport { flops, density, params: 0, edges: 0, nodes: 0 };
        EvalResult::new(vec![0.1, acc], complexity, Duration::ZERO).unwrap()
    }

    #[test]
    fn worked_examples() {
        let cfg = RewardConfig::default();
        let r = composite_reward(&result(0.65, 403, 1.0), &cfg).unwrap();
        assert!((r - (65.0 - 403f64.ln())).abs() < 1e-9);
        assert!((r - 59.0).abs() < 0.01);
        assert!((composite_reward(&result(0.65, 1, 1.0), &cfg).unwrap() - 65.0).abs() < 1e-12);
        // identity block: zero FLOPs clamps to 1
        assert!((composite_reward(&result(0.65, 0, 1.0), &cfg).unwrap() - 65.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_each_argument() {
        let cfg = RewardConfig::default();
        let r = |a, f, d| composite_reward(&result(a, f, d), &cfg).unwrap();
        assert!(r(0.61, 1000, 1.2) > r(0.60, 1000, 1.2));
        assert!(r(0.60, 1000, 1.2) > r(0.60, 1001, 1.2));
        assert!(r(0.60, 1000, 1.2) > r(0.60, 1000, 1.3));
    }

    #[test]
    fn depends_only_on_final_point() {
        let cfg = RewardConfig::default();
        let c = ComplexityReport { flops: 5000, density: 1.1, params: 0, edges: 0, nodes: 0 };
        let a = EvalResult::new(vec![0.2, 0.4, 0.6], c, Duration::ZERO).unwrap();
        let b = EvalResult::new(vec![0.5, 0.1, 0.6], c, Duration::ZERO).unwrap();
        assert_eq!(composite_reward(&a, &cfg).unwrap(), composite_reward(&b, &cfg).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = RewardConfig::default();
        let mut bad = result(0.5, 10, 1.0);
        bad.early_stop_accuracy = f64::NAN;
        assert!(matches!(composite_reward(&bad, &cfg), Err(EvalError::Numeric(_))));
        assert!(composite_reward(&result(0.5, 10, 0.0), &cfg).is_err());
        assert!(EvalResult::new(vec![0.5, 1.2], ComplexityReport::of_block(&[]).unwrap(), Duration::ZERO).is_err());
    }

    #[test]
    fn job_wire_form() {
        let req = EvalRequest::block(7, vec![NscCode::terminal(1)], 12, 3);
        let line = serde_json::to_string(&req).unwrap();
        assert_eq!(line, r#"{"id":7,"codes":[[1,7,0,0,0]],"epochs":12,"seed":3}"#);
        assert_eq!(serde_json::from_str::<EvalRequest>(&line).unwrap(), req);
    }
}
