//! `--config` file schema. Every key is optional; command-line flags win.
//!
//! ```toml
//! seed = 7
//! server = "http://127.0.0.1:7878"
//!
//! [budget]
//! budget = 1600
//! cameras = 4
//! epsilon = 0.1
//!
//! [plan]
//! max_latest = 1000
//! curves = [100, 500]
//!
//! [simulate]
//! t_max = 300
//! strategies = ["bats", "uniform", "linear"]
//! text_tokens = 0
//! embed_dim = 64
//! pe_dim = 64
//!
//! [organize]
//! features = "refs"
//! embed_dim = 64
//! pe_dim = 64
//! tvi_seed = 0
//!
//! [eval]
//! success_distance = 3.0
//! l2_horizons = [1, 3, 5, 7]
//! ```

use std::path::Path;

use serde::Deserialize;

use navtoken_core::sim::Strategy;
use navtoken_core::wire::FeatureSourceKind;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub server: Option<String>,
    pub budget: BudgetSection,
    pub plan: PlanSection,
    pub simulate: SimulateSection,
    pub organize: OrganizeSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub budget: Option<u64>,
    pub cameras: Option<u32>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSection {
    pub max_latest: Option<u32>,
    pub curves: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub t_max: Option<u32>,
    pub strategies: Vec<Strategy>,
    pub text_tokens: Option<usize>,
    pub embed_dim: Option<usize>,
    pub pe_dim: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrganizeSection {
    pub features: Option<FeatureSourceKind>,
    pub embed_dim: Option<usize>,
    pub pe_dim: Option<usize>,
    pub tvi_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub success_distance: Option<f64>,
    pub l2_horizons: Option<Vec<usize>>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let doc: String = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start().to_string() + "\n")
            .collect();
        let cfg = Config::parse(&doc).unwrap();
        assert_eq!(cfg.budget.budget, Some(1600));
        assert_eq!(cfg.simulate.strategies, vec![Strategy::Bats, Strategy::Uniform, Strategy::Linear]);
        assert_eq!(cfg.organize.features, Some(FeatureSourceKind::Refs));
        assert_eq!(cfg.plan.curves, vec![100, 500]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::parse("[budget]\nbudgte = 3").is_err());
        assert!(Config::parse("seed = \"x\"").is_err());
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }
}
