//! Experiment configuration: one JSON document drives every pipeline stage.
//! Unknown keys are rejected so typos fail loudly before any work runs.

use serde::{Deserialize, Serialize};

use pegp::baselines::{AsmConfig, RotatedGpConfig};
use pegp::metrics::Method;
use pegp::sim::SimScenario;
use pegp::svgp::{ModelConfig, ModelMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Simulator {
    GodunovLwr,
    ArzRelax,
    LinearAdvection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Probe,
    Loops,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    pub penetration: f64,
    pub positions_m: Vec<f64>,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            mode: SamplingMode::Probe,
            penetration: 0.2,
            positions_m: vec![60.0, 180.0, 300.0, 420.0],
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub asm: AsmConfig,
    pub rotated_gp: RotatedGpConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { asm: AsmConfig::default(), rotated_gp: RotatedGpConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// free/congested threshold, m/s
    pub v_threshold_mps: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// label recorded in the report rows
    pub penetration_label: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            v_threshold_mps: 60.0 / 3.6,
            n_samples: 400,
            seed: 0,
            penetration_label: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub methods: Vec<Method>,
    pub penetrations: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            methods: vec![Method::Asm, Method::RotatedGp, Method::PegpLwr, Method::PegpArz],
            penetrations: vec![0.05, 0.1, 0.2, 0.3, 0.5],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: SimScenario,
    pub simulator: Simulator,
    /// probe-candidate trajectories emitted by `simulate`
    pub n_vehicles: usize,
    pub sampling: SamplingConfig,
    pub model: ModelConfig,
    pub baselines: BaselineConfig,
    pub diagnostics: DiagnosticsConfig,
    pub sweep: SweepSection,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: SimScenario::default(),
            simulator: Simulator::GodunovLwr,
            n_vehicles: 120,
            sampling: SamplingConfig::default(),
            model: ModelConfig {
                mode: ModelMode::LwrBidirectional,
                m_inducing: 32,
                iterations: 150,
                ..ModelConfig::default()
            },
            baselines: BaselineConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            sweep: SweepSection::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}
