//! Experiment configuration: a single JSON document with every knob the
//! driver exposes. All defaults live here, not in the algorithm crates, so a
//! resolved config echoed into a result bundle re-runs to the same numbers.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use slq_core::vi_engine::{EpsSchedule, TrustSetFamily, ViConfig};
use slq_core::{
    CollectOptions, OracleOptions, Result, Scheme, SimConfig, SlqError, SlqModel, SymMatrix,
};

pub const SCHEMA_VERSION: u32 = 1;

/// bundled example configs reachable as `builtin:<name>`
pub const BUILTIN_CONFIGS: &[(&str, &str)] = &[
    (
        "reference_example",
        include_str!("../configs/reference_example.json"),
    ),
    ("scalar_smoke", include_str!("../configs/scalar_smoke.json")),
];

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    ModelBased,
    ModelFree,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
}

/// the model is given inline or loaded from a separate JSON file holding the
/// same fields; `resolve` inlines file sources so echoed configs are
/// self-contained
#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(untagged)]
pub enum ModelSource {
    File { file: PathBuf },
    Inline(ModelSpec),
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(untagged)]
pub enum P0Spec {
    Named(String),
    ScaledIdentity { scaled_identity: f64 },
    Matrix { matrix: Vec<Vec<f64>> },
}

impl Default for P0Spec {
    fn default() -> Self {
        P0Spec::Named("identity".into())
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            dt: 1e-3,
            paths: 10_000,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct CollectionSection {
    pub intervals: usize,
    pub interval_length: f64,
    pub rank_tol: f64,
}

impl Default for CollectionSection {
    fn default() -> Self {
        CollectionSection {
            intervals: 20,
            interval_length: 0.1,
            rank_tol: 1e-8,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            a: 1.0,
            b: 0.0,
            gamma: 0.7,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrustSection {
    /// base radius; when absent it resolves to 10 * (1 + |Q|_F)
    pub r0: Option<f64>,
    pub growth: Option<f64>,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct ViSection {
    pub p0: P0Spec,
    pub schedule: ScheduleSection,
    pub trust: TrustSection,
    pub stop_tol: f64,
    pub max_iter: usize,
}

impl Default for ViSection {
    fn default() -> Self {
        ViSection {
            p0: P0Spec::default(),
            schedule: ScheduleSection::default(),
            trust: TrustSection::default(),
            stop_tol: 1e-5,
            max_iter: 100_000,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub t_end: f64,
    pub residual_tol: f64,
    pub step_tol: f64,
    pub h0: f64,
    pub max_steps: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            t_end: 200.0,
            residual_tol: 1e-10,
            step_tol: 1e-11,
            h0: 1e-3,
            max_steps: 2_000_000,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// which artifacts to write; subset of {"json", "csv"}
    pub formats: Vec<String>,
    pub ensemble_csv: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("out"),
            formats: vec!["json".into(), "csv".into()],
            ensemble_csv: false,
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub model: ModelSource,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub collection: CollectionSection,
    #[serde(default)]
    pub vi: ViSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn invalid(msg: String) -> SlqError {
    SlqError::InvalidConfig(msg)
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(invalid(format!("{what} must be a non-empty matrix")));
    }
    let c = rows[0].len();
    if rows.iter().any(|r| r.len() != c) {
        return Err(invalid(format!("{what} has ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), c, &flat))
}

impl ModelSpec {
    pub fn build(&self) -> Result<SlqModel<f64>> {
        SlqModel::new(
            to_matrix(&self.a, "model.a")?,
            to_matrix(&self.b, "model.b")?,
            to_matrix(&self.c, "model.c")?,
            to_matrix(&self.d, "model.d")?,
            to_matrix(&self.q, "model.q")?,
            to_matrix(&self.r, "model.r")?,
            DVector::from_row_slice(&self.x0),
        )
    }
}

impl P0Spec {
    pub fn build(&self, n: usize) -> Result<SymMatrix<f64>> {
        match self {
            P0Spec::Named(name) if name == "identity" => Ok(SymMatrix::identity(n)),
            P0Spec::Named(name) => Err(invalid(format!(
                "unknown p0 keyword {name:?}, expected \"identity\""
            ))),
            P0Spec::ScaledIdentity { scaled_identity } => {
                Ok(SymMatrix::scaled_identity(n, *scaled_identity))
            }
            P0Spec::Matrix { matrix } => {
                let m = to_matrix(matrix, "vi.p0.matrix")?;
                SymMatrix::new(m)
            }
        }
    }
}

/// read a config from a path or from the bundled set via `builtin:<name>`
pub fn load_config(arg: &str) -> Result<ExperimentConfig> {
    let text = if let Some(name) = arg.strip_prefix("builtin:") {
        BUILTIN_CONFIGS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, body)| (*body).to_string())
            .ok_or_else(|| {
                let known: Vec<&str> = BUILTIN_CONFIGS.iter().map(|(n, _)| *n).collect();
                invalid(format!("no bundled config {name:?}; available: {known:?}"))
            })?
    } else {
        std::fs::read_to_string(arg)
            .map_err(|e| invalid(format!("cannot read config {arg:?}: {e}")))?
    };
    serde_json::from_str(&text).map_err(|e| invalid(format!("config parse error in {arg}: {e}")))
}

impl ExperimentConfig {
    /// inline file-sourced models, materialize derived defaults, and validate,
    /// so the result is self-contained and re-runs identically when echoed
    pub fn resolve(mut self) -> Result<ExperimentConfig> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version {} not supported, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if let ModelSource::File { file } = &self.model {
            let text = std::fs::read_to_string(file)
                .map_err(|e| invalid(format!("cannot read model file {file:?}: {e}")))?;
            let spec: ModelSpec = serde_json::from_str(&text)
                .map_err(|e| invalid(format!("model file {file:?}: {e}")))?;
            self.model = ModelSource::Inline(spec);
        }
        for f in &self.output.formats {
            if f != "json" && f != "csv" {
                return Err(invalid(format!(
                    "output format {f:?} not recognized, expected \"json\" or \"csv\""
                )));
            }
        }
        let model = self.build_model()?;
        if self.vi.trust.r0.is_none() {
            self.vi.trust.r0 = Some(TrustSetFamily::default_for(model.q()).r0);
        }
        if self.vi.trust.growth.is_none() {
            self.vi.trust.growth = Some(2.0);
        }
        // surface bad sections now rather than mid-run
        self.build_vi(&model)?;
        self.build_sim()?;
        if self.sim.dt <= 0.0 || self.sim.paths == 0 {
            return Err(invalid("sim needs positive dt and paths".into()));
        }
        if self.collection.intervals == 0 || self.collection.interval_length <= 0.0 {
            return Err(invalid(
                "collection needs positive intervals and interval_length".into(),
            ));
        }
        Ok(self)
    }

    pub fn build_model(&self) -> Result<SlqModel<f64>> {
        match &self.model {
            ModelSource::Inline(spec) => spec.build(),
            ModelSource::File { file } => Err(invalid(format!(
                "model file {file:?} not resolved; call resolve() first"
            ))),
        }
    }

    pub fn build_vi(&self, model: &SlqModel<f64>) -> Result<ViConfig<f64>> {
        let trust = TrustSetFamily {
            r0: self
                .vi
                .trust
                .r0
                .unwrap_or_else(|| TrustSetFamily::default_for(model.q()).r0),
            growth: self.vi.trust.growth.unwrap_or(2.0),
        };
        let mut cfg = ViConfig::new(self.vi.p0.build(model.state_dim())?, trust);
        cfg.schedule = EpsSchedule {
            a: self.vi.schedule.a,
            b: self.vi.schedule.b,
            gamma: self.vi.schedule.gamma,
        };
        cfg.stop_tol = self.vi.stop_tol;
        cfg.max_iter = self.vi.max_iter;
        Ok(cfg)
    }

    pub fn build_sim(&self) -> Result<SimConfig<f64>> {
        Ok(SimConfig {
            dt: self.sim.dt,
            paths: self.sim.paths,
            seed: self.sim.seed,
            scheme: Scheme::EulerMaruyama,
        })
    }

    pub fn build_oracle(&self) -> OracleOptions<f64> {
        OracleOptions {
            t_end: self.oracle.t_end,
            residual_tol: self.oracle.residual_tol,
            step_tol: self.oracle.step_tol,
            h0: self.oracle.h0,
            max_steps: self.oracle.max_steps,
        }
    }

    pub fn build_collect(&self) -> CollectOptions<f64> {
        CollectOptions {
            rank_tol: self.collection.rank_tol,
        }
    }

    pub fn wants(&self, format: &str) -> bool {
        self.output.formats.iter().any(|f| f == format)
    }
}
