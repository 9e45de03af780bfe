//! Resumable end-to-end pipeline with content-hashed stage artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! run_<id>/preprocess.json   margins.json   exp_data.csv
//!          deform.json       coords.csv
//!          fit-pairwise.json fit-tg.json    fit_report.csv
//!          diagnose.json     diagnostics/{pp,qq,chi_model,chi_empirical}.{csv,json}
//!          estimate-ctq.json ctq.csv
//!          simulate.json     cloud.csv (optional)
//! report.json  table1.csv  table2.csv
//! ```

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, Artifact, ArtifactHeader};
use crate::deform::{self, AnchorSpec, ChiMatrix, DeformOptions, Deformation};
use crate::diagnostics::{self, ChiDiagnostic};
use crate::error::{Error, Result};
use crate::estimate::{self, standard_ctqs, CtqDefinition, CtqEstimate, CtqOptions, MIN_BOOTSTRAP_REPS, MIN_M_SIM};
use crate::fit::{self, FittedGeometricModel, PairwiseFit, RadialSplit, TgFitOptions, TgParams};
use crate::geometry::GeometricModel;
use crate::ingest::{self, site_name, Coord, GridDataset};
use crate::marginal::{self, AicRow, DesignSpec, MarginalModel, MarginalOptions};
use crate::simulate::{self, CloudSampler, KGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Preprocess,
    Margins,
    Deform,
    FitPairwise,
    FitTg,
    Diagnose,
    EstimateCtq,
    Simulate,
    Report,
}

impl Stage {
    /// The stages of a full run, in order.
    pub const PIPELINE: [Stage; 7] = [
        Stage::Preprocess,
        Stage::Margins,
        Stage::Deform,
        Stage::FitPairwise,
        Stage::FitTg,
        Stage::Diagnose,
        Stage::EstimateCtq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Margins => "margins",
            Stage::Deform => "deform",
            Stage::FitPairwise => "fit-pairwise",
            Stage::FitTg => "fit-tg",
            Stage::Diagnose => "diagnose",
            Stage::EstimateCtq => "estimate-ctq",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }

    pub fn file_name(self) -> String {
        format!("{}.json", self.name())
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Preprocess | Stage::Report => &[],
            Stage::Margins => &[Stage::Preprocess],
            Stage::Deform => &[Stage::Margins],
            Stage::FitPairwise => &[Stage::Margins, Stage::Deform],
            Stage::FitTg => &[Stage::Margins, Stage::Deform, Stage::FitPairwise],
            Stage::Diagnose => &[Stage::Margins, Stage::Deform, Stage::FitTg],
            Stage::EstimateCtq => &[Stage::Preprocess, Stage::Margins, Stage::FitTg],
            Stage::Simulate => &[Stage::Margins, Stage::FitTg],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInput {
    pub run_id: i64,
    /// CSV export; relative paths resolve against the config file's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub runs: Vec<RunInput>,
    pub tau: f64,
    /// Quantile level for empirical and model chi.
    pub u_chi: f64,
    pub anchors: AnchorSpec,
    pub k_grid: KGrid,
    pub m_sim: usize,
    pub block_len: usize,
    pub bootstrap_reps: usize,
    pub bootstrap_m_sim: usize,
    pub ci_level: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub deformation: bool,
    pub marginal_preprocessing: bool,
    pub harmonics: usize,
    pub gpd_quantile: f64,
    pub deform_penalty: f64,
    pub deform_multistarts: usize,
    pub tg_multistarts: usize,
    pub band_reps: usize,
    /// Refit the model inside every PP/QQ band replicate.
    pub band_refit: bool,
    /// Refit the model inside every CTQ bootstrap replicate.
    pub bootstrap_refit: bool,
    pub chi_m_sim: usize,
    pub ctqs: Vec<CtqDefinition>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            runs: Vec::new(),
            tau: 0.8,
            u_chi: 0.99,
            anchors: AnchorSpec::default(),
            k_grid: KGrid::default(),
            m_sim: 1_000_000,
            block_len: 4,
            bootstrap_reps: 500,
            bootstrap_m_sim: 20_000,
            ci_level: 0.95,
            seed: 0,
            out_dir: PathBuf::from("artifacts"),
            deformation: true,
            marginal_preprocessing: true,
            harmonics: 2,
            gpd_quantile: 0.8,
            deform_penalty: 1e-3,
            deform_multistarts: 5,
            tg_multistarts: 3,
            band_reps: diagnostics::DEFAULT_BAND_REPS,
            band_refit: false,
            bootstrap_refit: false,
            chi_m_sim: 200_000,
            ctqs: standard_ctqs(),
            base_dir: PathBuf::new(),
        }
    }
}

fn in_unit_interval(v: f64) -> bool {
    v > 0.0 && v < 1.0
}

impl PipelineConfig {
    pub fn from_json_value(value: serde_json::Value, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
        Self::from_json_value(value, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.runs.is_empty() {
            return fail("config lists no runs".into());
        }
        let ids: BTreeSet<i64> = self.runs.iter().map(|r| r.run_id).collect();
        if ids.len() != self.runs.len() {
            return fail("run ids must be unique".into());
        }
        for r in &self.runs {
            let p = self.resolve(&r.path);
            if !p.is_file() {
                return fail(format!("run {}: input {} does not exist", r.run_id, p.display()));
            }
        }
        if !in_unit_interval(self.tau) {
            return fail(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !in_unit_interval(self.u_chi) {
            return fail(format!("u_chi must lie in (0, 1), got {}", self.u_chi));
        }
        if !in_unit_interval(self.ci_level) {
            return fail(format!("ci_level must lie in (0, 1), got {}", self.ci_level));
        }
        if !in_unit_interval(self.gpd_quantile) {
            return fail(format!("gpd_quantile must lie in (0, 1), got {}", self.gpd_quantile));
        }
        if self.m_sim < MIN_M_SIM {
            return fail(format!("m_sim must be >= {MIN_M_SIM}, got {}", self.m_sim));
        }
        if self.bootstrap_m_sim < MIN_M_SIM {
            return fail(format!("bootstrap_m_sim must be >= {MIN_M_SIM}, got {}", self.bootstrap_m_sim));
        }
        if self.chi_m_sim < MIN_M_SIM {
            return fail(format!("chi_m_sim must be >= {MIN_M_SIM}, got {}", self.chi_m_sim));
        }
        if self.bootstrap_reps < MIN_BOOTSTRAP_REPS {
            return fail(format!("bootstrap_reps must be >= {MIN_BOOTSTRAP_REPS}, got {}", self.bootstrap_reps));
        }
        if self.block_len < 2 {
            return fail("block_len must be >= 2".into());
        }
        let g = &self.k_grid;
        if !(g.lo >= 1.0 && g.hi >= g.lo && g.step > 0.0 && g.hi.is_finite()) {
            return fail(format!("invalid k grid {g:?}"));
        }
        if !(self.deform_penalty >= 0.0) {
            return fail("deform_penalty must be >= 0".into());
        }
        if self.anchors.stride == 0 {
            return fail("anchor stride must be >= 1".into());
        }
        for c in &self.ctqs {
            if c.m == 0 || c.run_len == 0 || !c.raw_threshold.is_finite() {
                return fail(format!("invalid target definition {}", c.name));
            }
        }
        Ok(())
    }

    /// Hash of the configuration with the output location blanked, so runs
    /// written to different directories share provenance.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(artifact::sha256_hex(&artifact::to_json_bytes(&c)?))
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed ^ stage.index()
    }
}

// ---------------------------------------------------------------------------
// stage payloads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub source: String,
    pub data_hash: String,
    pub n_times: usize,
    pub n_sites: usize,
    pub sites: Vec<Coord>,
    pub first_day: i64,
    pub last_day: i64,
    pub column_means: Vec<f64>,
    pub zero_fraction: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginsPayload {
    pub enabled: bool,
    pub model: Option<MarginalModel>,
    pub lag_aic: Vec<AicRow>,
    pub exp_data_file: String,
    pub exp_data_hash: String,
    pub n_times: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeformPayload {
    pub enabled: bool,
    pub chi: Option<ChiMatrix>,
    pub deformation: Option<Deformation>,
    pub anchors: Vec<usize>,
    pub gplane: Vec<Coord>,
    pub dplane: Vec<Coord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosePayload {
    pub n_exceedances: usize,
    pub pp_coverage: Option<f64>,
    pub qq_coverage: Option<f64>,
    pub chi: Option<ChiDiagnostic>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtqThresholds {
    pub name: String,
    pub raw_threshold: f64,
    pub exponential: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtqPayload {
    pub thresholds: Vec<CtqThresholds>,
    pub estimates: Vec<CtqEstimate>,
    pub seeds: Vec<u64>,
    pub m_sim: usize,
    pub bootstrap_reps: usize,
    pub bootstrap_m_sim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulatePayload {
    pub k: f64,
    pub m: usize,
    pub seed: u64,
    pub p_exceed: f64,
    /// Importance-weight estimate of `P(R' > k | R' > 1)`.
    pub p_k_given_1: f64,
    /// Share of points above their radial threshold.
    pub exceed_fraction: f64,
    /// Share of points with `R' > k`.
    pub above_k_fraction: f64,
    pub component_means: Vec<f64>,
    pub cloud_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub run_id: i64,
    pub lambda: f64,
    pub phi: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub c_tau: f64,
    pub loglik: f64,
    pub n_exceedances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub ctq: String,
    pub run_id: i64,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub bootstrap_mean: f64,
    pub bootstrap_median: f64,
    pub k_used: f64,
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportPayload {
    pub table1: Vec<Table1Row>,
    pub table2: Vec<Table2Row>,
}

// ---------------------------------------------------------------------------
// errors and outcomes
// ---------------------------------------------------------------------------

/// Single-start optimiser settings for refits inside bootstrap replicates;
/// each replicate starts from the full-sample optimum.
fn replicate_fit_options(seed: u64) -> TgFitOptions {
    TgFitOptions {
        multistarts: 0,
        seed,
        ..TgFitOptions::default()
    }
}

/// A failure attributed to one stage.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct StageError {
    pub stage: String,
    pub run_id: Option<i64>,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn new(stage: impl Into<String>, run_id: Option<i64>, source: Error) -> Self {
        Self {
            stage: stage.into(),
            run_id,
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.source.exit_code()
    }

    /// Machine-readable error record.
    pub fn record(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "stage": self.stage,
            "run_id": self.run_id,
            "kind": self.source.kind(),
            "exit_code": self.exit_code(),
            "message": self.source.to_string(),
        });
        match &self.source {
            Error::Fit { last_iterate, .. } => v["last_iterate"] = serde_json::json!(last_iterate),
            Error::Bootstrap { log, .. } => v["failure_log"] = serde_json::json!(log),
            Error::Dependency { stage, path } => {
                v["required_stage"] = serde_json::json!(stage);
                v["missing"] = serde_json::json!(path);
            }
            _ => {}
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageStatus {
    Computed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub run_id: Option<i64>,
    pub status: StageStatus,
    pub path: PathBuf,
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

/// Extra knobs for the standalone `simulate` stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulateRequest {
    pub k: f64,
    pub m: usize,
    pub export_cloud: bool,
}

pub struct Pipeline {
    config: PipelineConfig,
    config_hash: String,
    out_dir: PathBuf,
}

/// Everything a stage reads from the margins artifact.
struct ExpData {
    data: GridDataset,
}

impl Pipeline {
    /// Validates the configuration; no stage runs before this succeeds.
    pub fn new(config: PipelineConfig) -> std::result::Result<Self, StageError> {
        let wrap = |e| StageError::new("config", None, e);
        config.validate().map_err(wrap)?;
        let config_hash = config.hash().map_err(wrap)?;
        let out_dir = config.resolve(&config.out_dir);
        Ok(Self {
            config,
            config_hash,
            out_dir,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn run_dir(&self, run_id: i64) -> PathBuf {
        self.out_dir.join(format!("run_{run_id}"))
    }

    pub fn artifact_path(&self, run_id: i64, stage: Stage) -> PathBuf {
        self.run_dir(run_id).join(stage.file_name())
    }

    fn run_input(&self, run_id: i64) -> Result<&RunInput> {
        self.config
            .runs
            .iter()
            .find(|r| r.run_id == run_id)
            .ok_or_else(|| Error::Validation(format!("run {run_id} is not in the config")))
    }

    pub fn run_ids(&self) -> Vec<i64> {
        self.config.runs.iter().map(|r| r.run_id).collect()
    }

    /// Every stage for the selected runs (all runs when `None`).
    pub fn run_all(&self, run_id: Option<i64>) -> std::result::Result<Vec<StageOutcome>, StageError> {
        let ids = match run_id {
            Some(id) => vec![id],
            None => self.run_ids(),
        };
        let mut out = Vec::new();
        for id in ids {
            for stage in Stage::PIPELINE {
                out.push(self.run_stage(stage, id)?);
            }
        }
        Ok(out)
    }

    pub fn run_stage(&self, stage: Stage, run_id: i64) -> std::result::Result<StageOutcome, StageError> {
        let result = match stage {
            Stage::Preprocess => self.preprocess(run_id),
            Stage::Margins => self.margins(run_id),
            Stage::Deform => self.deform(run_id),
            Stage::FitPairwise => self.fit_pairwise(run_id),
            Stage::FitTg => self.fit_tg(run_id),
            Stage::Diagnose => self.diagnose(run_id),
            Stage::EstimateCtq => self.estimate_ctq(run_id),
            Stage::Simulate => Err(Error::Validation("simulate needs a request; use Pipeline::simulate".into())),
            Stage::Report => Err(Error::Validation("report spans runs; use Pipeline::report".into())),
        };
        result.map_err(|e| StageError::new(stage.name(), Some(run_id), e))
    }

    // -- plumbing ----------------------------------------------------------

    fn require(&self, run_id: i64, stage: Stage) -> Result<PathBuf> {
        let p = self.artifact_path(run_id, stage);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Dependency {
                stage: stage.name().into(),
                path: p.display().to_string(),
            })
        }
    }

    fn payload<T: DeserializeOwned>(&self, run_id: i64, stage: Stage) -> Result<T> {
        let p = self.require(run_id, stage)?;
        let art: Artifact<T> = artifact::read_json(&p)?;
        Ok(art.payload)
    }

    /// The config keys a stage reads; other keys never invalidate it.
    fn stage_config(&self, stage: Stage) -> Result<serde_json::Value> {
        let keys: &[&str] = match stage {
            Stage::Preprocess | Stage::Report => &[],
            Stage::Margins => &["marginal_preprocessing", "harmonics", "gpd_quantile"],
            Stage::Deform => &["u_chi", "anchors", "deformation", "deform_penalty", "deform_multistarts", "seed"],
            Stage::FitPairwise => &["tau"],
            Stage::FitTg => &["tau", "tg_multistarts", "seed"],
            Stage::Diagnose => &["band_reps", "band_refit", "u_chi", "chi_m_sim", "seed"],
            Stage::EstimateCtq => &[
                "ctqs",
                "k_grid",
                "m_sim",
                "block_len",
                "bootstrap_reps",
                "bootstrap_m_sim",
                "bootstrap_refit",
                "ci_level",
                "seed",
            ],
            Stage::Simulate => &["seed"],
        };
        let full = serde_json::to_value(&self.config)?;
        let picked: serde_json::Map<String, serde_json::Value> =
            keys.iter().map(|k| ((*k).to_string(), full[*k].clone())).collect();
        Ok(serde_json::Value::Object(picked))
    }

    /// Hash over the stage's config keys, the stage identity, every upstream artifact and
    /// any stage-specific extras.
    fn input_hash(&self, run_id: i64, stage: Stage, extra: &[(&str, Vec<u8>)]) -> Result<String> {
        let mut parts: Vec<(String, Vec<u8>)> = vec![
            ("stage".into(), stage.name().as_bytes().to_vec()),
            ("config".into(), artifact::to_json_bytes(&self.stage_config(stage)?)?),
            ("run".into(), run_id.to_le_bytes().to_vec()),
        ];
        for up in stage.upstream() {
            let p = self.require(run_id, *up)?;
            parts.push((up.name().into(), artifact::file_hash(&p)?.into_bytes()));
        }
        for (k, v) in extra {
            parts.push(((*k).into(), v.clone()));
        }
        Ok(artifact::combined_hash(parts.iter().map(|(k, v)| (k.as_str(), v.as_slice()))))
    }

    /// Runs `compute` unless an artifact with the same input hash exists and
    /// all its side files are present.
    fn cached<T, F>(&self, run_id: i64, stage: Stage, input_hash: String, side_files: &[&str], compute: F) -> Result<StageOutcome>
    where
        T: Serialize,
        F: FnOnce(u64, &Path) -> Result<T>,
    {
        let dir = self.run_dir(run_id);
        let path = dir.join(stage.file_name());
        if let Ok(h) = artifact::read_json::<ArtifactHeader>(&path) {
            let sides_ok = side_files.iter().all(|f| dir.join(f).is_file());
            if h.input_hash == input_hash && sides_ok {
                log::info!("run {run_id}: {stage} up to date, skipping");
                return Ok(StageOutcome {
                    stage,
                    run_id: Some(run_id),
                    status: StageStatus::Skipped,
                    path,
                });
            }
        }
        log::info!("run {run_id}: running {stage}");
        std::fs::create_dir_all(&dir)?;
        let seed = self.config.stage_seed(stage);
        let payload = compute(seed, &dir)?;
        let art = Artifact {
            stage: stage.name().to_string(),
            run_id,
            config_hash: self.config_hash.clone(),
            input_hash,
            seed,
            payload,
        };
        artifact::write_json(&path, &art)?;
        Ok(StageOutcome {
            stage,
            run_id: Some(run_id),
            status: StageStatus::Computed,
            path,
        })
    }

    fn load_raw(&self, run_id: i64) -> Result<GridDataset> {
        let input = self.run_input(run_id)?;
        let path = self.config.resolve(&input.path);
        let summary: PreprocessSummary = self.payload(run_id, Stage::Preprocess)?;
        if artifact::file_hash(&path)? != summary.data_hash {
            return Err(Error::Dependency {
                stage: Stage::Preprocess.name().into(),
                path: format!("{} changed since preprocessing", path.display()),
            });
        }
        ingest::load_dataset(&path, run_id)
    }

    fn load_exp(&self, run_id: i64) -> Result<(MarginsPayload, ExpData)> {
        let m: MarginsPayload = self.payload(run_id, Stage::Margins)?;
        let p = self.run_dir(run_id).join(&m.exp_data_file);
        let stale = || Error::Dependency {
            stage: Stage::Margins.name().into(),
            path: p.display().to_string(),
        };
        if !p.is_file() || artifact::file_hash(&p)? != m.exp_data_hash {
            return Err(stale());
        }
        let data = ingest::load_dataset(&p, run_id)?;
        Ok((m, ExpData { data }))
    }

    fn load_model(&self, run_id: i64) -> Result<(FittedGeometricModel, GeometricModel)> {
        let fitted: FittedGeometricModel = self.payload(run_id, Stage::FitTg)?;
        let model = fitted.params.compile()?;
        Ok((fitted, model))
    }

    // -- stages ------------------------------------------------------------

    fn preprocess(&self, run_id: i64) -> Result<StageOutcome> {
        let input = self.run_input(run_id)?;
        let path = self.config.resolve(&input.path);
        let data_hash = artifact::file_hash(&path)?;
        let h = self.input_hash(run_id, Stage::Preprocess, &[("data", data_hash.clone().into_bytes())])?;
        self.cached(run_id, Stage::Preprocess, h, &[], |_, _| {
            let ds = ingest::load_dataset(&path, run_id)?;
            let n = ds.n_times() as f64;
            let d = ds.n_sites();
            let mut means = vec![0.0; d];
            let mut zeros = vec![0.0; d];
            for row in ds.rows() {
                for j in 0..d {
                    means[j] += row[j] / n;
                    if row[j] == 0.0 {
                        zeros[j] += 1.0 / n;
                    }
                }
            }
            Ok(PreprocessSummary {
                source: input.path.display().to_string(),
                data_hash,
                n_times: ds.n_times(),
                n_sites: d,
                sites: ds.sites.clone(),
                first_day: *ds.times.first().ok_or_else(|| Error::Structure("no data rows".into()))?,
                last_day: *ds.times.last().unwrap_or(&0),
                column_means: means,
                zero_fraction: zeros,
            })
        })
    }

    fn margins(&self, run_id: i64) -> Result<StageOutcome> {
        let h = self.input_hash(run_id, Stage::Margins, &[])?;
        let exp_file = "exp_data.csv";
        self.cached(run_id, Stage::Margins, h, &[exp_file], |_, dir| {
            let raw = self.load_raw(run_id)?;
            let (model, lag_aic, exp) = if self.config.marginal_preprocessing {
                let options = MarginalOptions {
                    design: DesignSpec {
                        harmonics: self.config.harmonics,
                        lags: marginal::MAX_LAGS,
                    },
                    quantile_level: self.config.gpd_quantile,
                };
                let model = marginal::fit_marginal_model(&raw, &options)?;
                let aic = marginal::lag_aic_report(&raw, self.config.harmonics)?;
                let (_, exp) = model.transform(&raw)?;
                (Some(model), aic, exp)
            } else {
                (None, Vec::new(), raw)
            };
            let p = dir.join(exp_file);
            exp.save(&p)?;
            Ok(MarginsPayload {
                enabled: self.config.marginal_preprocessing,
                model,
                lag_aic,
                exp_data_file: exp_file.into(),
                exp_data_hash: artifact::file_hash(&p)?,
                n_times: exp.n_times(),
            })
        })
    }

    fn deform(&self, run_id: i64) -> Result<StageOutcome> {
        let h = self.input_hash(run_id, Stage::Deform, &[])?;
        let coords_file = "coords.csv";
        self.cached(run_id, Stage::Deform, h, &[coords_file], |seed, dir| {
            let (_, exp) = self.load_exp(run_id)?;
            let exp = exp.data;
            let gplane = exp.sites.clone();
            let n_expected = exp.n_times() as f64 * (1.0 - self.config.u_chi);
            let chi = if n_expected >= deform::MIN_EXPECTED_EXCEEDANCES as f64 {
                Some(deform::empirical_chi_matrix(&exp, self.config.u_chi)?)
            } else {
                None
            };
            let anchors = self.config.anchors.select(gplane.len());
            let (deformation, dplane) = if self.config.deformation {
                let chi = chi.as_ref().ok_or_else(|| {
                    Error::domain(format!(
                        "deformation needs n (1 - u_chi) >= {}, got {n_expected}",
                        deform::MIN_EXPECTED_EXCEEDANCES
                    ))
                })?;
                let opts = DeformOptions {
                    penalty: self.config.deform_penalty,
                    multistarts: self.config.deform_multistarts,
                    seed,
                    ..DeformOptions::default()
                };
                let def = deform::fit_deformation(&gplane, chi, &anchors, &opts)?;
                let dplane = deform::apply_deformation(&def, &gplane);
                (Some(def), dplane)
            } else {
                (None, gplane.clone())
            };
            let mut w = csv::Writer::from_path(dir.join(coords_file))?;
            w.write_record(["site", "g_x", "g_y", "d_x", "d_y"])?;
            for (g, dp) in gplane.iter().zip(&dplane) {
                w.write_record([site_name(g), g[0].to_string(), g[1].to_string(), dp[0].to_string(), dp[1].to_string()])?;
            }
            w.flush()?;
            Ok(DeformPayload {
                enabled: self.config.deformation,
                chi,
                deformation,
                anchors,
                gplane,
                dplane,
            })
        })
    }

    fn fit_pairwise(&self, run_id: i64) -> Result<StageOutcome> {
        let h = self.input_hash(run_id, Stage::FitPairwise, &[])?;
        self.cached(run_id, Stage::FitPairwise, h, &[], |_, _| {
            let (_, exp) = self.load_exp(run_id)?;
            let def: DeformPayload = self.payload(run_id, Stage::Deform)?;
            let init = fit::default_phi_init(&def.dplane);
            fit::fit_pairwise(&exp.data, &def.dplane, self.config.tau, (init, 1.0))
        })
    }

    fn fit_tg(&self, run_id: i64) -> Result<StageOutcome> {
        let h = self.input_hash(run_id, Stage::FitTg, &[])?;
        self.cached(run_id, Stage::FitTg, h, &["fit_report.csv"], |seed, dir| {
            let (_, exp) = self.load_exp(run_id)?;
            let def: DeformPayload = self.payload(run_id, Stage::Deform)?;
            let pairwise: PairwiseFit = self.payload(run_id, Stage::FitPairwise)?;
            let thr = crate::geometry::Gauge::from_coords(&def.dplane, pairwise.phi, pairwise.kappa, 2.0)?;
            let split = fit::split_sample(&exp.data, |w| pairwise.c_tau / thr.eval(w))?;
            let options = TgFitOptions {
                multistarts: self.config.tg_multistarts,
                seed,
                ..TgFitOptions::default()
            };
            let init = TgParams {
                lambda: 1.0,
                phi: pairwise.phi,
                kappa: pairwise.kappa.min(1.95),
                gamma: 2.0,
            };
            let fitted = fit::fit_truncated_gamma(&split.exceedances, &pairwise, &def.dplane, init, &options, run_id)?;
            let mut w = csv::Writer::from_path(dir.join("fit_report.csv"))?;
            w.write_record(["iteration", "neg_loglik"])?;
            for (i, v) in fitted.trace.iter().enumerate() {
                w.write_record([i.to_string(), v.to_string()])?;
            }
            w.flush()?;
            Ok(fitted)
        })
    }

    fn split(&self, exp: &GridDataset, model: &GeometricModel) -> Result<RadialSplit> {
        fit::split_sample(exp, |w| model.threshold(w))
    }

    fn diagnose(&self, run_id: i64) -> Result<StageOutcome> {
        let h = self.input_hash(run_id, Stage::Diagnose, &[])?;
        let files = [
            "diagnostics/pp.csv",
            "diagnostics/qq.csv",
            "diagnostics/chi_model.csv",
        ];
        self.cached(run_id, Stage::Diagnose, h, &files, |seed, dir| {
            let (_, exp) = self.load_exp(run_id)?;
            let def: DeformPayload = self.payload(run_id, Stage::Deform)?;
            let (_, model) = self.load_model(run_id)?;
            let split = self.split(&exp.data, &model)?;
            let ex = &split.exceedances;
            let diag_dir = dir.join("diagnostics");
            let refit = self.config.band_refit.then(|| replicate_fit_options(seed));
            let pp = diagnostics::pp_points_with(ex, &model, self.config.band_reps, seed, run_id, refit.as_ref())?;
            let qq = diagnostics::pp_to_qq(&pp);
            pp.save(&diag_dir, "pp")?;
            qq.save(&diag_dir, "qq")?;
            let mut written: Vec<String> = files[..2].iter().map(|s| s.to_string()).collect();
            let chi = diagnostics::model_chi(
                &model,
                ex,
                self.config.u_chi,
                &def.dplane,
                self.config.chi_m_sim,
                seed.wrapping_add(1),
                def.chi.as_ref(),
                run_id,
            )?;
            chi.model_series.save(&diag_dir, "chi_model")?;
            written.push(files[2].into());
            if let Some(e) = &chi.empirical_series {
                e.save(&diag_dir, "chi_empirical")?;
                written.push("diagnostics/chi_empirical.csv".into());
            }
            Ok(DiagnosePayload {
                n_exceedances: ex.len(),
                pp_coverage: pp.meta.coverage,
                qq_coverage: qq.meta.coverage,
                chi: Some(chi),
                files: written,
            })
        })
    }

    /// Exponential thresholds for one target at every site.
    fn thresholds(&self, def: &CtqDefinition, margins: &MarginsPayload, raw: Option<&GridDataset>) -> Result<Vec<f64>> {
        match (&margins.model, raw) {
            (Some(model), Some(raw)) => model.exponential_thresholds(def.raw_threshold, raw),
            _ => {
                let d = margins
                    .model
                    .as_ref()
                    .map(|m| m.sites.len())
                    .or_else(|| raw.map(|r| r.n_sites()))
                    .ok_or_else(|| Error::domain("no site count available"))?;
                Ok(vec![def.raw_threshold; d])
            }
        }
    }

    fn estimate_ctq(&self, run_id: i64) -> Result<StageOutcome> {
        let h = self.input_hash(run_id, Stage::EstimateCtq, &[])?;
        self.cached(run_id, Stage::EstimateCtq, h, &["ctq.csv"], |seed, dir| {
            let (mut margins, exp) = self.load_exp(run_id)?;
            let raw = self.load_raw(run_id)?;
            if let Some(m) = margins.model.as_mut() {
                m.restore(&raw)?;
            }
            let (_, model) = self.load_model(run_id)?;
            let split = self.split(&exp.data, &model)?;
            let mut thresholds = Vec::new();
            let mut estimates = Vec::new();
            let mut seeds = Vec::new();
            for (i, def) in self.config.ctqs.iter().enumerate() {
                let q = self.thresholds(def, &margins, Some(&raw))?;
                let set = def.extreme_set(q.clone())?;
                let s = seed.wrapping_add((i as u64) << 32);
                let options = CtqOptions {
                    k_grid: self.config.k_grid,
                    m_sim: self.config.m_sim,
                    block_len: self.config.block_len,
                    n_reps: self.config.bootstrap_reps,
                    bootstrap_m_sim: self.config.bootstrap_m_sim,
                    level: self.config.ci_level,
                    seed: s,
                    refit: self.config.bootstrap_refit.then(|| replicate_fit_options(s)),
                };
                let est = estimate::estimate_ctq(&def.name, &model, &exp.data, &split, &set, &options, Some(def.reference))?;
                log::info!("run {run_id}: {} = {:.4} [{:.4}, {:.4}]", def.name, est.point, est.ci.0, est.ci.1);
                thresholds.push(CtqThresholds {
                    name: def.name.clone(),
                    raw_threshold: def.raw_threshold,
                    exponential: q,
                });
                estimates.push(est);
                seeds.push(s);
            }
            let rows: Vec<Table2Row> = estimates.iter().map(|e| table2_row(run_id, e)).collect();
            write_rows(&dir.join("ctq.csv"), &rows)?;
            Ok(CtqPayload {
                thresholds,
                estimates,
                seeds,
                m_sim: self.config.m_sim,
                bootstrap_reps: self.config.bootstrap_reps,
                bootstrap_m_sim: self.config.bootstrap_m_sim,
            })
        })
    }

    /// Simulates `Z | R' > k` and records a summary; the cloud itself is
    /// written only on request.
    pub fn simulate(&self, run_id: i64, request: SimulateRequest) -> std::result::Result<StageOutcome, StageError> {
        self.simulate_inner(run_id, request)
            .map_err(|e| StageError::new(Stage::Simulate.name(), Some(run_id), e))
    }

    fn simulate_inner(&self, run_id: i64, req: SimulateRequest) -> Result<StageOutcome> {
        if !(req.k >= 1.0 && req.k.is_finite()) {
            return Err(Error::Validation(format!("k must be >= 1, got {}", req.k)));
        }
        if req.m == 0 {
            return Err(Error::Validation("m must be >= 1".into()));
        }
        let extra = [
            ("k", req.k.to_le_bytes().to_vec()),
            ("m", (req.m as u64).to_le_bytes().to_vec()),
            ("cloud", vec![req.export_cloud as u8]),
        ];
        let h = self.input_hash(run_id, Stage::Simulate, &extra)?;
        let sides: &[&str] = if req.export_cloud { &["cloud.csv"] } else { &[] };
        self.cached(run_id, Stage::Simulate, h, sides, |seed, dir| {
            let (_, exp) = self.load_exp(run_id)?;
            let (_, model) = self.load_model(run_id)?;
            let split = self.split(&exp.data, &model)?;
            let ex = &split.exceedances;
            let d = ex.d;
            let sampler = CloudSampler::new(&model, ex, req.k)?;
            let parts = sampler.fold_tasks(
                req.m,
                seed,
                || (0usize, 0usize, vec![0.0; d]),
                |acc, z, _| {
                    let r: f64 = z.iter().sum();
                    let w: Vec<f64> = z.iter().map(|v| v / r).collect();
                    let thr = model.threshold(&w);
                    if r > thr {
                        acc.0 += 1;
                    }
                    if r > req.k * thr {
                        acc.1 += 1;
                    }
                    for (s, v) in acc.2.iter_mut().zip(z) {
                        *s += v;
                    }
                },
            )?;
            let (mut above, mut above_k, mut sums) = (0usize, 0usize, vec![0.0; d]);
            for (a, b, s) in parts {
                above += a;
                above_k += b;
                for (t, v) in sums.iter_mut().zip(s) {
                    *t += v;
                }
            }
            let m = req.m as f64;
            let cloud_file = if req.export_cloud {
                let cloud = simulate::simulate_cloud(&model, ex, req.k, req.m, seed)?;
                let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("cloud.csv"))?);
                let header: Vec<String> = exp.data.sites.iter().map(site_name).collect();
                writeln!(w, "{}", header.join(","))?;
                for p in cloud.iter() {
                    let line: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                    writeln!(w, "{}", line.join(","))?;
                }
                w.flush()?;
                Some("cloud.csv".to_string())
            } else {
                None
            };
            Ok(SimulatePayload {
                k: req.k,
                m: req.m,
                seed,
                p_exceed: ex.exceedance_probability(),
                p_k_given_1: sampler.mean_weight(),
                exceed_fraction: above as f64 / m,
                above_k_fraction: above_k as f64 / m,
                component_means: sums.into_iter().map(|s| s / m).collect(),
                cloud_file,
            })
        })
    }

    /// Collates parameter and target tables across all configured runs.
    pub fn report(&self) -> std::result::Result<ReportPayload, StageError> {
        self.report_inner().map_err(|e| StageError::new(Stage::Report.name(), None, e))
    }

    fn report_inner(&self) -> Result<ReportPayload> {
        let mut table1 = Vec::new();
        let mut table2 = Vec::new();
        let mut hashes = Vec::new();
        for id in self.run_ids() {
            let fitted: FittedGeometricModel = self.payload(id, Stage::FitTg)?;
            let ctq: CtqPayload = self.payload(id, Stage::EstimateCtq)?;
            hashes.push(artifact::file_hash(&self.artifact_path(id, Stage::FitTg))?);
            hashes.push(artifact::file_hash(&self.artifact_path(id, Stage::EstimateCtq))?);
            let p = &fitted.params;
            table1.push(Table1Row {
                run_id: id,
                lambda: p.lambda,
                phi: p.phi,
                kappa: p.kappa,
                gamma: p.gamma,
                c_tau: p.c_tau,
                loglik: fitted.loglik,
                n_exceedances: fitted.n_exceedances,
            });
            table2.extend(ctq.estimates.iter().map(|e| table2_row(id, e)));
        }
        table2.sort_by(|a, b| a.ctq.cmp(&b.ctq).then(a.run_id.cmp(&b.run_id)));
        std::fs::create_dir_all(&self.out_dir)?;
        write_rows(&self.out_dir.join("table1.csv"), &table1)?;
        write_rows(&self.out_dir.join("table2.csv"), &table2)?;
        let payload = ReportPayload { table1, table2 };
        let art = Artifact {
            stage: Stage::Report.name().to_string(),
            run_id: 0,
            config_hash: self.config_hash.clone(),
            input_hash: artifact::combined_hash(hashes.iter().map(|h| ("artifact", h.as_bytes()))),
            seed: self.config.stage_seed(Stage::Report),
            payload: &payload,
        };
        artifact::write_json(&self.out_dir.join("report.json"), &art)?;
        Ok(payload)
    }
}

fn table2_row(run_id: i64, e: &CtqEstimate) -> Table2Row {
    Table2Row {
        ctq: e.name.clone(),
        run_id,
        point: e.point,
        lower: e.ci.0,
        upper: e.ci.1,
        bootstrap_mean: e.bootstrap_mean,
        bootstrap_median: e.bootstrap_median,
        k_used: e.k_used,
        reference: e.reference,
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
