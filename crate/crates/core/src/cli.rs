//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::pipeline::{Pipeline, PipelineConfig, SimulateRequest, Stage, StageError, StageOutcome};
use crate::synthetic::{self, SyntheticKind, SyntheticSpec};

#[derive(Debug, Parser)]
#[command(name = "geoextremes", version, about = "Geometric extreme-value pipeline for gridded daily series")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Restrict per-run stages to one run.
    #[arg(long, global = true)]
    pub run_id: Option<i64>,
    /// Override the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override any config key, e.g. `--set m_sim=200000 --set k_grid.step=0.05`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Every stage in order, skipping those whose inputs are unchanged.
    Run,
    /// Validate and hash the raw input.
    Preprocess,
    /// Marginal fits and the exponential-scale transform.
    Margins,
    /// Spatial deformation to the D-plane.
    Deform,
    /// Pairwise then truncated-gamma fit.
    Fit,
    /// PP/QQ series with bootstrap bands and model chi.
    Diagnose {
        /// Bootstrap replicates for PP/QQ bands.
        #[arg(long)]
        band_reps: Option<usize>,
        /// Refit the model inside every band replicate (slow).
        #[arg(long)]
        refit: bool,
    },
    /// Simulate `Z | R' > k` from the fitted model.
    Simulate {
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, default_value_t = 100_000)]
        m: usize,
        /// Also write every simulated point to `cloud.csv`.
        #[arg(long)]
        cloud_csv: bool,
    },
    /// Point estimates and bootstrap intervals for the target quantities.
    EstimateCtq {
        #[arg(long)]
        m_sim: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        /// Refit the model inside every bootstrap replicate (slow).
        #[arg(long)]
        refit: bool,
    },
    /// Collate parameter and target tables across runs.
    Report,
    /// Write a synthetic dataset in the input CSV schema.
    Synthetic(SyntheticArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    MetaGaussian,
    IndependentExp,
    Comonotone,
    KnownGauge,
}

impl From<KindArg> for SyntheticKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::MetaGaussian => SyntheticKind::MetaGaussian,
            KindArg::IndependentExp => SyntheticKind::IndependentExp,
            KindArg::Comonotone => SyntheticKind::Comonotone,
            KindArg::KnownGauge => SyntheticKind::KnownGaugeRejection,
        }
    }
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long, value_enum, default_value = "meta-gaussian")]
    pub kind: KindArg,
    #[arg(long, default_value_t = 9)]
    pub d: usize,
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub phi: f64,
    #[arg(long, default_value_t = 1.5)]
    pub kappa: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1)]
    pub synthetic_run_id: i64,
    #[arg(long)]
    pub output: PathBuf,
}

fn set_path(root: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<(), Error> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Validation(format!("override `{key}`: `{p}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), value);
            return Ok(());
        }
        cur = obj.entry(*p).or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

fn parse_override(s: &str) -> Result<(String, serde_json::Value), Error> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Validation(format!("override `{s}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|c| c.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

/// Reads the config and applies command-line overrides.
pub fn load_config(global: &GlobalArgs, extra: &[(&str, serde_json::Value)]) -> Result<PipelineConfig, Error> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| Error::Validation("--config is required for pipeline commands".into()))?;
    let mut value: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
    for o in &global.overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut value, &k, v)?;
    }
    if let Some(seed) = global.seed {
        set_path(&mut value, "seed", serde_json::json!(seed))?;
    }
    if let Some(out) = &global.out {
        set_path(&mut value, "out_dir", serde_json::json!(absolute(out)))?;
    }
    for (k, v) in extra {
        set_path(&mut value, k, v.clone())?;
    }
    PipelineConfig::from_json_value(value, path.parent().unwrap_or(Path::new(".")))
}

fn print_outcomes(outcomes: &[StageOutcome]) {
    for o in outcomes {
        println!("{}", serde_json::to_string(o).unwrap_or_default());
    }
}

fn run_per_run(pl: &Pipeline, run_id: Option<i64>, stages: &[Stage]) -> Result<Vec<StageOutcome>, StageError> {
    let ids = run_id.map(|i| vec![i]).unwrap_or_else(|| pl.run_ids());
    let mut out = Vec::new();
    for id in ids {
        for s in stages {
            out.push(pl.run_stage(*s, id)?);
        }
    }
    Ok(out)
}

fn execute(cli: &Cli) -> Result<(), StageError> {
    if let Some(n) = cli.global.threads {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let config_err = |e| StageError::new("config", cli.global.run_id, e);
    if let Command::Synthetic(a) = &cli.command {
        let mut spec = SyntheticSpec::new(a.kind.into(), a.d, a.n, cli.global.seed.unwrap_or(0))
            .with_correlation(a.phi, a.kappa);
        spec.gamma = a.gamma;
        spec.run_id = a.synthetic_run_id;
        let ds = synthetic::generate(&spec).map_err(|e| StageError::new("synthetic", None, e))?;
        ds.save(&a.output).map_err(|e| StageError::new("synthetic", None, e))?;
        println!(
            "{}",
            serde_json::json!({"output": a.output, "n_times": ds.n_times(), "n_sites": ds.n_sites()})
        );
        return Ok(());
    }
    let mut extra: Vec<(&str, serde_json::Value)> = Vec::new();
    match &cli.command {
        Command::Diagnose { band_reps, refit } => {
            if let Some(b) = band_reps {
                extra.push(("band_reps", serde_json::json!(b)));
            }
            if *refit {
                extra.push(("band_refit", serde_json::json!(true)));
            }
        }
        Command::EstimateCtq { m_sim, reps, refit } => {
            if *refit {
                extra.push(("bootstrap_refit", serde_json::json!(true)));
            }
            if let Some(m) = m_sim {
                extra.push(("m_sim", serde_json::json!(m)));
            }
            if let Some(r) = reps {
                extra.push(("bootstrap_reps", serde_json::json!(r)));
            }
        }
        _ => {}
    }
    let config = load_config(&cli.global, &extra).map_err(config_err)?;
    let pl = Pipeline::new(config)?;
    let run_id = cli.global.run_id;
    match &cli.command {
        Command::Run => print_outcomes(&pl.run_all(run_id)?),
        Command::Preprocess => print_outcomes(&run_per_run(&pl, run_id, &[Stage::Preprocess])?),
        Command::Margins => print_outcomes(&run_per_run(&pl, run_id, &[Stage::Margins])?),
        Command::Deform => print_outcomes(&run_per_run(&pl, run_id, &[Stage::Deform])?),
        Command::Fit => print_outcomes(&run_per_run(&pl, run_id, &[Stage::FitPairwise, Stage::FitTg])?),
        Command::Diagnose { .. } => print_outcomes(&run_per_run(&pl, run_id, &[Stage::Diagnose])?),
        Command::EstimateCtq { .. } => print_outcomes(&run_per_run(&pl, run_id, &[Stage::EstimateCtq])?),
        Command::Simulate { k, m, cloud_csv } => {
            let req = SimulateRequest {
                k: *k,
                m: *m,
                export_cloud: *cloud_csv,
            };
            let ids = run_id.map(|i| vec![i]).unwrap_or_else(|| pl.run_ids());
            for id in ids {
                let o = pl.simulate(id, req)?;
                let text = std::fs::read_to_string(&o.path).map_err(|e| StageError::new("simulate", Some(id), e.into()))?;
                print_outcomes(&[o]);
                let v: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
                println!("{}", v["payload"]);
            }
        }
        Command::Report => {
            let r = pl.report()?;
            println!("{}", serde_json::json!({"table1_rows": r.table1.len(), "table2_rows": r.table2.len(), "out": pl.out_dir()}));
        }
        Command::Synthetic(_) => unreachable!("handled above"),
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let record = e.record();
            eprintln!("{record}");
            log::error!("{e}");
            if let Some(out) = cli.global.out.as_ref() {
                let _ = std::fs::create_dir_all(out);
                let _ = std::fs::write(out.join("error.json"), record.to_string());
            }
            e.exit_code()
        }
    }
}
