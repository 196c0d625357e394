//! Subcommands: `calibrate`, `fit` and `simulate`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use poolcal_core::calibration::fit_calibration;
use poolcal_core::inference::{fit_method, fit_with_calibration, FitOptions};
use poolcal_core::simulation::default_methods;
use poolcal_core::{CalibrationModel, CategoryScheme, FitMethod};

use crate::csv_io::{load_dataset, load_table};
use crate::formats::{
    calibration_from_file, calibration_to_file, report_table, rr_table, to_json, CalibrationFile, FitReport,
};
use crate::manifest::RunManifest;
use crate::presets::{apply_seed_override, load_config};
use crate::simulate::{parse_methods, run_parallel};
use crate::{CliError, EXIT_CONVERGENCE};

#[derive(Debug, Parser)]
#[command(
    name = "poolcal",
    version,
    about = "Pooled analysis of a calibrated categorical biomarker"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Levels {
    /// Cut points for the reference value, e.g. 30,50
    #[arg(long, value_delimiter = ',', conflicts_with = "categories")]
    pub cuts: Option<Vec<f64>>,
    /// Number of directly coded categories
    #[arg(long)]
    pub categories: Option<usize>,
}

impl Levels {
    fn scheme(&self) -> Result<Option<CategoryScheme>, CliError> {
        Ok(match (&self.cuts, self.categories) {
            (Some(c), _) => Some(CategoryScheme::cut_points(c.clone())?),
            (None, Some(p)) => Some(CategoryScheme::direct(p)?),
            (None, None) => None,
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a multinomial calibration model for every study
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        levels: Levels,
    },
    /// Estimate relative risks by exposure category
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// full, internalized, naive, linear or clr-known-x
        #[arg(long)]
        method: FitMethod,
        #[command(flatten)]
        levels: Levels,
        /// Calibration JSON to use instead of fitting one
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the relative-risk table here
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Run a simulation scenario
    Simulate {
        /// Scenario JSON, or the name of a bundled preset
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
        /// Comma-separated methods; defaults to those the design supports
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the text table here
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Runs a command and returns its exit status.
pub fn run(cli: &Cli) -> Result<u8, CliError> {
    match &cli.command {
        Command::Calibrate { data, out, levels } => calibrate(data, out, levels),
        Command::Fit {
            data,
            method,
            levels,
            calibration,
            out,
            table,
        } => fit(
            data,
            *method,
            levels,
            calibration.as_deref(),
            out,
            table.as_deref(),
        ),
        Command::Simulate {
            config,
            replicates,
            methods,
            threads,
            out,
            table,
        } => simulate(
            config,
            *replicates,
            methods.as_deref(),
            *threads,
            out,
            table.as_deref(),
            std::env::var("POOLCAL_SEED").ok().as_deref(),
        ),
    }
}

pub fn calibrate(data: &Path, out: &Path, levels: &Levels) -> Result<u8, CliError> {
    let table = load_table(data)?;
    let scheme = match levels.scheme()? {
        Some(s) => s,
        None => {
            let p = table
                .max_category()
                .ok_or_else(|| CliError::Usage("no x_cat values; pass --categories or --cuts".into()))?;
            CategoryScheme::direct(p.max(2))?
        }
    };
    let dataset = table.into_dataset(&scheme).map_err(|e| e.in_file(data))?;
    let mut fitted = Vec::new();
    let mut failures = Vec::new();
    for study in dataset.studies() {
        match fit_calibration(&dataset, &study.id) {
            Ok(f) => fitted.push(f),
            Err(e) => failures.push(e),
        }
    }
    if let Some(first) = failures.first() {
        for e in &failures[1..] {
            eprintln!("error: {e}");
        }
        return Err(first.clone().into());
    }
    let model = CalibrationModel::new(fitted)?;
    write(out, &to_json(&calibration_to_file(&model))?)?;
    for s in model.studies() {
        println!(
            "{}: {} calibration rows{}, {} Newton iterations",
            s.study_id,
            s.n_calibration,
            if s.control_only { " (controls only)" } else { "" },
            s.iterations
        );
    }
    let mut manifest = RunManifest::new("calibrate");
    manifest.input(data)?;
    manifest.output(out)?;
    manifest.write_for(out)?;
    Ok(0)
}

pub fn fit(
    data: &Path,
    method: FitMethod,
    levels: &Levels,
    calibration: Option<&Path>,
    out: &Path,
    table: Option<&Path>,
) -> Result<u8, CliError> {
    let scheme = levels
        .scheme()?
        .ok_or_else(|| CliError::Usage("fit needs --cuts or --categories".into()))?;
    let dataset = load_dataset(data, &scheme)?;
    let result = match (calibration, method.calibration_method()) {
        (Some(path), Some(cm)) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let file: CalibrationFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
            let model = calibration_from_file(&file).map_err(|e| e.in_file(path))?;
            fit_with_calibration(&dataset, model, cm, &FitOptions::default())?
        }
        (Some(_), None) => {
            return Err(CliError::Usage(format!(
                "--calibration applies to full and internalized fits, not {}",
                method.label()
            )))
        }
        (None, _) => fit_method(&dataset, &scheme, method)?,
    };
    write(out, &to_json(&FitReport::new(&result, &scheme))?)?;
    let text = rr_table(&result, &scheme);
    print!("{text}");
    if let Some(t) = table {
        write(t, &text)?;
    }
    let mut manifest = RunManifest::new("fit");
    manifest.input(data)?;
    if let Some(path) = calibration {
        manifest.input(path)?;
    }
    manifest.output(out)?;
    if let Some(t) = table {
        manifest.output(t)?;
    }
    manifest.write_for(out)?;
    Ok(if result.converged { 0 } else { EXIT_CONVERGENCE })
}

pub fn simulate(
    config_path: &Path,
    replicates: Option<usize>,
    methods: Option<&str>,
    threads: Option<usize>,
    out: &Path,
    table: Option<&Path>,
    seed_override: Option<&str>,
) -> Result<u8, CliError> {
    let (mut config, text) = load_config(config_path)?;
    apply_seed_override(&mut config, seed_override)?;
    if let Some(r) = replicates {
        config.replicates = r;
    }
    config.validate()?;
    let methods = match methods {
        Some(list) => parse_methods(list)?,
        None => default_methods(&config),
    };
    let report = run_parallel(&config, &methods, threads)?;
    write(out, &to_json(&report)?)?;
    let rendered = report_table(&report);
    print!("{rendered}");
    if let Some(t) = table {
        write(t, &rendered)?;
    }
    let mut manifest = RunManifest::new("simulate");
    manifest.config_sha256 = Some(crate::manifest::sha256_hex(text.as_bytes()));
    manifest.seed = Some(config.seed);
    manifest.output(out)?;
    if let Some(t) = table {
        manifest.output(t)?;
    }
    manifest.write_for(out)?;
    Ok(0)
}
