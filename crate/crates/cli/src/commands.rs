use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use panelmi::analysis::fit_each;
use panelmi::catalog::{run_recipe, ImputeOptions, Recipe};
use panelmi::data::io::{self, write_atomic, DatasetMeta, IMPUTATION_COLUMN};
use panelmi::data::{available_case_filter, Dataset, ReshapeMap};
use panelmi::exec::{set_workers, Execution};
use panelmi::fcs::ChainStats;
use panelmi::fitters::{parse_formula, Criterion, LmmFit};
use panelmi::jm::{autocorr, ChainTrace};
use panelmi::pooling::pool_lmm;
use panelmi::simulator::{reshape_map, simulate, SimConfig};
use panelmi::stack::ImputedStack;
use panelmi::Error;
use serde::Deserialize;

use crate::manifest::{check_upstream, RunManifest};
use crate::{AnalyzeArgs, Cli, Command, DiagArgs, ImputeArgs, PoolArgs, SimArgs};

pub const META_FILE: &str = "metadata.json";
/// The sampler needs room between retained draws to decorrelate them.
pub const MIN_NBETWEEN: usize = 100;

#[derive(Debug)]
pub enum CliError {
    Lib(Error),
    NonConvergence { failed: usize, total: usize },
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Lib(e) if e.is_config_error() => write!(f, "{e}"),
            CliError::Lib(e) => write!(f, "{}: {e}", e.name()),
            CliError::NonConvergence { failed, total } => {
                write!(f, "NonConvergence: {failed} of {total} fits did not converge")
            }
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Lib(e) if e.is_config_error() => ExitCode::from(2),
            CliError::Lib(_) => ExitCode::from(3),
            CliError::NonConvergence { .. } => ExitCode::from(4),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn bad_flag(flag: &str, msg: impl Into<String>) -> CliError {
    CliError::Lib(Error::BadConfig {
        pointer: flag.to_string(),
        msg: msg.into(),
    })
}

pub fn run(cli: &Cli) -> CliResult {
    if cli.workers > 0 {
        set_workers(cli.workers);
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let start = Instant::now();
    let (manifest, dir) = match &cli.command {
        Command::Sim(a) => (sim(a)?, &a.out_dir),
        Command::Impute(a) => (impute(a, exec)?, &a.out_dir),
        Command::Analyze(a) => {
            let (manifest, outcome) = analyze(a, exec)?;
            manifest.write(&a.out_dir, start.elapsed())?;
            return outcome;
        }
        Command::Pool(a) => {
            let (manifest, outcome) = pool(a)?;
            manifest.write(&a.out_dir, start.elapsed())?;
            return outcome;
        }
        Command::Diag(a) => (diag(a)?, &a.out_dir),
    };
    manifest.write(dir, start.elapsed())?;
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| {
        CliError::Lib(Error::BadConfig {
            pointer: String::new(),
            msg: format!("cannot read {}: {e}", path.display()),
        })
    })
}

fn save(dir: &Path, name: &str, bytes: &[u8], m: &mut RunManifest) -> CliResult {
    let path = dir.join(name);
    write_atomic(&path, bytes)?;
    m.outputs.push(path);
    Ok(())
}

fn csv_bytes(d: &Dataset) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    io::write_csv(&mut out, d)?;
    Ok(out)
}

fn sim(a: &SimArgs) -> CliResult<RunManifest> {
    let mut m = RunManifest::new("sim");
    let mut cfg = match &a.config {
        Some(p) => {
            m.config_paths.push(p.clone());
            SimConfig::from_json(&read_text(p)?)?
        }
        None => SimConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    m.seed = Some(cfg.seed);
    let out = simulate(&cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    save(&a.out_dir, "complete.csv", &csv_bytes(&out.complete)?, &mut m)?;
    save(&a.out_dir, "observed.csv", &csv_bytes(&out.observed)?, &mut m)?;
    save(&a.out_dir, "truth.json", serde_json::to_string_pretty(&out.truth)?.as_bytes(), &mut m)?;
    let meta = DatasetMeta::of(&out.observed).to_json()?;
    save(&a.out_dir, META_FILE, meta.as_bytes(), &mut m)?;
    Ok(m)
}

fn meta_path(input: &Path, meta: &Option<PathBuf>) -> PathBuf {
    meta.clone()
        .unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).join(META_FILE))
}

/// `impute --config` file; every field is optional and flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ImputeConfig {
    method: Option<String>,
    seed: Option<u64>,
    options: ImputeOptions,
}

fn impute(a: &ImputeArgs, exec: Execution) -> CliResult<RunManifest> {
    let mut m = RunManifest::new("impute");
    let cfg: ImputeConfig = match &a.config {
        Some(p) => {
            m.config_paths.push(p.clone());
            panelmi::error::parse_json(&read_text(p)?)?
        }
        None => ImputeConfig::default(),
    };
    let method = a
        .method
        .clone()
        .or(cfg.method)
        .ok_or_else(|| bad_flag("--method", "no method given on the command line or in the config"))?;
    let recipe: Recipe = method.parse()?;
    let mut opts = cfg.options;
    let overrides = [
        (a.m, &mut opts.m),
        (a.maxit, &mut opts.maxit),
        (a.nburn, &mut opts.nburn),
        (a.nbetween, &mut opts.nbetween),
        (a.window, &mut opts.window),
        (a.donors, &mut opts.donors),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if opts.m == 0 {
        return Err(bad_flag("--m", "must be at least 1"));
    }
    if recipe.is_joint() && opts.nbetween < MIN_NBETWEEN {
        return Err(bad_flag("--nbetween", format!("must be at least {MIN_NBETWEEN}")));
    }
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    m.seed = Some(seed);

    check_upstream(&a.input)?;
    let meta_file = meta_path(&a.input, &a.meta);
    let meta = DatasetMeta::read(&meta_file)?;
    let data = io::load_csv(&a.input, &meta)?;
    let map = match &a.map {
        Some(p) => {
            m.config_paths.push(p.clone());
            panelmi::error::parse_json::<ReshapeMap>(&read_text(p)?)?
        }
        None => reshape_map(),
    };
    m.inputs.extend([a.input.clone(), meta_file]);

    let out = run_recipe(recipe, &data, &map, &opts, seed, exec)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut stacked = Vec::new();
    out.stack.write_csv(&mut stacked)?;
    save(&a.out_dir, "imputations.csv", &stacked, &mut m)?;
    save(&a.out_dir, META_FILE, DatasetMeta::of(&out.stack.original).to_json()?.as_bytes(), &mut m)?;
    save(&a.out_dir, "spec.json", serde_json::to_string_pretty(&out.spec)?.as_bytes(), &mut m)?;
    if let Some(trace) = &out.trace {
        let mut buf = Vec::new();
        trace.write_csv(&mut buf)?;
        save(&a.out_dir, "trace.csv", &buf, &mut m)?;
    }
    if let Some(stats) = &out.stats {
        let mut buf = Vec::new();
        stats.write_csv(&mut buf)?;
        save(&a.out_dir, "chain_stats.csv", &buf, &mut m)?;
    }
    Ok(m)
}

fn first_header_field(path: &Path) -> CliResult<String> {
    let mut line = String::new();
    BufReader::new(File::open(path)?).read_line(&mut line)?;
    Ok(line.split(',').next().unwrap_or("").trim().trim_matches('"').to_string())
}

/// Datasets to analyze, keyed by imputation number (0 for a single file).
fn load_analysis_input(input: &Path, meta: &DatasetMeta) -> CliResult<Vec<(usize, Dataset)>> {
    if first_header_field(input)? == IMPUTATION_COLUMN {
        let stack = ImputedStack::read_csv(File::open(input)?, meta)?;
        Ok(stack.imputations.into_iter().enumerate().map(|(i, d)| (i + 1, d)).collect())
    } else {
        Ok(vec![(0, io::load_csv(input, meta)?)])
    }
}

fn analyze(a: &AnalyzeArgs, exec: Execution) -> CliResult<(RunManifest, CliResult)> {
    let mut m = RunManifest::new("analyze");
    let formula = parse_formula(&a.formula)?;
    check_upstream(&a.input)?;
    let meta_file = meta_path(&a.input, &a.meta);
    let meta = DatasetMeta::read(&meta_file)?;
    m.inputs.extend([a.input.clone(), meta_file]);
    let mut sets = load_analysis_input(&a.input, &meta)?;
    if a.aca {
        let vars = formula.variables();
        let names: Vec<&str> = vars.iter().map(String::as_str).collect();
        for (_, d) in sets.iter_mut() {
            *d = available_case_filter(d, &names)?;
        }
    }
    let crit = if a.ml { Criterion::Ml } else { Criterion::Reml };
    let (keys, data): (Vec<usize>, Vec<Dataset>) = sets.into_iter().unzip();
    let fits = fit_each(&data, &formula, crit, exec)?;
    fs::create_dir_all(&a.out_dir)?;
    for (k, fit) in keys.iter().zip(&fits) {
        save(&a.out_dir, &format!("fit_{k:03}.json"), serde_json::to_string_pretty(fit)?.as_bytes(), &mut m)?;
    }
    let failed = fits.iter().filter(|f| !f.converged).count();
    if failed > 0 {
        eprintln!("{failed} of {} fits did not converge", fits.len());
    }
    let outcome = if a.strict && failed > 0 {
        Err(CliError::NonConvergence {
            failed,
            total: fits.len(),
        })
    } else {
        Ok(())
    };
    Ok((m, outcome))
}

fn fit_files(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("fit_") && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn pool(a: &PoolArgs) -> CliResult<(RunManifest, CliResult)> {
    let mut m = RunManifest::new("pool");
    let files = fit_files(&a.fits)?;
    let mut fits = Vec::with_capacity(files.len());
    for f in &files {
        check_upstream(f)?;
        fits.push(panelmi::error::parse_json::<LmmFit>(&read_text(f)?)?);
    }
    m.inputs = files;
    let failed = fits.iter().filter(|f| !f.converged).count();
    if a.strict && failed > 0 {
        let err = CliError::NonConvergence {
            failed,
            total: fits.len(),
        };
        return Ok((m, Err(err)));
    }
    let pooled = pool_lmm(&fits, false)?;
    fs::create_dir_all(&a.out_dir)?;
    save(&a.out_dir, "pooled.csv", pooled.to_csv().as_bytes(), &mut m)?;
    save(&a.out_dir, "pooled.json", serde_json::to_string_pretty(&pooled)?.as_bytes(), &mut m)?;
    Ok((m, Ok(())))
}

/// Named series from either diagnostic file format.
fn load_series(input: &Path) -> CliResult<Vec<(String, Vec<f64>)>> {
    match first_header_field(input)?.as_str() {
        "iteration" => {
            let trace = ChainTrace::read_csv(File::open(input)?)?;
            trace
                .names()
                .iter()
                .map(|n| Ok((n.clone(), trace.series(n)?)))
                .collect()
        }
        "chain" => {
            let stats = ChainStats::read_csv(File::open(input)?)?;
            let mut keys: Vec<(usize, String)> = stats.rows.iter().map(|r| (r.chain, r.column.clone())).collect();
            keys.sort();
            keys.dedup();
            let mut out = Vec::new();
            for (chain, column) in keys {
                let s = stats.series(chain, &column);
                out.push((format!("chain{chain}:{column}:mean"), s.iter().map(|p| p.0).collect()));
                out.push((format!("chain{chain}:{column}:sd"), s.iter().map(|p| p.1).collect()));
            }
            Ok(out)
        }
        other => Err(bad_flag(
            "--input",
            format!("unrecognized diagnostics file (first column `{other}`)"),
        )),
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".into()
    }
}

fn diag(a: &DiagArgs) -> CliResult<RunManifest> {
    let mut m = RunManifest::new("diag");
    check_upstream(&a.input)?;
    m.inputs.push(a.input.clone());
    let series = load_series(&a.input)?;
    let len = series.iter().map(|s| s.1.len()).max().unwrap_or(0);

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iteration".to_string()];
    header.extend(series.iter().map(|s| s.0.clone()));
    w.write_record(&header).map_err(Error::from)?;
    for i in 0..len {
        let mut row = vec![(i + 1).to_string()];
        row.extend(series.iter().map(|s| s.1.get(i).map_or("NA".into(), |&v| num(v))));
        w.write_record(&row).map_err(Error::from)?;
    }
    let series_csv = w.into_inner().map_err(|e| Error::from(e.into_error()))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["parameter", "lag", "autocorrelation"]).map_err(Error::from)?;
    for (name, s) in &series {
        for lag in 1..=a.max_lag.min(s.len().saturating_sub(1)) {
            let r = match autocorr(s, lag) {
                Ok(r) => num(r),
                Err(Error::DegenerateSeries) => "NA".into(),
                Err(e) => return Err(e.into()),
            };
            w.write_record([name.clone(), lag.to_string(), r]).map_err(Error::from)?;
        }
    }
    let acf_csv = w.into_inner().map_err(|e| Error::from(e.into_error()))?;

    fs::create_dir_all(&a.out_dir)?;
    save(&a.out_dir, "series.csv", &series_csv, &mut m)?;
    save(&a.out_dir, "autocorrelation.csv", &acf_csv, &mut m)?;
    Ok(m)
}
