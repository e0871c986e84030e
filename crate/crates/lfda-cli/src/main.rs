//! `lfda`: fit, predict, simulate, test-mean, and export-components commands
//! for longitudinal functional data analysis.
//!
//! Exit codes: 0 success, 2 fit/processing failure, 3 prediction failure,
//! 4 configuration failure.

mod export;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lfda_core::dataset::{load_csv, LFDataset};
use lfda_core::error::Error;
use lfda_core::inference::{bootstrap_slope_band, bootstrap_slope_test, InferenceOptions};
use lfda_core::model::{fit_model, load_model, save_model, FitOptions, FittedModel};
use lfda_core::prediction::{in_sample_ipe_observed, naive_predict, reconstruct};
use lfda_core::simulation::{run_experiment, ScenarioConfig, XiModel};
use lfda_core::smoothing::default_lambda_grid;

const EXIT_FIT: u8 = 2;
const EXIT_PREDICT: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(
    name = "lfda",
    about = "Longitudinal functional data analysis: marginal eigenbasis, time-varying scores, curve prediction",
    version
)]
struct Cli {
    /// Worker threads (default: all cores; env fallback LFDA_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the full pipeline on a long-format CSV and persist the model.
    Fit(FitArgs),
    /// Predict response curves from a fitted model.
    Predict(PredictArgs),
    /// Run a seeded simulation sweep and write per-replicate metrics.
    Simulate(SimulateArgs),
    /// Bootstrap test of a time-constant mean (null slope), with a band.
    TestMean(TestMeanArgs),
    /// Export plot-ready CSVs of all fitted model components.
    ExportComponents(ExportArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV with header `subject,t,s,y` (empty y = missing cell).
    #[arg(long)]
    input: PathBuf,
    /// Output model file (JSON).
    #[arg(long)]
    output: PathBuf,
    /// Mean-surface strategy.
    #[arg(long, default_value = "bivariate")]
    mean: String,
    /// Score-process strategy per component.
    #[arg(long, default_value = "np")]
    longitudinal: String,
    /// Proportion of variance explained for both truncations.
    #[arg(long, default_value_t = 0.95)]
    pve: f64,
    /// Mean tensor dimension along s.
    #[arg(long, default_value_t = 10)]
    ds: usize,
    /// Mean tensor dimension along T.
    #[arg(long, default_value_t = 5)]
    dt: usize,
    /// Time-grid resolution for the score processes.
    #[arg(long, default_value_t = 41)]
    time_grid: usize,
    /// Boundary trim fraction for noise-variance estimation.
    #[arg(long, default_value_t = 0.0)]
    trim: f64,
    /// Recorded in the model file; the fit itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the component CSVs (default: the model's directory).
    #[arg(long)]
    export_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Fitted model file.
    #[arg(long)]
    model: PathBuf,
    /// Predict a single subject.
    #[arg(long, conflicts_with = "all_subjects")]
    subject: Option<String>,
    /// Time of the predicted visit, in [0, 1].
    #[arg(long)]
    t: Option<f64>,
    /// Predict every training subject.
    #[arg(long)]
    all_subjects: bool,
    /// Number of equispaced prediction times (with --all-subjects).
    #[arg(long, default_value_t = 41)]
    t_grid: usize,
    /// Use the naive baseline (subject's average training curve).
    #[arg(long)]
    naive: bool,
    /// Training CSV, required by --naive.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Output CSV `subject,t,s,y_hat`.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Score-process generator: np, rem, or exp.
    #[arg(long)]
    xi_model: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m_min: Option<usize>,
    #[arg(long)]
    m_max: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    sigma_e1: Option<f64>,
    #[arg(long)]
    sigma_e2: Option<f64>,
    #[arg(long)]
    n_sim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pve: Option<f64>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Mean-surface strategy used by the fits.
    #[arg(long)]
    mean: Option<String>,
    /// Score-process strategy used by the fits.
    #[arg(long)]
    longitudinal: Option<String>,
    /// Per-replicate and aggregate metrics CSV.
    #[arg(long)]
    output: PathBuf,
    /// Per-replicate wall-time CSV.
    #[arg(long)]
    timing: Option<PathBuf>,
}

#[derive(Args)]
struct TestMeanArgs {
    #[arg(long)]
    input: PathBuf,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = 1000)]
    b: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pointwise band level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Write the JSON report here (also printed to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the pointwise band CSV here.
    #[arg(long)]
    band: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests are successful output, not failures.
            use clap::error::ErrorKind;
            let _ = err.print();
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };

    if let Some(threads) = cli.threads.or_else(|| {
        std::env::var("LFDA_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    }) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }

    let outcome = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::TestMean(args) => cmd_test_mean(args),
        Command::ExportComponents(args) => cmd_export(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, err)) => {
            eprintln!("error: {err}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = Result<(), (u8, Error)>;

fn config_err(err: Error) -> (u8, Error) {
    (EXIT_CONFIG, err)
}

fn fit_err(err: Error) -> (u8, Error) {
    (EXIT_FIT, err)
}

fn predict_err(err: Error) -> (u8, Error) {
    (EXIT_PREDICT, err)
}

#[derive(Serialize)]
struct FitReport {
    k: usize,
    l: Vec<usize>,
    pve_marginal: f64,
    pve_components: Vec<f64>,
    sigma2: f64,
    sigma2_e: Vec<f64>,
    mean_model: String,
    score_model: String,
    n_subjects: usize,
    n_visits: usize,
    in_sample_ipe_observed: f64,
    model_file: String,
    component_files: Vec<String>,
}

fn cmd_fit(args: FitArgs) -> CmdResult {
    let opts = FitOptions {
        mean_model: args.mean,
        score_model: args.longitudinal,
        pve: args.pve,
        mean_dims: (args.ds, args.dt),
        cov_dim: 10,
        time_grid_len: args.time_grid,
        trim: args.trim,
        lambda_grid: default_lambda_grid(),
        seed: args.seed,
    };
    opts.validate().map_err(config_err)?;

    let data = load_csv(&args.input).map_err(fit_err)?;
    let model = fit_model(&data, &opts).map_err(fit_err)?;
    save_model(&model, &args.output).map_err(fit_err)?;

    let export_dir = args
        .export_dir
        .unwrap_or_else(|| args.output.parent().unwrap_or(Path::new(".")).to_path_buf());
    let stem = args
        .output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let component_files =
        export::write_component_csvs(&model, &export_dir, &format!("{stem}_")).map_err(fit_err)?;

    let pve_components = model
        .components
        .iter()
        .map(|c| match c {
            lfda_core::registry::ScoreComponent::Nonparametric(np) => np.pve_achieved,
            lfda_core::registry::ScoreComponent::RandomEffects(_) => 1.0,
        })
        .collect();
    let report = FitReport {
        k: model.k(),
        l: model.components.iter().map(|c| c.n_terms()).collect(),
        pve_marginal: model.basis.pve_achieved,
        pve_components,
        sigma2: model.sigma2,
        sigma2_e: model.components.iter().map(|c| c.sigma2_e()).collect(),
        mean_model: model.options.mean_model.clone(),
        score_model: model.options.score_model.clone(),
        n_subjects: data.n_subjects(),
        n_visits: data.n_visits(),
        in_sample_ipe_observed: in_sample_ipe_observed(&model, &data).map_err(fit_err)?,
        model_file: args.output.display().to_string(),
        component_files,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| fit_err(e.into()))?
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictReport {
    subjects: usize,
    times: usize,
    rows: usize,
    output: String,
    naive: bool,
}

fn cmd_predict(args: PredictArgs) -> CmdResult {
    if args.naive && args.train.is_none() {
        return Err(config_err(Error::config("--naive requires --train <csv>")));
    }
    if !args.all_subjects && args.subject.is_none() {
        return Err(config_err(Error::config(
            "choose --subject <id> or --all-subjects",
        )));
    }
    if !args.all_subjects && args.t.is_none() {
        return Err(config_err(Error::config("--subject needs --t <time>")));
    }
    if args.all_subjects && args.t_grid < 1 {
        return Err(config_err(Error::config("--t-grid must be at least 1")));
    }

    let model = load_model(&args.model).map_err(predict_err)?;
    let train: Option<LFDataset> = match &args.train {
        Some(path) => Some(load_csv(path).map_err(predict_err)?),
        None => None,
    };

    let subjects: Vec<String> = if args.all_subjects {
        match (&args.naive, &train) {
            (true, Some(data)) => data.subjects().iter().map(|s| s.id.clone()).collect(),
            _ => model.subjects().into_iter().cloned().collect(),
        }
    } else {
        vec![args.subject.clone().unwrap()]
    };
    let times: Vec<f64> = if args.all_subjects {
        if args.t_grid == 1 {
            vec![args.t.unwrap_or(0.5)]
        } else {
            (0..args.t_grid)
                .map(|i| i as f64 / (args.t_grid - 1) as f64)
                .collect()
        }
    } else {
        vec![args.t.unwrap()]
    };

    let file = std::fs::File::create(&args.output).map_err(|e| predict_err(e.into()))?;
    let mut writer = csv::Writer::from_writer(file);
    writer
        .write_record(["subject", "t", "s", "y_hat"])
        .map_err(|e| predict_err(e.into()))?;
    // Naive curves live on the training grid, model curves on the model grid.
    let points: Vec<f64> = match (&args.naive, &train) {
        (true, Some(data)) => data.grid().points().to_vec(),
        _ => model.grid().points().to_vec(),
    };
    let mut rows = 0usize;
    for subject in &subjects {
        for &t in &times {
            let curve = if args.naive {
                naive_predict(train.as_ref().unwrap(), subject).map_err(predict_err)?
            } else {
                reconstruct(&model, subject, t).map_err(predict_err)?
            };
            for (r, &s) in points.iter().enumerate() {
                writer
                    .write_record([
                        subject.as_str(),
                        &t.to_string(),
                        &s.to_string(),
                        &curve[r].to_string(),
                    ])
                    .map_err(|e| predict_err(e.into()))?;
                rows += 1;
            }
        }
    }
    writer.flush().map_err(|e| predict_err(e.into()))?;

    let report = PredictReport {
        subjects: subjects.len(),
        times: times.len(),
        rows,
        output: args.output.display().to_string(),
        naive: args.naive,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| predict_err(e.into()))?
    );
    Ok(())
}

#[derive(Serialize)]
struct SimulateReport {
    replicates: usize,
    failures: usize,
    imse_mu: f64,
    imse_phi1: f64,
    imse_phi2: f64,
    ipe_xi1: f64,
    ipe_xi2: f64,
    in_ipe: f64,
    out_ipe: f64,
    in_ipe_naive: f64,
    out_ipe_naive: f64,
    results_file: String,
    timing_file: Option<String>,
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    let mut config: ScenarioConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| config_err(e.into()))?;
            serde_json::from_str(&text).map_err(|e| config_err(e.into()))?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(xi) = &args.xi_model {
        config.xi_model = xi.parse::<XiModel>().map_err(config_err)?;
    }
    if let Some(n) = args.n {
        config.n = n;
    }
    if let Some(m) = args.m_min {
        config.m_min = m;
    }
    if let Some(m) = args.m_max {
        config.m_max = m;
    }
    if let Some(snr) = args.snr {
        config.snr = snr;
    }
    if let Some(v) = args.sigma_e1 {
        config.sigma_e.0 = v;
    }
    if let Some(v) = args.sigma_e2 {
        config.sigma_e.1 = v;
    }
    if let Some(n_sim) = args.n_sim {
        config.n_sim = n_sim;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(pve) = args.pve {
        config.pve = pve;
    }
    if let Some(n_test) = args.n_test {
        config.n_test = n_test;
    }
    if let Some(mean) = &args.mean {
        config.fit.mean_model = mean.clone();
    }
    if let Some(score) = &args.longitudinal {
        config.fit.score_model = score.clone();
    }
    config.validate().map_err(config_err)?;
    config.fit.validate().map_err(config_err)?;

    let result = run_experiment(&config).map_err(fit_err)?;

    let file = std::fs::File::create(&args.output).map_err(|e| fit_err(e.into()))?;
    let mut writer = csv::Writer::from_writer(file);
    writer
        .write_record([
            "replicate",
            "imse_mu",
            "imse_phi1",
            "imse_phi2",
            "ipe_xi1",
            "ipe_xi2",
            "in_ipe",
            "out_ipe",
            "in_ipe_naive",
            "out_ipe_naive",
        ])
        .map_err(|e| fit_err(e.into()))?;
    let write_row = |writer: &mut csv::Writer<std::fs::File>,
                     label: &str,
                     m: &lfda_core::simulation::SimResultRow|
     -> Result<(), Error> {
        writer.write_record([
            label,
            &m.imse_mu.to_string(),
            &m.imse_phi[0].to_string(),
            &m.imse_phi[1].to_string(),
            &m.ipe_xi[0].to_string(),
            &m.ipe_xi[1].to_string(),
            &m.in_ipe.to_string(),
            &m.out_ipe.to_string(),
            &m.in_ipe_naive.to_string(),
            &m.out_ipe_naive.to_string(),
        ])?;
        Ok(())
    };
    for rep in &result.replicates {
        write_row(&mut writer, &rep.replicate.to_string(), &rep.metrics).map_err(fit_err)?;
    }
    write_row(&mut writer, "mean", &result.aggregate).map_err(fit_err)?;
    writer.flush().map_err(|e| fit_err(e.into()))?;

    if let Some(timing_path) = &args.timing {
        let file = std::fs::File::create(timing_path).map_err(|e| fit_err(e.into()))?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(["replicate", "seconds"])
            .map_err(|e| fit_err(e.into()))?;
        for rep in &result.replicates {
            writer
                .write_record([rep.replicate.to_string(), rep.seconds.to_string()])
                .map_err(|e| fit_err(e.into()))?;
        }
        writer.flush().map_err(|e| fit_err(e.into()))?;
    }

    let report = SimulateReport {
        replicates: result.replicates.len(),
        failures: result.failures.len(),
        imse_mu: result.aggregate.imse_mu,
        imse_phi1: result.aggregate.imse_phi[0],
        imse_phi2: result.aggregate.imse_phi[1],
        ipe_xi1: result.aggregate.ipe_xi[0],
        ipe_xi2: result.aggregate.ipe_xi[1],
        in_ipe: result.aggregate.in_ipe,
        out_ipe: result.aggregate.out_ipe,
        in_ipe_naive: result.aggregate.in_ipe_naive,
        out_ipe_naive: result.aggregate.out_ipe_naive,
        results_file: args.output.display().to_string(),
        timing_file: args.timing.as_ref().map(|p| p.display().to_string()),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| fit_err(e.into()))?
    );
    Ok(())
}

#[derive(Serialize)]
struct TestMeanReport {
    q_obs: f64,
    p_value: f64,
    b: usize,
    dropped_replicates: usize,
    band_file: Option<String>,
}

fn cmd_test_mean(args: TestMeanArgs) -> CmdResult {
    if args.b < 1 {
        return Err(config_err(Error::config("--b must be at least 1")));
    }
    if !(0.0 < args.level && args.level < 1.0) {
        return Err(config_err(Error::config("--level must be in (0, 1)")));
    }
    let data = load_csv(&args.input).map_err(fit_err)?;
    let opts = InferenceOptions::default();
    let test = bootstrap_slope_test(&data, args.b, args.seed, &opts).map_err(fit_err)?;

    let mut band_file = None;
    if let Some(band_path) = &args.band {
        let band = bootstrap_slope_band(&data, args.b.max(20), args.level, args.seed, &opts)
            .map_err(fit_err)?;
        let file = std::fs::File::create(band_path).map_err(|e| fit_err(e.into()))?;
        let mut writer = csv::Writer::from_writer(file);
        writer
            .write_record(["s", "lower", "upper"])
            .map_err(|e| fit_err(e.into()))?;
        for (i, &s) in band.s_grid.iter().enumerate() {
            writer
                .write_record([
                    s.to_string(),
                    band.lower[i].to_string(),
                    band.upper[i].to_string(),
                ])
                .map_err(|e| fit_err(e.into()))?;
        }
        writer.flush().map_err(|e| fit_err(e.into()))?;
        band_file = Some(band_path.display().to_string());
    }

    let report = TestMeanReport {
        q_obs: test.q_obs,
        p_value: test.p_value,
        b: test.b,
        dropped_replicates: test.dropped_replicates,
        band_file,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| fit_err(e.into()))?;
    if let Some(report_path) = &args.report {
        std::fs::write(report_path, &json).map_err(|e| fit_err(e.into()))?;
    }
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct ExportReport {
    files: Vec<String>,
}

fn cmd_export(args: ExportArgs) -> CmdResult {
    let model: FittedModel = load_model(&args.model).map_err(fit_err)?;
    let files = export::write_component_csvs(&model, &args.out_dir, "").map_err(fit_err)?;
    let report = ExportReport { files };
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| fit_err(e.into()))?
    );
    Ok(())
}
