//! The `ipdm` command line. Exit status: 0 on success, 1 on user errors
//! (usage, bad input, missing files), 2 on internal errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use ipdm_core::control::RunControl;
use ipdm_core::domain::ConditionScale;
use ipdm_core::ingest::{self, NetworkStore};
use ipdm_core::synth::SynthConfig;
use ipdm_core::{fsutil, Error, Result};

use crate::api::{self, AppState};
use crate::jobs::JobManager;
use crate::ops;

pub const DEFAULT_PORT: u16 = 8464;
pub const PORT_ENV: &str = "IPDM_PORT";

#[derive(Debug, Parser)]
#[command(name = "ipdm", version, about = "Probabilistic deterioration modeling from visual-inspection data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random choice; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Read an inspection CSV through a column mapping into a store.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long, default_value_t = ConditionScale::default().lower)]
        scale_lower: f64,
        #[arg(long, default_value_t = ConditionScale::default().upper)]
        scale_upper: f64,
    },
    /// Rewrite a store's artifacts.
    Preprocess {
        #[arg(long)]
        store: PathBuf,
    },
    /// Smoothed states and a forecast for one element: CSV, JSON and a plot.
    AnalyzeElement {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        bridge: String,
        #[arg(long)]
        element: String,
        /// Needed when the element id occurs in several categories.
        #[arg(long)]
        category: Option<String>,
        /// Forecast horizon in years.
        #[arg(long, default_value_t = 10)]
        forecast: usize,
        /// Parameter artifact; defaults to parameters on the store's scale.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from a `key=value` config.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit model parameters per structural category.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = ops::TrainJob::default().max_iter)]
        max_iter: usize,
        #[arg(long, default_value_t = ops::TrainJob::default().tol)]
        tol: f64,
        /// Train, validation and test fractions.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        split: Option<Vec<f64>>,
        #[arg(long, default_value_t = ops::TrainJob::default().transform_n)]
        transform_n: f64,
        /// Starting value of the process noise.
        #[arg(long, default_value_t = ops::TrainJob::default().sigma_w)]
        sigma_w: f64,
        /// Keep every inspector at the default error model.
        #[arg(long)]
        no_inspectors: bool,
        /// Fit a kernel-regression prior on the element attributes.
        #[arg(long)]
        kernel: bool,
    },
    /// Estimate intervention effects on top of fitted parameters.
    TrainInterventions {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// `element_id,year,type_id` records; defaults to the dataset's own.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Forecast-error reports and parameter recovery on a synthetic dataset.
    Verify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        #[arg(long, default_value_t = 200)]
        elements: usize,
        #[arg(long, default_value_t = ops::VerifyJob::default().min_obs)]
        min_obs: usize,
    },
    /// Predictive check of the inspections added between two databases.
    Validate {
        #[arg(long)]
        old: PathBuf,
        #[arg(long)]
        new: PathBuf,
        #[arg(long)]
        params: PathBuf,
    },
    /// Serve the HTTP API and the web UI.
    Serve {
        /// Store to browse; an empty store when omitted.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Directory with `params_<category>.ipdm` files for analyses.
        #[arg(long)]
        params_dir: Option<PathBuf>,
        #[arg(long, default_value = "jobs")]
        jobs_dir: PathBuf,
        /// Jobs running at once.
        #[arg(long, default_value_t = 1)]
        max_jobs: usize,
        /// Defaults to $IPDM_PORT, then 8464.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Built web UI served at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

/// Errors caused by the caller rather than by the program.
pub fn is_user_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidInput(_)
            | Error::NotFound { .. }
            | Error::Schema { .. }
            | Error::Io { .. }
            | Error::IncompatibleConfig(_)
            | Error::Unidentifiable(_)
    )
}

fn need_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| Error::InvalidInput("--out is required".into()))
}

fn report(files: &[String], out: &Path) {
    // A closed pipe (`| head`) is not an error for the run itself.
    let mut stdout = std::io::stdout().lock();
    for f in files {
        if writeln!(stdout, "{}", out.join(f).display()).is_err() {
            return;
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if is_user_error(&e) {
                1
            } else {
                2
            }
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let Common { seed, threads, out } = cli.common;
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::InvalidInput("--threads must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let control = RunControl::new();
    match cli.verb {
        Verb::Ingest { csv, mapping, scale_lower, scale_upper } => {
            let out = need_out(&out)?;
            let scale = ConditionScale::new(scale_lower, scale_upper)?;
            let (files, s) = ops::ingest(&csv, &mapping, scale, out)?;
            eprintln!(
                "{} rows: {} stored, {} without rating, {} flagged, {} unknown inspector, {} skipped",
                s.rows,
                s.stored,
                s.missing,
                s.flagged,
                s.unknown_inspector,
                s.skipped.len()
            );
            report(&files, out);
        }
        Verb::Preprocess { store } => {
            let out = need_out(&out)?;
            report(&ops::preprocess(&store, out)?, out);
        }
        Verb::AnalyzeElement { store, bridge, element, category, forecast, params } => {
            let out = need_out(&out)?;
            let st = ingest::load_store(&store)?;
            let (cat, el) = match category {
                Some(c) => (c.clone(), ingest::find_element(&st, &bridge, &c, &element)?),
                None => {
                    let hits = ingest::find_in_bridge(&st, &bridge, &element)?;
                    if hits.len() > 1 {
                        return Err(Error::InvalidInput(format!(
                            "element {element} occurs in several categories of bridge {bridge}; pass --category"
                        )));
                    }
                    (hits[0].0.to_string(), hits[0].1)
                }
            };
            let (p, _) = api::analysis_params(&st, None, params.as_deref(), &cat)?;
            let a = ops::analyze(&ingest::element_series(&bridge, &cat, el), forecast, &p)?;
            report(&ops::write_analysis(&a, out)?, out);
        }
        Verb::Generate { config } => {
            let out = need_out(&out)?;
            let mut cfg = match config {
                Some(p) => SynthConfig::parse(&fsutil::read_to_string(&p)?)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            report(&ops::generate(&ops::GenerateJob { config: cfg }, out, &control)?, out);
        }
        Verb::Train { data, max_iter, tol, split, transform_n, sigma_w, no_inspectors, kernel } => {
            let out = need_out(&out)?;
            let d = ops::TrainJob::default();
            let job = ops::TrainJob {
                data,
                max_iter,
                tol,
                split: split.map_or(d.split, |s| [s[0], s[1], s[2]]),
                seed: seed.unwrap_or(d.seed),
                transform_n,
                sigma_w,
                estimate_inspectors: !no_inspectors,
                kernel,
            };
            report(&ops::train(&job, out, &control)?, out);
        }
        Verb::TrainInterventions { data, params, records } => {
            let out = need_out(&out)?;
            let job = ops::InterventionsJob { data, records, params };
            report(&ops::train_interventions(&job, out, &control)?, out);
        }
        Verb::Verify { data, params, horizon, elements, min_obs } => {
            let out = need_out(&out)?;
            let job = ops::VerifyJob {
                data,
                params,
                horizon,
                elements,
                seed: seed.unwrap_or(ops::VerifyJob::default().seed),
                min_obs,
            };
            report(&ops::verify(&job, out, &control)?, out);
        }
        Verb::Validate { old, new, params } => {
            let out = need_out(&out)?;
            report(&ops::validate(&ops::ValidateJob { old, new, params }, out, &control)?, out);
        }
        Verb::Serve { store, params_dir, jobs_dir, max_jobs, port, bind, ui } => {
            let store = match store {
                Some(p) => ingest::load_store(&p)?,
                None => NetworkStore {
                    scale: ConditionScale::default(),
                    attribute_names: Vec::new(),
                    bridges: Default::default(),
                },
            };
            let port = match port {
                Some(p) => p,
                None => match std::env::var(PORT_ENV) {
                    Ok(v) => v.parse().map_err(|_| Error::InvalidInput(format!("{PORT_ENV}={v:?} is not a port")))?,
                    Err(_) => DEFAULT_PORT,
                },
            };
            serve(store, params_dir, &jobs_dir, max_jobs, &bind, port, ui)?;
        }
    }
    Ok(())
}

fn serve(
    store: NetworkStore,
    params_dir: Option<PathBuf>,
    jobs_dir: &Path,
    max_jobs: usize,
    bind: &str,
    port: u16,
    ui: Option<PathBuf>,
) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Other(format!("starting runtime: {e}")))?;
    rt.block_on(async move {
        let jobs = JobManager::open(jobs_dir, max_jobs)?;
        let state = Arc::new(AppState { store, params_dir, jobs });
        let mut app = api::router(state);
        if let Some(dir) = ui {
            app = app.fallback_service(tower_http::services::ServeDir::new(dir));
        }
        let addr = format!("{bind}:{port}");
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Error::InvalidInput(format!("cannot listen on {addr}: {e}")))?;
        log::info!("listening on http://{addr}");
        eprintln!("listening on http://{addr}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::Other(format!("server: {e}")))
    })
}
