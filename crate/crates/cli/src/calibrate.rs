use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mscal::data::MultiSourceDataset;
use mscal::discrepancy::{default_lambda_z, DiscrepancyMode};
use mscal::experiments::{split_seed, Manifest};
use mscal::forward::{by_name, LookVector};
use mscal::inference::{mcmc_run, mle_fit, ChainReport, MleResult, PriorSpec};
use mscal::kernels::KernelFamily;
use mscal::likelihood::{ModelSpec, ParameterState, Problem, Workspace};
use mscal::predict::{average_over_draws, write_predictions_csv, Component};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::args::{CalibrateArgs, ModeArg, ModelArg, PredictArgs};
use crate::config::{self, CalibrateConfig, SCHEMA_VERSION};
use crate::files::{create_new, ensure_dir, read_observations, write_csv, write_json};
use crate::{CliError, CliResult};

/// Everything `predict` needs to rebuild a fitted model.
#[derive(Debug, Serialize, Deserialize)]
struct FitFile {
    schema_version: u32,
    manifest: Manifest,
    config: CalibrateConfig,
    /// One state per draw, or a single state shared by every discrepancy draw.
    states: Vec<ParameterState>,
    deltas: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mle: Option<MleResult>,
}

fn resolve(args: &CalibrateArgs) -> CliResult<CalibrateConfig> {
    let mut cfg: CalibrateConfig = config::load(args.config.as_deref())?;
    if let Some(m) = args.model {
        cfg.model = m;
    }
    if let Some(d) = &args.data {
        cfg.data = d.clone();
    }
    if let Some(f) = &args.forward {
        cfg.forward = f.clone();
    }
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(s) = args.samples {
        cfg.mcmc.n_samples = s;
    }
    if let Some(b) = args.burnin {
        cfg.mcmc.burn_in = b;
    }
    if let Some(t) = args.thin {
        cfg.mcmc.thin = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(b) = &args.bias {
        cfg.bias_kernel = match b.as_str() {
            "none" => None,
            name => Some(KernelFamily::parse(name)?),
        };
    }
    if args.fit_mean {
        cfg.fit_mean = true;
    }
    if cfg.forward.is_empty() {
        return Err(CliError::Usage("a forward model is required (--forward)".into()));
    }
    if cfg.data.is_empty() {
        return Err(CliError::Usage("at least one data file is required (--data)".into()));
    }
    cfg.mle.seed = cfg.seed;
    cfg.mcmc.seed = cfg.seed;
    Ok(cfg)
}

fn label(path: &Path, l: usize) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("source{}", l + 1))
}

fn build_problem(cfg: &CalibrateConfig) -> CliResult<Problem> {
    let forward: Arc<dyn mscal::forward::ForwardModel> = Arc::from(by_name(&cfg.forward)?);
    if !cfg.looks.is_empty() && cfg.looks.len() != cfg.data.len() {
        return Err(mscal::Error::Domain(format!(
            "{} look vectors for {} data files",
            cfg.looks.len(),
            cfg.data.len()
        ))
        .into());
    }
    let mut sources = Vec::with_capacity(cfg.data.len());
    for (l, path) in cfg.data.iter().enumerate() {
        let mut obs = read_observations(path, &label(path, l))?;
        if let Some(v) = cfg.looks.get(l) {
            obs = obs.with_look(LookVector::normalized(*v)?);
        }
        sources.push(obs);
    }
    let data = MultiSourceDataset::new(sources)?;
    let discrepancy = match cfg.model {
        ModelArg::Gasp => DiscrepancyMode::Gasp,
        ModelArg::Sgasp => DiscrepancyMode::Sgasp {
            lambda_z: match cfg.lambda_z {
                Some(l) => l,
                None => default_lambda_z(data.n())?,
            },
        },
    };
    let spec = ModelSpec {
        discrepancy,
        discrepancy_family: cfg.kernel.clone(),
        bias_family: cfg.bias_kernel.clone(),
        fit_mean: cfg.fit_mean,
    };
    Ok(Problem::new(data, forward, spec)?)
}

fn priors(problem: &Problem, cfg: &CalibrateConfig) -> CliResult<PriorSpec> {
    let mut p = PriorSpec::default_for(problem)?;
    if let Some(b) = &cfg.bounds {
        p.theta_bounds = b.clone();
    }
    Ok(p)
}

pub fn run(args: CalibrateArgs) -> CliResult<()> {
    let cfg = resolve(&args)?;
    let problem = build_problem(&cfg)?;
    let priors = priors(&problem, &cfg)?;
    let manifest = Manifest::new("calibrate", cfg.seed, &cfg)?;
    ensure_dir(&args.out)?;
    let fit = match cfg.mode {
        ModeArg::Mle => {
            let result = mle_fit(&problem, &priors.theta_bounds, &cfg.mle, None)?;
            let ws = Workspace::new(&problem, &result.state)?;
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, 1));
            let deltas = (0..cfg.delta_draws.max(1))
                .map(|_| ws.draw_delta(&mut rng).as_slice().to_vec())
                .collect();
            println!("log-likelihood {} (start {})", result.log_lik, result.best_start + 1);
            FitFile {
                schema_version: SCHEMA_VERSION,
                manifest: manifest.clone(),
                config: cfg.clone(),
                states: vec![result.state.clone()],
                deltas,
                mle: Some(result),
            }
        }
        ModeArg::Mcmc => {
            let samples = mcmc_run(&problem, &priors, &cfg.mcmc, None)?;
            write_csv(&args.out.join("chain.csv"), &manifest, |w| samples.write_chain_csv(w))?;
            write_csv(&args.out.join("delta.csv"), &manifest, |w| samples.write_delta_csv(w))?;
            #[derive(Serialize)]
            struct Summary<'a> {
                manifest: &'a Manifest,
                #[serde(flatten)]
                report: ChainReport,
            }
            let report = ChainReport::new(&samples)?;
            for a in &report.acceptance {
                println!("{} acceptance {:.3}", a.block, a.rate);
            }
            write_json(
                &args.out.join("summary.json"),
                &Summary {
                    manifest: &manifest,
                    report,
                },
            )?;
            FitFile {
                schema_version: SCHEMA_VERSION,
                manifest: manifest.clone(),
                config: cfg.clone(),
                states: (0..samples.len()).map(|i| samples.state(i)).collect(),
                deltas: samples.deltas.iter().map(|d| d.as_slice().to_vec()).collect(),
                mle: None,
            }
        }
    };
    write_json(&args.out.join("fit.json"), &fit)
}

fn read_points(path: &Path, dim: usize) -> CliResult<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(File::open(path)?);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let want: Vec<String> = (1..=dim).map(|j| format!("x{j}")).collect();
    if headers.len() < dim || headers[..dim] != want[..] {
        return Err(mscal::Error::Parse(format!("prediction inputs need columns {}", want.join(","))).into());
    }
    let mut vals = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        for j in 0..dim {
            vals.push(
                rec[j]
                    .parse::<f64>()
                    .map_err(|_| mscal::Error::Parse(format!("cannot parse '{}' as a number", &rec[j])))?,
            );
        }
    }
    if vals.is_empty() {
        return Err(mscal::Error::Parse("no prediction inputs".into()).into());
    }
    Ok(DMatrix::from_row_slice(vals.len() / dim, dim, &vals))
}

pub fn predict(args: PredictArgs) -> CliResult<()> {
    let fit: FitFile = serde_json::from_reader(File::open(&args.fit)?)?;
    if fit.schema_version != SCHEMA_VERSION {
        return Err(CliError::Usage(format!("fit schema_version {} is not supported", fit.schema_version)));
    }
    let component = Component::parse(&args.component)?;
    let problem = build_problem(&fit.config)?;
    if args.source == 0 || args.source > problem.k() {
        return Err(mscal::Error::Domain(format!("source must lie in 1..={}", problem.k())).into());
    }
    let xs = read_points(&args.at, problem.dim())?;
    let draws: Vec<(ParameterState, DVector<f64>)> = fit
        .deltas
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let s = if fit.states.len() == 1 { &fit.states[0] } else { &fit.states[i] };
            (s.clone(), DVector::from_column_slice(d))
        })
        .collect();
    let preds = average_over_draws(&problem, &draws, component, args.source - 1, &xs)?;
    #[derive(Serialize)]
    struct Request<'a> {
        fit: &'a PathBuf,
        fit_config_sha256: &'a str,
        at: &'a PathBuf,
        component: &'a str,
        source: usize,
    }
    let manifest = Manifest::new(
        "predict",
        fit.manifest.seed,
        &Request {
            fit: &args.fit,
            fit_config_sha256: &fit.manifest.config_sha256,
            at: &args.at,
            component: component.name(),
            source: args.source,
        },
    )?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let mut w = create_new(&args.out)?;
    use std::io::Write;
    w.write_all(manifest.preamble().as_bytes())?;
    write_predictions_csv(&mut w, &xs, args.source - 1, component, &preds)?;
    w.flush()?;
    Ok(())
}
