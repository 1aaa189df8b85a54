use std::path::Path;
use std::time::Instant;

use mscal::data::{grid_sidecar, write_grid_csv, GridSidecar};
use mscal::experiments::{
    run_example1, run_example2_study, run_example3, run_mogi, simulate_mogi_images, split_seed, write_rows_csv,
    Example1Config, Example2Study, Example3Config, Manifest, MogiConfig,
};
use serde::Serialize;

use crate::args::{Experiment, SimulateArgs};
use crate::config;
use crate::files::{create_new, ensure_dir, write_csv, write_json};
use crate::{CliError, CliResult};

fn reject(args: &SimulateArgs, allowed: &[&str]) -> CliResult<()> {
    let given = [
        ("--replicates", args.replicates.is_some()),
        ("--reps", args.reps.is_some()),
        ("--n-grid", args.n_grid.is_some()),
        ("--k", args.k.is_some()),
        ("--full-scale", args.full_scale),
    ];
    for (flag, set) in given {
        if set && !allowed.contains(&flag) {
            return Err(CliError::Usage(format!("{flag} does not apply to {}", args.experiment.name())));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    #[serde(flatten)]
    manifest: &'a Manifest,
    rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_seconds: Option<f64>,
}

fn write_table<S: Serialize>(
    args: &SimulateArgs,
    manifest: &Manifest,
    rows: &[S],
    started: Instant,
) -> CliResult<()> {
    let name = args.experiment.name();
    let mut w = create_new(&args.out.join(format!("{name}.csv")))?;
    write_rows_csv(&mut w, manifest, rows)?;
    write_json(
        &args.out.join(format!("{name}.manifest.json")),
        &RunManifest {
            manifest,
            rows: rows.len(),
            elapsed_seconds: args.timings.then(|| started.elapsed().as_secs_f64()),
        },
    )
}

fn write_images(out: &Path, cfg: &MogiConfig, manifest: &Manifest) -> CliResult<()> {
    #[derive(Serialize)]
    struct Sidecar<'a> {
        #[serde(flatten)]
        grid: GridSidecar,
        manifest: &'a Manifest,
    }
    // Same images as replicate 0 of the mogi study.
    let images = simulate_mogi_images(cfg, split_seed(split_seed(cfg.seed, 0), 0))?;
    for (l, img) in images.iter().enumerate() {
        let csv = out.join(format!("source{}.csv", l + 1));
        write_csv(&csv, manifest, |w| write_grid_csv(w, img))?;
        write_json(
            &csv.with_extension("json"),
            &Sidecar {
                grid: grid_sidecar(img),
                manifest,
            },
        )?;
    }
    Ok(())
}

pub fn run(args: SimulateArgs) -> CliResult<()> {
    ensure_dir(&args.out)?;
    let started = Instant::now();
    let command = format!("simulate {}", args.experiment.name());
    match args.experiment {
        Experiment::Example1 => {
            reject(&args, &["--reps", "--n-grid"])?;
            let mut cfg: Example1Config = config::load(args.config.as_deref())?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(r) = args.reps {
                cfg.reps = r;
            }
            if let Some(g) = &args.n_grid {
                cfg.n_grid = g.clone();
            }
            let manifest = Manifest::new(&command, cfg.seed, &cfg)?;
            let rows = run_example1(&cfg)?;
            for r in &rows {
                println!("n={} mse={:.5} limit={:.5}", r.n, r.mse, r.limit);
            }
            write_table(&args, &manifest, &rows, started)
        }
        Experiment::Example2 => {
            reject(&args, &["--replicates"])?;
            let mut cfg: Example2Study = config::load(args.config.as_deref())?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(r) = args.replicates {
                cfg.replicates = r;
            }
            let manifest = Manifest::new(&command, cfg.seed, &cfg)?;
            let rows = run_example2_study(&cfg)?;
            write_table(&args, &manifest, &rows, started)
        }
        Experiment::Example3 => {
            reject(&args, &["--replicates", "--k", "--full-scale"])?;
            let mut cfg: Example3Config = config::load(args.config.as_deref())?;
            if args.full_scale {
                cfg = cfg.full_scale();
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(r) = args.replicates {
                cfg.replicates = r;
            }
            if let Some(k) = args.k {
                cfg.k = k;
            }
            let manifest = Manifest::new(&command, cfg.seed, &cfg)?;
            let rows = run_example3(&cfg)?;
            write_table(&args, &manifest, &rows, started)
        }
        Experiment::Mogi => {
            reject(&args, &["--replicates"])?;
            let mut cfg: MogiConfig = config::load(args.config.as_deref())?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(r) = args.replicates {
                cfg.replicates = r;
            }
            let manifest = Manifest::new(&command, cfg.seed, &cfg)?;
            let rows = run_mogi(&cfg)?;
            write_table(&args, &manifest, &rows, started)
        }
        Experiment::MogiImages => {
            reject(&args, &[])?;
            let mut cfg: MogiConfig = config::load(args.config.as_deref())?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            let manifest = Manifest::new(&command, cfg.seed, &cfg)?;
            write_images(&args.out, &cfg, &manifest)
        }
    }
}
