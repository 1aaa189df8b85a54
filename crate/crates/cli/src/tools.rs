use std::fs::File;
use std::path::Path;

use mscal::data::{
    quadtree_downsample, read_grid_csv, stack_sources, uniform_subsample, write_observations_csv, GridSidecar,
    MultiSourceDataset,
};
use mscal::experiments::Manifest;
use mscal::verify::suites;
use serde::Serialize;

use crate::args::{DownsampleArgs, DownsampleMethod, StackArgs, VerifyArgs};
use crate::files::{ensure_dir, read_observations, sidecar_path, write_csv, write_observation_sidecar};
use crate::{CliError, CliResult};

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => ensure_dir(dir),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct DownsampleRecord<'a> {
    input: &'a Path,
    method: &'a str,
    m: Option<usize>,
    threshold: Option<f64>,
    min_box: usize,
    max_box: usize,
}

pub fn downsample(args: DownsampleArgs) -> CliResult<()> {
    let side = args.sidecar.clone().unwrap_or_else(|| sidecar_path(&args.input));
    let meta: GridSidecar = serde_json::from_reader(File::open(&side)?)?;
    let img = read_grid_csv(File::open(&args.input)?, &meta)?;
    let label = args.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let (obs, method) = match args.method {
        DownsampleMethod::Uniform => {
            let m = args
                .m
                .ok_or_else(|| CliError::Usage("uniform downsampling needs --m".into()))?;
            let mut obs = uniform_subsample(&img, m, args.seed)?;
            obs.label = label;
            (obs, "uniform")
        }
        DownsampleMethod::Quadtree => {
            let t = args
                .threshold
                .ok_or_else(|| CliError::Usage("quadtree downsampling needs --threshold".into()))?;
            let q = quadtree_downsample(&img, t, args.min_box, args.max_box)?;
            (q.to_observations(&label)?, "quadtree")
        }
    };
    let record = DownsampleRecord {
        input: &args.input,
        method,
        m: args.m,
        threshold: args.threshold,
        min_box: args.min_box,
        max_box: args.max_box,
    };
    let manifest = Manifest::new("downsample", args.seed, &record)?;
    ensure_parent(&args.out)?;
    write_csv(&args.out, &manifest, |w| write_observations_csv(w, &obs))?;
    write_observation_sidecar(&args.out, obs.look.or(img.look), &manifest)?;
    eprintln!("kept {} of {} pixels", obs.n(), img.observed_pixels().len());
    Ok(())
}

pub fn stack(args: StackArgs) -> CliResult<()> {
    let sources = args
        .data
        .iter()
        .enumerate()
        .map(|(l, p)| read_observations(p, &format!("source{}", l + 1)))
        .collect::<CliResult<Vec<_>>>()?;
    let ds = MultiSourceDataset::new(sources)?;
    let stacked = stack_sources(&ds)?;
    let manifest = Manifest::new("stack", 0, &args.data)?;
    ensure_parent(&args.out)?;
    write_csv(&args.out, &manifest, |w| write_observations_csv(w, &stacked))
}

pub fn verify(args: VerifyArgs) -> CliResult<()> {
    let reports = suites::run_all(args.seed)?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "{} {} cases={} max_error={:.3e} tolerance={:.0e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.max_error,
            r.tolerance
        );
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::Verify(format!("{failed} of {} suites failed", reports.len())));
    }
    Ok(())
}
