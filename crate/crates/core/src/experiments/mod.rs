//! Scripted simulation studies and the shared plumbing for their outputs.
//!
//! Seeds: replicate `i` of a run with master seed `s` uses
//! [`split_seed`]`(s, i)`, the first word of ChaCha8 stream `i` keyed by
//! `s`. Within a replicate the same rule splits further by purpose.

mod example1;
mod example2;
mod example3;
mod mogi;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::kernels::{build_correlation_matrix, KernelSpec};

pub use example1::{run_example1, sample_limiting_stack, Example1Config, Example1Row};
pub use example2::{
    example2_data, fit_example2, run_example2, run_example2_study, Example2Config, Example2Data, Example2Row,
    Example2Study,
};
pub use example3::{
    estimate_example3, run_example3, run_example3_replicate, simulate_example3, Example3Config, Example3Row,
    Example3Truth, Method,
};
pub use mogi::{mogi_problem, run_mogi, run_mogi_replicate, simulate_mogi_images, MogiConfig, MogiRow};

/// Child seed number `stream` of `master`.
pub fn split_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

/// `n` points `(i - 1) / (n - 1)` as an n-by-1 design.
pub fn equally_spaced(n: usize) -> DMatrix<f64> {
    if n == 1 {
        return DMatrix::zeros(1, 1);
    }
    DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64)
}

/// One draw of a zero-mean GaSP with variance `var` at the rows of `x`.
pub fn draw_gasp<R: Rng + ?Sized>(rng: &mut R, kernel: &KernelSpec, x: &DMatrix<f64>, var: f64) -> Result<DVector<f64>> {
    let r = build_correlation_matrix(kernel, x)?;
    let z = DVector::from_fn(x.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(r.factor().lower() * z * var.sqrt())
}

/// Random Latin hypercube of `n` points in `[0, 1]^p`.
pub fn latin_hypercube<R: Rng + ?Sized>(rng: &mut R, n: usize, p: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, p);
    for j in 0..p {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        for i in 0..n {
            x[(i, j)] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    x
}

fn min_distance(x: &DMatrix<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..x.nrows() {
        for b in a + 1..x.nrows() {
            best = best.min((x.row(a) - x.row(b)).norm());
        }
    }
    best
}

/// The best of `candidates` random Latin hypercubes by the maximin criterion.
pub fn maximin_lhs(n: usize, p: usize, candidates: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = latin_hypercube(&mut rng, n, p);
    let mut score = min_distance(&best);
    for _ in 1..candidates {
        let x = latin_hypercube(&mut rng, n, p);
        let s = min_distance(&x);
        if s > score {
            best = x;
            score = s;
        }
    }
    best
}

/// Provenance written at the top of every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Result<Self> {
        let text = serde_json::to_string(config)?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(Manifest {
            tool: "mscal".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            config: serde_json::from_str(&text)?,
        })
    }

    /// `#`-prefixed lines for the head of a CSV file.
    pub fn preamble(&self) -> String {
        format!(
            "# {} {}\n# command: {}\n# seed: {}\n# config_sha256: {}\n# config: {}\n",
            self.tool, self.version, self.command, self.seed, self.config_sha256, self.config
        )
    }
}

/// Writes the manifest preamble and then `rows` as CSV with a header.
pub fn write_rows_csv<W: Write, S: Serialize>(mut w: W, manifest: &Manifest, rows: &[S]) -> Result<()> {
    w.write_all(manifest.preamble().as_bytes())?;
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_seeds_differ_and_repeat() {
        assert_eq!(split_seed(7, 3), split_seed(7, 3));
        assert_ne!(split_seed(7, 3), split_seed(7, 4));
        assert_ne!(split_seed(7, 3), split_seed(8, 3));
    }

    #[test]
    fn latin_hypercube_has_one_point_per_stratum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = latin_hypercube(&mut rng, 12, 3);
        for j in 0..3 {
            let mut cells: Vec<usize> = x.column(j).iter().map(|v| (v * 12.0) as usize).collect();
            cells.sort();
            assert_eq!(cells, (0..12).collect::<Vec<_>>());
        }
    }

    #[test]
    fn maximin_improves_on_a_single_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let first = latin_hypercube(&mut rng, 20, 2);
        let best = maximin_lhs(20, 2, 50, 5);
        assert!(min_distance(&best) >= min_distance(&first));
    }

    #[test]
    fn manifest_hash_tracks_config() {
        let a = Manifest::new("simulate", 1, &serde_json::json!({"n": 3})).unwrap();
        let b = Manifest::new("simulate", 1, &serde_json::json!({"n": 4})).unwrap();
        assert_ne!(a.config_sha256, b.config_sha256);
        assert_eq!(a.config_sha256.len(), 64);
        assert!(a.preamble().lines().all(|l| l.starts_with("# ")));
    }
}
