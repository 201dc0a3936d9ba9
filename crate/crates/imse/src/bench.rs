//! Wall-time scaling of the linear and quadratic attention paths.
//!
//! CSV schema: `N,mode,median_ns,per_token_ns`, one row per size and mode.
//! `median_ns` is the median time of one call over the timed repetitions;
//! warm-up calls are not timed.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use imse_core::mala::{mala_linear, mala_quadratic_rowwise, MalaInput};
use imse_core::{Rng, Tensor};
use serde::Serialize;

use crate::error::{CliError, Result};

pub const DEFAULT_SIZES: [usize; 5] = [1024, 2048, 4096, 8192, 16384];
/// Largest relative deviation the correctness gate tolerates.
pub const GATE_TOL: f64 = 1e-9;
pub const LINEAR_MAX_RATIO: f64 = 2.5;
pub const QUADRATIC_MIN_RATIO: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub sizes: Vec<usize>,
    pub d: usize,
    pub dv: usize,
    pub reps: usize,
    pub warmup: usize,
    /// Fast calls are repeated inside one timed repetition until it lasts at
    /// least this long.
    pub min_rep_ns: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            sizes: DEFAULT_SIZES.to_vec(),
            d: 4,
            dv: 4,
            reps: 20,
            warmup: 2,
            min_rep_ns: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub mode: Mode,
    pub median_ns: f64,
    pub per_token_ns: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Doubling {
    pub mode: Mode,
    pub from: usize,
    pub to: usize,
    /// `median(to) / median(from)`.
    pub ratio: f64,
}

fn random_input(n: usize, d: usize, dv: usize, rng: &mut Rng) -> Result<MalaInput> {
    let mut t = |r: usize, c: usize| Tensor::from_fn(&[r, c], |_| rng.uniform(-1.0, 1.0));
    let (q, k, v) = (t(n, d), t(n, d), t(n, dv));
    Ok(MalaInput::new(q, k, v)?)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn call(input: &MalaInput, mode: Mode) -> Result<Tensor> {
    Ok(match mode {
        Mode::Linear => mala_linear(black_box(input))?,
        Mode::Quadratic => mala_quadratic_rowwise(black_box(input))?,
    })
}

/// Calls per repetition so that one repetition lasts at least `min_rep_ns`.
fn calibrate(input: &MalaInput, mode: Mode, opts: &BenchOptions) -> Result<usize> {
    let mut slowest = 0u64;
    for _ in 0..opts.warmup.max(1) {
        let t0 = Instant::now();
        black_box(call(input, mode)?);
        slowest = slowest.max(t0.elapsed().as_nanos() as u64);
    }
    Ok((opts.min_rep_ns / slowest.max(1)).max(1) as usize)
}

fn time_once(input: &MalaInput, mode: Mode, inner: usize) -> Result<f64> {
    let t0 = Instant::now();
    for _ in 0..inner {
        black_box(call(input, mode)?);
    }
    Ok(t0.elapsed().as_nanos() as f64 / inner as f64)
}

/// Checks that both paths agree on a fresh instance of size `n`.
pub fn correctness_gate(n: usize, d: usize, dv: usize, rng: &mut Rng) -> Result<f64> {
    let input = random_input(n, d, dv, rng)?;
    let err = mala_linear(&input)?.rel_diff(&mala_quadratic_rowwise(&input)?)?;
    if !(err <= GATE_TOL) {
        return Err(CliError::Tolerance(format!(
            "N = {n}: linear and quadratic outputs differ by {err:e} (relative), over {GATE_TOL:e}"
        )));
    }
    Ok(err)
}

/// Runs the gate at every size, then times both modes. Each round times
/// every (size, mode) pair once. Rows are ordered by size, linear before
/// quadratic.
pub fn run_bench(opts: &BenchOptions, rng: &mut Rng) -> Result<Vec<BenchRow>> {
    for &n in &opts.sizes {
        correctness_gate(n, opts.d, opts.dv, rng)?;
    }
    let mut cases = Vec::new();
    for &n in &opts.sizes {
        let input = random_input(n, opts.d, opts.dv, rng)?;
        for mode in [Mode::Linear, Mode::Quadratic] {
            let inner = calibrate(&input, mode, opts)?;
            cases.push((n, mode, inner, input.clone()));
        }
    }
    let mut samples = vec![Vec::with_capacity(opts.reps); cases.len()];
    for _ in 0..opts.reps.max(1) {
        for ((_, mode, inner, input), out) in cases.iter().zip(&mut samples) {
            out.push(time_once(input, *mode, *inner)?);
        }
    }
    Ok(cases
        .iter()
        .zip(&mut samples)
        .map(|(&(n, mode, _, _), s)| {
            let median_ns = median(s);
            BenchRow {
                n,
                mode,
                median_ns,
                per_token_ns: median_ns / n as f64,
            }
        })
        .collect())
}

/// Ratio of median times between consecutive sizes of each mode.
pub fn doubling_ratios(rows: &[BenchRow]) -> Vec<Doubling> {
    let mut out = Vec::new();
    for mode in [Mode::Linear, Mode::Quadratic] {
        let series: Vec<&BenchRow> = rows.iter().filter(|r| r.mode == mode).collect();
        for w in series.windows(2) {
            out.push(Doubling {
                mode,
                from: w[0].n,
                to: w[1].n,
                ratio: w[1].median_ns / w[0].median_ns,
            });
        }
    }
    out
}

/// True when every linear ratio is at most 2.5 and every quadratic ratio at
/// least 3.0. Only meaningful for sizes that double.
pub fn scaling_ok(ratios: &[Doubling]) -> bool {
    ratios.iter().all(|r| match r.mode {
        Mode::Linear => r.ratio <= LINEAR_MAX_RATIO,
        Mode::Quadratic => r.ratio >= QUADRATIC_MIN_RATIO,
    })
}

pub fn write_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
