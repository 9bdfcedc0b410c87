//! Timing and multiply-add counts of lambda versus softmax attention on
//! random inputs, the measurements behind the linear-cost claim.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{count_flops_lambda, count_flops_naive, lambda_attention, naive_attention};
use crate::error::{Error, Result};
use crate::flops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Lambda,
    Naive,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Lambda => "lambda",
            BenchMode::Naive => "naive",
        })
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(BenchMode::Lambda),
            "naive" => Ok(BenchMode::Naive),
            _ => Err(Error::Argument(format!("unknown bench mode `{s}` (expected lambda or naive)"))),
        }
    }
}

/// Attention sizes held fixed while `N` varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchShape {
    /// Neighbours per point seen by lambda attention.
    pub k: usize,
    pub c_k: usize,
    pub c_v: usize,
    pub heads: usize,
}

impl Default for BenchShape {
    fn default() -> Self {
        BenchShape {
            k: 16,
            c_k: 32,
            c_v: 16,
            heads: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub mode: BenchMode,
    /// Counted multiply-adds of one run.
    pub flops: u64,
    /// Median wall time over the runs.
    pub wall_ms: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "N,mode,flops,wall_ms";

    pub fn csv(&self) -> String {
        format!("{},{},{},{:.6}", self.n, self.mode, self.flops, self.wall_ms)
    }
}

/// Closed-form multiply-adds for `n` points.
pub fn expected_flops(mode: BenchMode, n: usize, dims: &BenchShape) -> u64 {
    let (n, k, c_k, c_v, h) = (n as u64, dims.k as u64, dims.c_k as u64, dims.c_v as u64, dims.heads as u64);
    match mode {
        BenchMode::Lambda => count_flops_lambda(n, k, c_k, c_v, h),
        BenchMode::Naive => count_flops_naive(n, c_k, c_v),
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Runs the attention core `runs` times on seeded random inputs of `n`
/// points. Lambda attention sees `K` neighbours per point; the softmax
/// baseline attends over all `n`.
pub fn bench_attention(mode: BenchMode, n: usize, dims: &BenchShape, runs: usize, seed: u64) -> Result<BenchRow> {
    if n == 0 || runs == 0 {
        return Err(Error::Argument("bench needs n > 0 and at least one run".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, c_k, c_v, h) = (dims.k, dims.c_k, dims.c_v, dims.heads);
    let (q, keys, values) = match mode {
        BenchMode::Lambda => (random(&[n, h * c_k], &mut rng), random(&[n, k, c_k], &mut rng), random(&[n, k, c_v], &mut rng)),
        BenchMode::Naive => (random(&[n, c_k], &mut rng), random(&[n, c_k], &mut rng), random(&[n, c_v], &mut rng)),
    };
    let mut times = Vec::with_capacity(runs);
    let mut flops = 0;
    for _ in 0..runs {
        let start = Instant::now();
        let (out, counted) = flops::measure(|| match mode {
            BenchMode::Lambda => lambda_attention(&q, &keys, &values, h),
            BenchMode::Naive => naive_attention(&q, &keys, &values),
        });
        times.push(start.elapsed().as_secs_f64() * 1e3);
        out?;
        flops = counted;
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchRow {
        n,
        mode,
        flops,
        wall_ms: times[times.len() / 2],
    })
}

/// Least-squares slope of `log(time)` against `log(n)`.
pub fn fit_exponent(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.n as f64).ln(), r.wall_ms.max(1e-9).ln())).collect();
    let m = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / m, pts.iter().map(|p| p.1).sum::<f64>() / m);
    let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> BenchShape {
        BenchShape::default()
    }

    #[test]
    fn counted_flops_match_closed_forms() {
        for mode in [BenchMode::Lambda, BenchMode::Naive] {
            for n in [32, 100] {
                let row = bench_attention(mode, n, &dims(), 1, 0).unwrap();
                assert_eq!(row.flops, expected_flops(mode, n, &dims()));
            }
        }
    }

    #[test]
    fn doubling_n_doubles_lambda_and_quadruples_naive() {
        let d = dims();
        assert_eq!(expected_flops(BenchMode::Lambda, 512, &d), 2 * expected_flops(BenchMode::Lambda, 256, &d));
        assert_eq!(expected_flops(BenchMode::Naive, 512, &d), 4 * expected_flops(BenchMode::Naive, 256, &d));
    }

    #[test]
    fn exponent_of_a_power_law() {
        let rows: Vec<BenchRow> = [100usize, 200, 400]
            .iter()
            .map(|&n| BenchRow { n, mode: BenchMode::Naive, flops: 0, wall_ms: 3.0 * (n as f64).powi(2) })
            .collect();
        assert!((fit_exponent(&rows) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn csv_and_mode_names() {
        let r = BenchRow { n: 256, mode: BenchMode::Lambda, flops: 10, wall_ms: 1.5 };
        assert_eq!(r.csv(), "256,lambda,10,1.500000");
        assert_eq!("naive".parse::<BenchMode>().unwrap(), BenchMode::Naive);
        assert!("fast".parse::<BenchMode>().is_err());
    }
}
