//! Wall-clock scaling of the two token mixers: the selective scan and
//! single-window (full) self-attention over a length-`L` sequence.

use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ScanDims, ScanInputs};
use crate::tensor::{flops, Tensor};

pub const CSV_HEADER: &str = "mixer,L,flops,median_ns,slope";
pub const MIXERS: [&str; 2] = ["scan", "attention"];
pub const SCAN_STATE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mixer: &'static str,
    pub len: usize,
    pub flops: u64,
    pub median_ns: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log(median time) against log(L), per mixer.
    pub slopes: BTreeMap<&'static str, f64>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.4}\n",
                r.mixer, r.len, r.flops, r.median_ns, self.slopes[r.mixer]
            ));
        }
        out
    }
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Lengths must ascend and span at least 16× over at least 4 points.
pub fn validate_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.len() < 4 {
        return Err(Error::Config(format!("need at least 4 lengths, got {}", lengths.len())));
    }
    if lengths[0] == 0 || lengths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("lengths {lengths:?} must be positive and strictly ascending")));
    }
    if lengths[lengths.len() - 1] < 16 * lengths[0] {
        return Err(Error::Config(format!("lengths {lengths:?} must span at least 16x")));
    }
    Ok(())
}

struct Operands {
    u: Vec<f64>,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn operands(dim: usize, len: usize, rng: &mut ChaCha8Rng) -> Operands {
    let n = SCAN_STATE;
    let r = |shape: Vec<usize>, rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng).into_data();
    Operands {
        u: r(vec![dim, len], rng),
        delta: Tensor::rand_uniform(vec![dim, len], 0.001, 0.1, rng).into_data(),
        a: (0..dim * n).map(|i| -((i % n) as f64 + 1.0)).collect(),
        b: r(vec![n, len], rng),
        c: r(vec![n, len], rng),
        d: vec![1.0; dim],
        q: r(vec![len, dim], rng),
        k: r(vec![len, dim], rng),
        v: r(vec![len, dim], rng),
    }
}

fn run(mixer: &str, ops: &Operands, dim: usize, len: usize) -> Vec<f64> {
    match mixer {
        "scan" => kernels::selective_scan(
            ScanInputs {
                u: &ops.u,
                delta: &ops.delta,
                a: &ops.a,
                b: &ops.b,
                c: &ops.c,
                d: &ops.d,
            },
            ScanDims {
                batch: 1,
                channels: dim,
                len,
                state: SCAN_STATE,
            },
            None,
        ),
        _ => kernels::attention(&ops.q, &ops.k, &ops.v, len, dim),
    }
}

/// Median-of-`repeats` timings for both mixers at every length.
pub fn run_bench(dim: usize, lengths: &[usize], repeats: usize) -> Result<BenchReport> {
    validate_lengths(lengths)?;
    if dim == 0 || repeats == 0 {
        return Err(Error::Config("dims and repeats must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::new();
    for &len in lengths {
        let ops = operands(dim, len, &mut rng);
        for mixer in MIXERS {
            let (_, count) = flops::measure(|| black_box(run(mixer, &ops, dim, len)));
            let mut times: Vec<u128> = (0..repeats)
                .map(|_| {
                    let start = Instant::now();
                    black_box(run(mixer, black_box(&ops), dim, len));
                    start.elapsed().as_nanos()
                })
                .collect();
            times.sort_unstable();
            rows.push(BenchRow {
                mixer,
                len,
                flops: count,
                median_ns: times[times.len() / 2].max(1),
            });
        }
    }
    let slopes = MIXERS
        .iter()
        .map(|&m| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.mixer == m)
                .map(|r| (r.len as f64, r.median_ns as f64))
                .unzip();
            (m, loglog_slope(&xs, &ys))
        })
        .collect();
    Ok(BenchReport { rows, slopes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_laws() {
        let xs = [256.0, 512.0, 1024.0, 2048.0];
        let lin: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let quad: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
        assert!((loglog_slope(&xs, &lin) - 1.0).abs() < 1e-12);
        assert!((loglog_slope(&xs, &quad) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn length_contract() {
        assert!(validate_lengths(&[16, 32, 64, 256]).is_ok());
        assert!(validate_lengths(&[16, 32, 64]).is_err());
        assert!(validate_lengths(&[16, 32, 32, 256]).is_err());
        assert!(validate_lengths(&[16, 32, 64, 128]).is_err());
    }

    #[test]
    fn small_run_has_exact_flop_ratios() {
        let r = run_bench(4, &[8, 16, 32, 128], 1).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("mixer,L,flops,median_ns,slope\n"));
        assert_eq!(csv.lines().count(), 9);
        let f = |m: &str, l: usize| r.rows.iter().find(|x| x.mixer == m && x.len == l).unwrap().flops;
        assert_eq!(f("scan", 16), 2 * f("scan", 8));
        assert_eq!(f("attention", 16), 4 * f("attention", 8));
    }
}
