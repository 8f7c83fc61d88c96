//! Wall-clock timing of single-example token-mixing forward passes.
//!
//! Everything runs in `f32` on a non-recording tape, on the calling thread.
//! Inputs and parameters are built before the timed loop.

use std::hint::black_box;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops;
use crate::layers::{MixingKind, TokenMixer, TokenMixingSpec};
use crate::tensor::{Mask, Tape, Tensor};

/// Environment variables that would make matrix products multi-threaded.
pub const THREAD_VARS: [&str; 3] = [
    "MATRIXMULTIPLY_NUM_THREADS",
    "RAYON_NUM_THREADS",
    "OMP_NUM_THREADS",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub variant: MixingKind,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub d_prime: usize,
    pub h: usize,
    pub repetitions: usize,
    pub median_seconds: f64,
    pub p10_seconds: f64,
    pub p90_seconds: f64,
    pub precision: String,
    /// Closed-form count for the block, where one exists.
    pub flops: Option<u64>,
}

/// Refuses to benchmark when a thread pool larger than one is configured.
pub fn ensure_single_threaded() -> Result<()> {
    for var in THREAD_VARS {
        if let Ok(v) = std::env::var(var) {
            if v.trim().parse::<usize>().map_or(true, |n| n > 1) {
                return Err(Error::Param(format!(
                    "benchmarks are single-threaded; unset {var} (currently {v:?})"
                )));
            }
        }
    }
    Ok(())
}

/// Untimed iterations before measurement.
pub fn warmup_iterations(reps: usize) -> usize {
    (reps / 10).max(10)
}

/// Closed-form operation count of one forward pass, if there is one.
pub fn closed_form_flops(kind: MixingKind, n: usize, d: usize, d_prime: usize, h: usize) -> Option<u64> {
    let (n, d, dp, h) = (n as u64, d as u64, d_prime as u64, h as u64);
    match kind {
        MixingKind::HypermixerTied => Some(flops::flops_hypermixer(n, d, dp)),
        MixingKind::HypermixerUntied => {
            Some(flops::flops_mixing_mlp(n, d, dp) + 2 * flops::flops_hypernet_tied(n, d, dp))
        }
        MixingKind::Mlpmixer | MixingKind::SharedVector => Some(flops::flops_mixing_mlp(n, d, dp)),
        MixingKind::Attention => flops::flops_attention(n, d, h).ok(),
        MixingKind::Gmlp | MixingKind::Fnet | MixingKind::Identity => None,
    }
}

/// Times `reps` forward passes of a freshly initialised block sized to
/// accept exactly `n` tokens.
pub fn time_mixing(
    kind: MixingKind,
    n: usize,
    d: usize,
    d_prime: usize,
    h: usize,
    reps: usize,
) -> Result<TimingRecord> {
    let spec = TokenMixingSpec::new(kind, d, d_prime, n).with_heads(h);
    let mixer = TokenMixer::<f32>::new(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    time_mixer(&mixer, n, d, d_prime, h, reps)
}

/// Times an existing block; fixed-length blocks shorter than `n` fail with
/// a capacity error before any timing.
pub fn time_mixer(
    mixer: &TokenMixer<f32>,
    n: usize,
    d: usize,
    d_prime: usize,
    h: usize,
    reps: usize,
) -> Result<TimingRecord> {
    if reps == 0 || n == 0 {
        return Err(Error::Param("reps and N must be positive".into()));
    }
    ensure_single_threaded()?;
    let input = Tensor::<f32>::from_fn([1, n, d], |i| ((i * 37 % 101) as f32 - 50.0) / 50.0);
    let mask = Mask::all_valid(1, n);
    let run = || -> Result<()> {
        let tape = Tape::inference();
        let x = tape.constant(input.clone());
        black_box(mixer.token_mix(&tape, &x, &mask, None)?.value().len());
        Ok(())
    };
    run()?;
    for _ in 1..warmup_iterations(reps) {
        run()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    let kind = mixer.kind();
    Ok(TimingRecord {
        variant: kind,
        n,
        d,
        d_prime,
        h,
        repetitions: reps,
        median_seconds: percentile(&samples, 50.0),
        p10_seconds: percentile(&samples, 10.0),
        p90_seconds: percentile(&samples, 90.0),
        precision: "f32".into(),
        flops: closed_form_flops(kind, n, d, d_prime, h),
    })
}

/// Linear interpolation between closest ranks.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    if s.len() == 1 {
        return s[0];
    }
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Least-squares slope of `ln(median_seconds)` against `ln(N)`.
pub fn scaling_exponent(records: &[TimingRecord]) -> Result<f64> {
    let mut ns: Vec<usize> = records.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 4 || ns[ns.len() - 1] < 8 * ns[0] {
        return Err(Error::Param(
            "scaling fit needs at least 4 distinct N spanning a factor of 8".into(),
        ));
    }
    if records.iter().any(|r| r.median_seconds <= 0.0) {
        return Err(Error::Param("timings must be positive".into()));
    }
    let pts: Vec<(f64, f64)> = records
        .iter()
        .map(|r| ((r.n as f64).ln(), r.median_seconds.ln()))
        .collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

const HEADER: &str =
    "variant,N,d,d_prime,h,repetitions,median_seconds,p10_seconds,p90_seconds,precision,flops";

/// Writes one row per record after a `#` comment line describing the run.
pub fn emit_benchmark_csv(records: &[TimingRecord], path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let reps: Vec<String> = records.iter().map(|r| r.repetitions.to_string()).collect();
    writeln!(
        f,
        "# precision=f32 threads=1 mode=inference reps={} warmup=max(10,reps/10)",
        if reps.is_empty() {
            "-".into()
        } else {
            reps.join("/")
        }
    )
    .map_err(io)?;
    writeln!(f, "{HEADER}").map_err(io)?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{:.8e},{:.8e},{:.8e},{},{}",
            r.variant,
            r.n,
            r.d,
            r.d_prime,
            r.h,
            r.repetitions,
            r.median_seconds,
            r.p10_seconds,
            r.p90_seconds,
            r.precision,
            r.flops.map(|f| f.to_string()).unwrap_or_default()
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_benchmark_csv(path: &Path) -> Result<Vec<TimingRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| flops::csv_error(path, e))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| flops::csv_error(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize, t: f64) -> TimingRecord {
        TimingRecord {
            variant: MixingKind::HypermixerTied,
            n,
            d: 1,
            d_prime: 1,
            h: 1,
            repetitions: 1,
            median_seconds: t,
            p10_seconds: t,
            p90_seconds: t,
            precision: "f32".into(),
            flops: None,
        }
    }

    #[test]
    fn exact_power_laws() {
        let ns = [512, 1024, 2048, 4096];
        let lin: Vec<_> = ns.iter().map(|&n| record(n, 3e-6 * n as f64)).collect();
        let quad: Vec<_> = ns.iter().map(|&n| record(n, 1e-9 * (n * n) as f64)).collect();
        assert!((scaling_exponent(&lin).unwrap() - 1.0).abs() < 1e-6);
        assert!((scaling_exponent(&quad).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fit_needs_enough_spread() {
        let narrow: Vec<_> = [100, 200, 300, 400].iter().map(|&n| record(n, 1.0)).collect();
        assert!(scaling_exponent(&narrow).is_err());
        let few: Vec<_> = [100, 1000, 10000].iter().map(|&n| record(n, 1.0)).collect();
        assert!(scaling_exponent(&few).is_err());
    }

    #[test]
    fn percentiles_of_one_sample() {
        assert_eq!(percentile(&[2.5], 10.0), 2.5);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 50.0), 3.0);
        assert!((percentile(&[1.0, 2.0], 10.0) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn warmup_floor() {
        assert_eq!(warmup_iterations(1), 10);
        assert_eq!(warmup_iterations(1000), 100);
    }
}
