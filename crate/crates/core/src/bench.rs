//! Nonlinear-layer timing: warm-up plus trimmed-mean protocol, cost records
//! and a least-squares line fit of time against sample count.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::adaptive::{adaptive_nonlinearity, build_generator, generate_a};
use crate::bundle::FieldBundle;
use crate::diagnostics::pairwise_sum;
use crate::error::{Error, Result};
use crate::fourier::{fourier_nonlinearity, sampling_matrix, FtMode};
use crate::harmonics::dim;
use crate::reptypes::{FieldType, Kind};
use crate::rotations::{repulsion_grid, RepulsionParams, Space};

/// Untimed repetitions before measurement starts.
pub const WARMUP_RUNS: usize = 10;
/// Timed repetitions; the slowest and fastest are discarded.
pub const TIMED_RUNS: usize = 11;

/// Mean of `timed` without its single highest and single lowest entry.
pub fn trimmed_mean(timed: &[f64]) -> Result<f64> {
    if timed.len() < TIMED_RUNS {
        return Err(Error::InvalidInput(format!(
            "{} timed runs, at least {TIMED_RUNS} are required",
            timed.len()
        )));
    }
    let mut s = timed.to_vec();
    s.sort_by(f64::total_cmp);
    let kept = &s[1..s.len() - 1];
    Ok(pairwise_sum(kept) / kept.len() as f64)
}

/// Applies the protocol to a full sequence of per-run timings, warm-up
/// included.
pub fn protocol_from_timings(all: &[f64]) -> Result<f64> {
    if all.len() < WARMUP_RUNS + TIMED_RUNS {
        return Err(Error::InvalidInput(format!(
            "{} runs, the protocol needs {WARMUP_RUNS} warm-up and {TIMED_RUNS} timed runs",
            all.len()
        )));
    }
    trimmed_mean(&all[WARMUP_RUNS..])
}

/// Runs `run` `WARMUP_RUNS + TIMED_RUNS` times and returns the trimmed mean
/// wall time of the timed runs in milliseconds.
pub fn runtime_protocol(mut run: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(WARMUP_RUNS + TIMED_RUNS);
    for _ in 0..WARMUP_RUNS + TIMED_RUNS {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    protocol_from_timings(&times)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub layer: String,
    /// Samples per channel.
    pub n: usize,
    /// Channels per point.
    pub c: usize,
    /// Fourier coefficients per channel.
    pub f: usize,
    /// Spatial points.
    pub m: usize,
    pub wall_ms: f64,
    /// Size of the sampled activation buffer, `N·c·m` doubles.
    pub buffer_bytes: u64,
}

pub fn buffer_bytes(n: usize, c: usize, m: usize) -> u64 {
    (n * c * m * std::mem::size_of::<f64>()) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput("a line fit needs at least two (x, y) pairs".into()));
    }
    let n = x.len() as f64;
    let mx = pairwise_sum(x) / n;
    let my = pairwise_sum(y) / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("line fit over a single x value".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub field_type: FieldType,
    pub channels: usize,
    pub points: usize,
    pub sweep: Vec<usize>,
    pub activation: Activation,
    pub ft_mode: FtMode,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            field_type: FieldType::quotient(3).expect("valid"),
            channels: 16,
            points: 64,
            sweep: vec![8, 16, 32, 64, 128],
            activation: Activation::Elu,
            ft_mode: FtMode::PInv,
            seed: 0,
        }
    }
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Times the fixed-grid and the adaptive nonlinearity on `points` points of
/// `channels` channels for every `N` of the sweep.
pub fn bench_layers(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.channels == 0 || cfg.points == 0 || cfg.sweep.contains(&0) {
        return Err(Error::Config("bench sizes must be positive".into()));
    }
    let t = cfg.field_type;
    let (c, m, f) = (cfg.channels, cfg.points, t.size());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let features = randn(m * c, f, &mut rng);
    let per_point: Vec<DMatrix<f64>> = (0..m).map(|p| features.rows(p * c, c).into_owned()).collect();
    let lift = FieldBundle::new((0..=t.band_limit()).map(|l| randn(m, 2 * dim(l), &mut rng)).collect())?;
    let in_type: Vec<_> = (0..=t.band_limit()).map(|l| (l, 2)).collect();
    let space = match t.kind() {
        Kind::Quotient => Space::Sphere,
        Kind::Regular => Space::Group,
    };
    let mut out = Vec::new();
    for &n in &cfg.sweep {
        let grid = repulsion_grid(
            space,
            n,
            RepulsionParams {
                seed: cfg.seed,
                ..RepulsionParams::default()
            },
        )?;
        let a = sampling_matrix(&t, &grid, true)?;
        let fixed = runtime_protocol(|| {
            std::hint::black_box(fourier_nonlinearity(&a, &features, cfg.activation, cfg.ft_mode)?);
            Ok(())
        })?;
        let g = build_generator(&in_type, &t, n, cfg.seed)?;
        let adaptive_a = generate_a(&g, &lift)?;
        let adaptive = runtime_protocol(|| {
            std::hint::black_box(adaptive_nonlinearity(&adaptive_a, &per_point, cfg.activation)?);
            Ok(())
        })?;
        for (layer, wall_ms) in [("fourier_fixed", fixed), ("adaptive", adaptive)] {
            out.push(BenchRecord {
                layer: layer.into(),
                n,
                c,
                f,
                m,
                wall_ms,
                buffer_bytes: buffer_bytes(n, c, m),
            });
        }
    }
    Ok(out)
}

/// Per-layer line fit of wall time against `N`.
pub fn fit_by_layer(records: &[BenchRecord]) -> Result<Vec<(String, LinearFit)>> {
    let mut layers: Vec<String> = Vec::new();
    for r in records {
        if !layers.contains(&r.layer) {
            layers.push(r.layer.clone());
        }
    }
    layers
        .into_iter()
        .map(|layer| {
            let (x, y): (Vec<f64>, Vec<f64>) = records
                .iter()
                .filter(|r| r.layer == layer)
                .map(|r| (r.n as f64, r.wall_ms))
                .unzip();
            Ok((layer, linear_fit(&x, &y)?))
        })
        .collect()
}

pub fn records_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from("layer,n,c,f,m,wall_ms,buffer_bytes\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.layer, r.n, r.c, r.f, r.m, r.wall_ms, r.buffer_bytes);
    }
    s
}

pub fn fits_csv(fits: &[(String, LinearFit)]) -> String {
    let mut s = String::from("layer,slope_ms_per_sample,intercept_ms,r_squared\n");
    for (layer, f) in fits {
        let _ = writeln!(s, "{layer},{},{},{}", f.slope, f.intercept, f.r_squared);
    }
    s
}
