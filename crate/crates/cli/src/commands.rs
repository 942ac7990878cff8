//! The five subcommands. Every file goes through [`Output`], which only
//! writes below the configured directory.

use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use equifourier::bench::{bench_layers, fit_by_layer, fits_csv, records_csv};
use equifourier::data::gen_tetris;
use equifourier::diagnostics::{median, ortho_report};
use equifourier::equivariance::{adaptive_layer_errors, fixed_layer_errors};
use equifourier::fourier::{sampling_matrix, FtMode};
use equifourier::model::train::{logit_invariance, metrics_csv, train};
use equifourier::model::{FixedGrid, Model, ModelConfig, Nonlinearity, PointCloud};
use equifourier::reptypes::Kind;
use equifourier::rotations::{cubic_group, format_sig17, repulsion_grid, Grid, RepulsionParams, Space};
use equifourier::{Error, Result};

use crate::config::{ModelKind, RunConfig};

pub struct Output {
    root: PathBuf,
}

impl Output {
    pub fn new(root: &Path) -> Self {
        Output { root: root.to_path_buf() }
    }

    /// Writes `contents` to `rel` below the output directory; `rel` must be
    /// a plain relative path.
    pub fn write(&self, rel: &str, contents: &str) -> Result<PathBuf> {
        let p = Path::new(rel);
        if rel.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(Error::InvalidInput(format!("refusing to write to {rel:?}")));
        }
        let path = self.root.join(p);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        Ok(path)
    }
}

fn space_of(cfg: &RunConfig) -> Space {
    match cfg.field_type.kind() {
        Kind::Quotient => Space::Sphere,
        Kind::Regular => Space::Group,
    }
}

fn space_name(s: Space) -> &'static str {
    match s {
        Space::Sphere => "sphere",
        Space::Group => "group",
    }
}

fn repulsion(cfg: &RunConfig, n: usize, seed: u64) -> Result<Grid> {
    repulsion_grid(
        space_of(cfg),
        n,
        RepulsionParams {
            steps: cfg.repulsion_steps,
            step_size: cfg.repulsion_step_size,
            seed,
        },
    )
}

/// `(label, N, seed, grid)` for every grid the sweep asks for. The cubic
/// grid has a single entry and no seed.
fn sweep_grids(cfg: &RunConfig) -> Result<Vec<(String, usize, Option<u64>, Grid)>> {
    match cfg.grid {
        FixedGrid::Cubic => Ok(vec![("cubic".into(), 24, None, cubic_group())]),
        FixedGrid::Repulsion => {
            let mut out = Vec::new();
            for &n in &cfg.n_sweep {
                for &seed in &cfg.seeds {
                    out.push((space_name(space_of(cfg)).into(), n, Some(seed), repulsion(cfg, n, seed)?));
                }
            }
            Ok(out)
        }
    }
}

fn seed_field(s: Option<u64>) -> String {
    s.map(|v| v.to_string()).unwrap_or_default()
}

/// Runs `cells` on up to `parallel` threads; results keep the input order.
fn run_cells<T: Sync, R: Send>(cells: &[T], parallel: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let r = f(&cells[i]);
                *slots[i].lock().expect("no poisoned slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("no poisoned slot").expect("every cell ran"))
        .collect()
}

pub fn grid(cfg: &RunConfig, out: &Output) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut stats = String::from("grid,n,seed,min_distance,mean_nearest_distance\n");
    for (label, n, seed, g) in sweep_grids(cfg)? {
        let name = match seed {
            Some(s) => format!("grids/{label}_n{n}_seed{s}.json"),
            None => format!("grids/{label}.json"),
        };
        written.push(out.write(&name, &g.to_json())?);
        let _ = writeln!(
            stats,
            "{label},{n},{},{},{}",
            seed_field(seed),
            format_sig17(g.min_pairwise_distance()),
            format_sig17(g.mean_nearest_distance())
        );
    }
    written.push(out.write("grid_stats.csv", &stats)?);
    Ok(written)
}

pub fn diag(cfg: &RunConfig, out: &Output) -> Result<Vec<PathBuf>> {
    let mut csv = String::from("grid,n,seed,f,eps1,eps2_normalized,eps2_unnormalized\n");
    for (label, n, seed, g) in sweep_grids(cfg)? {
        let r = ortho_report(&sampling_matrix(&cfg.field_type, &g, true)?);
        let _ = writeln!(
            csv,
            "{label},{n},{},{},{},{},{}",
            seed_field(seed),
            r.f,
            format_sig17(r.eps1),
            format_sig17(r.eps2_normalized),
            format_sig17(r.eps2_unnormalized)
        );
    }
    Ok(vec![out.write("diag.csv", &csv)?])
}

fn model_config(cfg: &RunConfig, kind: ModelKind, n: Option<usize>, seed: u64) -> ModelConfig {
    let nonlinearity = match (kind, n) {
        (ModelKind::FourierFixed, Some(samples)) => Nonlinearity::FourierFixed {
            samples,
            grid: cfg.grid,
        },
        (ModelKind::Adaptive, Some(samples)) => Nonlinearity::Adaptive { samples },
        (ModelKind::Norm, _) => Nonlinearity::Norm,
        (ModelKind::Gated, _) => Nonlinearity::Gated,
        (_, None) => unreachable!("sampled models always get a sample count"),
    };
    ModelConfig {
        nonlinearity,
        seed,
        ..cfg.model.clone()
    }
}

/// `(kind, N, seed)` cells; models without samples get a single `N = None`.
fn model_cells(cfg: &RunConfig, sweep: &[usize]) -> Vec<(ModelKind, Option<usize>, u64)> {
    let mut cells = Vec::new();
    for &kind in &cfg.models {
        let ns: Vec<Option<usize>> = if !kind.uses_samples() {
            vec![None]
        } else if kind == ModelKind::FourierFixed && cfg.grid == FixedGrid::Cubic {
            vec![Some(24)]
        } else {
            sweep.iter().map(|&n| Some(n)).collect()
        };
        for n in ns {
            for &seed in &cfg.seeds {
                cells.push((kind, n, seed));
            }
        }
    }
    cells
}

fn opt_field(n: Option<usize>) -> String {
    n.map(|v| v.to_string()).unwrap_or_default()
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

pub fn equivariance(cfg: &RunConfig, out: &Output, parallel: usize) -> Result<Vec<PathBuf>> {
    let e = &cfg.equivariance;
    let cube = cubic_group().rotations();
    let mut csv = String::from("target,nonlinearity,n,seed,median_error,max_error\n");
    let mut row = |target: &str, name: &str, n: Option<usize>, seed: Option<u64>, errs: &[f64]| {
        let _ = writeln!(
            csv,
            "{target},{name},{},{},{},{}",
            opt_field(n),
            seed_field(seed),
            format_sig17(median(errs)),
            format_sig17(max_of(errs))
        );
    };
    for (_, n, seed, g) in sweep_grids(cfg)? {
        let a = sampling_matrix(&cfg.field_type, &g, true)?;
        let errs = fixed_layer_errors(&a, cfg.activation, FtMode::PInv, e.inputs, e.channels, &cube, seed.unwrap_or(0))?;
        row("layer", "fourier_fixed", Some(n), seed, &errs);
    }
    for &n in &cfg.n_sweep {
        for &seed in &cfg.seeds {
            let errs = adaptive_layer_errors(
                &cfg.field_type,
                n,
                cfg.activation,
                e.inputs,
                e.points,
                e.channels,
                &cube,
                seed,
            )?;
            row("layer", "adaptive", Some(n), Some(seed), &errs);
        }
    }
    let cells = model_cells(cfg, &cfg.n_sweep);
    let results = run_cells(&cells, parallel, |&(kind, n, seed)| {
        let model = Model::init(model_config(cfg, kind, n, seed))?;
        let data = gen_tetris(1, cfg.data.jitter, seed)?;
        let clouds: Vec<&PointCloud> = data.test.iter().take(e.clouds).map(|s| &s.cloud).collect();
        clouds
            .iter()
            .map(|c| logit_invariance(&model, c, &cube))
            .collect::<Result<Vec<_>>>()
    })?;
    for ((kind, n, seed), errs) in cells.iter().zip(&results) {
        row("model", kind.name(), *n, Some(*seed), errs);
    }
    Ok(vec![out.write("equivariance.csv", &csv)?])
}

pub fn train_all(cfg: &RunConfig, out: &Output, parallel: usize) -> Result<Vec<PathBuf>> {
    let cells = model_cells(cfg, &cfg.train_sweep);
    let results = run_cells(&cells, parallel, |&(kind, n, seed)| {
        let start = std::time::Instant::now();
        let data = gen_tetris(cfg.data.n_per_class, cfg.data.jitter, seed)?;
        let mut model = Model::init(model_config(cfg, kind, n, seed))?;
        let train_cfg = equifourier::model::train::TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let history = train(&mut model, &data, &train_cfg)?;
        let stem = match n {
            Some(n) => format!("train/{}_n{n}_seed{seed}", kind.name()),
            None => format!("train/{}_seed{seed}", kind.name()),
        };
        let checkpoint = serde_json::to_string(&model.checkpoint())?;
        let files = vec![
            out.write(&format!("{stem}.checkpoint.json"), &checkpoint)?,
            out.write(&format!("{stem}.metrics.csv"), &metrics_csv(&history))?,
        ];
        let last = history.last().cloned();
        Ok((files, last, start.elapsed().as_secs_f64() * 1e3))
    })?;
    let mut summary = String::from("model,n,seed,test_accuracy,invariance_error,wall_ms\n");
    let mut written = Vec::new();
    for ((kind, n, seed), (files, last, ms)) in cells.iter().zip(results) {
        written.extend(files);
        let (acc, inv) = last.map_or((f64::NAN, f64::NAN), |m| (m.test_accuracy, m.invariance_error));
        let _ = writeln!(summary, "{},{},{seed},{acc},{inv},{ms:.1}", kind.name(), opt_field(*n));
    }
    written.push(out.write("train_summary.csv", &summary)?);
    Ok(written)
}

pub fn bench(cfg: &RunConfig, out: &Output) -> Result<Vec<PathBuf>> {
    let records = bench_layers(&cfg.bench)?;
    let fits = fit_by_layer(&records)?;
    for (layer, f) in &fits {
        println!("{layer}: {:.4} ms per sample, R² {:.4}", f.slope, f.r_squared);
    }
    Ok(vec![
        out.write("bench.csv", &records_csv(&records))?,
        out.write("bench_fit.csv", &fits_csv(&fits))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_refuses_escaping_paths() {
        let dir = tempfile::tempdir().unwrap();
        let out = Output::new(dir.path());
        assert!(out.write("../x.csv", "").is_err());
        assert!(out.write("/tmp/x.csv", "").is_err());
        out.write("a/b.csv", "x").unwrap();
        assert!(dir.path().join("a/b.csv").exists());
    }

    #[test]
    fn cells_keep_their_order_in_parallel() {
        let cells: Vec<usize> = (0..20).collect();
        let r = run_cells(&cells, 4, |&i| Ok(i * i)).unwrap();
        assert_eq!(r, cells.iter().map(|i| i * i).collect::<Vec<_>>());
        let err = run_cells(&cells, 3, |&i| if i == 7 { Err(Error::Config("x".into())) } else { Ok(i) });
        assert!(err.is_err());
    }

    #[test]
    fn samples_free_models_get_one_cell_per_seed() {
        let cfg = RunConfig {
            models: vec![ModelKind::Norm, ModelKind::Adaptive],
            seeds: vec![0, 1],
            ..RunConfig::default()
        };
        let cells = model_cells(&cfg, &[2, 8, 64]);
        assert_eq!(cells.len(), 2 + 6);
        assert_eq!(cells[0], (ModelKind::Norm, None, 0));
    }
}
