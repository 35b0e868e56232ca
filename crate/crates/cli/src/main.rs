use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tsvdnet_core::dataset::{build_dataset, simulate, verify_seed_domain};
use tsvdnet_core::evaluation::{check_disjoint, emit_figures, evaluate, reconstruct_dataset, Reconstructions};
use tsvdnet_core::network::train;
use tsvdnet_core::noise::derive_seed;
use tsvdnet_core::oracle::{oracle_apply, FdConfig};
use tsvdnet_core::phantom::generate_phantom;
use tsvdnet_core::pipeline::{run_pipeline, ArtifactPaths, RunReport, StageStatus, TruncationRecord};
use tsvdnet_core::regularization::select_alpha;
use tsvdnet_core::svd::svd_factorize;
use tsvdnet_core::system_matrix::{assemble_system_matrix, forward_apply};
use tsvdnet_core::{
    CoefficientImage, Dataset, Method, NetworkParams, Role, RunConfig, SvdBackend, SvdFactors, SystemMatrix,
    TruncationPolicy,
};

#[derive(Parser)]
#[command(name = "tsvdnet", version, about = "Limited-view photoacoustic reconstruction with truncated SVD and a projected residual network")]
struct Cli {
    /// TOML run configuration. Flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    side: Option<usize>,
    #[arg(long, global = true)]
    kb_radius: Option<f64>,
    #[arg(long, global = true)]
    kb_taper: Option<f64>,
    #[arg(long, global = true)]
    kb_order: Option<u32>,
    #[arg(long, global = true)]
    detectors: Option<usize>,
    #[arg(long, global = true)]
    time_samples: Option<usize>,
    #[arg(long, global = true)]
    horizon: Option<f64>,
    #[arg(long, global = true)]
    table_resolution: Option<usize>,
    #[arg(long, global = true)]
    rank_cutoff: Option<f64>,
    /// Use a randomized SVD of this rank instead of the dense factorization.
    #[arg(long, global = true)]
    randomized_rank: Option<usize>,
    #[arg(long, global = true, conflicts_with = "kept")]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    kept: Option<usize>,
    #[arg(long, global = true)]
    selection_phantoms: Option<usize>,
    #[arg(long, global = true)]
    selection_draws: Option<usize>,
    #[arg(long, global = true)]
    noise_fraction: Option<f64>,
    #[arg(long, global = true)]
    train_count: Option<usize>,
    #[arg(long, global = true)]
    test_count: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated subset of pinv, tsvd, optimal-tsvd, net.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    momentum: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    train_seed: Option<u64>,
    /// Accept noisy training data.
    #[arg(long, global = true)]
    noisy_training: bool,
    #[arg(long, global = true)]
    matrix: Option<PathBuf>,
    #[arg(long, global = true)]
    factors: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    train_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    test_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    figure_samples: Option<usize>,
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        set(&mut c.output_dir, &self.output_dir);
        set(&mut c.side, &self.side);
        set(&mut c.kb.support_radius, &self.kb_radius);
        set(&mut c.kb.taper, &self.kb_taper);
        set(&mut c.kb.order, &self.kb_order);
        set(&mut c.detectors, &self.detectors);
        set(&mut c.time_samples, &self.time_samples);
        set(&mut c.horizon, &self.horizon);
        set(&mut c.table_resolution, &self.table_resolution);
        set(&mut c.rank_cutoff, &self.rank_cutoff);
        if let Some(rank) = self.randomized_rank {
            c.svd_backend = SvdBackend::randomized(rank, c.seed);
        }
        if self.alpha.is_some() {
            c.alpha = self.alpha;
            c.kept = None;
        }
        if self.kept.is_some() {
            c.kept = self.kept;
            c.alpha = None;
        }
        set(&mut c.selection_phantoms, &self.selection_phantoms);
        set(&mut c.selection_draws, &self.selection_draws);
        set(&mut c.noise_fraction, &self.noise_fraction);
        set(&mut c.train_count, &self.train_count);
        set(&mut c.test_count, &self.test_count);
        set(&mut c.seed, &self.seed);
        set(&mut c.methods, &self.methods);
        set(&mut c.train.epochs, &self.epochs);
        set(&mut c.train.learning_rate, &self.learning_rate);
        set(&mut c.train.momentum, &self.momentum);
        set(&mut c.train.batch_size, &self.batch_size);
        set(&mut c.train.seed, &self.train_seed);
        c.train.noisy_training |= self.noisy_training;
        for (dst, src) in [
            (&mut c.matrix_path, &self.matrix),
            (&mut c.factors_path, &self.factors),
            (&mut c.model_path, &self.model),
            (&mut c.train_dir, &self.train_dir),
            (&mut c.test_dir, &self.test_dir),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        set(&mut c.figure_samples, &self.figure_samples);
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Assemble the system matrix.
    Assemble,
    /// Factorize the system matrix.
    Svd,
    /// Generate noise-free phantom datasets.
    Phantoms {
        /// Only build this role (train, validation or test).
        #[arg(long)]
        role: Option<Role>,
        /// Sample count for the chosen role.
        #[arg(long, requires = "role")]
        count: Option<usize>,
        /// Output directory for the chosen role.
        #[arg(long, requires = "role")]
        out: Option<PathBuf>,
        /// Also write every phantom as a PGM image.
        #[arg(long)]
        pgm: bool,
    },
    /// Recompute the data of a dataset with measurement noise.
    Simulate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the projected network.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruct a dataset with every configured method.
    Reconstruct {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compute the mean relative error of stored reconstructions.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare the assembled model with the finite-difference wave solver.
    Oracle {
        /// System-matrix column to compare.
        #[arg(long, conflicts_with = "phantom")]
        column: Option<usize>,
        /// Phantom seed to compare instead of a single column.
        #[arg(long)]
        phantom: Option<u64>,
        /// FD grid spacing.
        #[arg(long, default_value_t = 0.01)]
        spacing: f64,
        /// Trace CSV; defaults to `oracle.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stale stage end to end.
    Pipeline,
    /// Write reconstruction, difference and singular-value figures.
    EmitFigures {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::desk(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn in_stage<T>(stage: &str, path: &Path, r: tsvdnet_core::Result<T>) -> Result<T> {
    r.with_context(|| format!("stage {stage} failed on {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn load_matrix(paths: &ArtifactPaths) -> Result<SystemMatrix> {
    SystemMatrix::load(&paths.matrix).with_context(|| format!("loading {}", paths.matrix.display()))
}

fn load_factors(paths: &ArtifactPaths) -> Result<SvdFactors> {
    SvdFactors::load(&paths.factors).with_context(|| format!("loading {}", paths.factors.display()))
}

fn load_dataset(dir: &Path, matrix: &SystemMatrix, role: Option<Role>) -> Result<Dataset> {
    let d = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if let Some(role) = role {
        if d.role != role {
            bail!("{} holds a {} set, expected {role}", dir.display(), d.role);
        }
    }
    if d.matrix_checksum != matrix.checksum() {
        bail!("{} was simulated with a different system matrix", dir.display());
    }
    verify_seed_domain(&d)?;
    Ok(d)
}

/// Truncation from `--alpha`/`--kept`, a stored selection or a fresh one
/// on the validation phantoms.
fn resolve_policy(cfg: &RunConfig, f: &SvdFactors) -> Result<TruncationPolicy> {
    let paths = cfg.paths();
    if let Some(a) = cfg.alpha {
        return Ok(TruncationPolicy::from_alpha(f, a)?);
    }
    if let Some(k) = cfg.kept {
        return Ok(TruncationPolicy::from_kept(f, k)?);
    }
    if paths.truncation.exists() {
        let rec: TruncationRecord = serde_json::from_slice(&std::fs::read(&paths.truncation)?)?;
        return Ok(rec.policy);
    }
    if !paths.validation.exists() {
        bail!("no truncation given: pass --alpha or --kept, or build validation phantoms first");
    }
    let validation = Dataset::load(&paths.validation)?;
    verify_seed_domain(&validation)?;
    let phantoms: Vec<_> = validation.samples.into_iter().map(|s| s.x).collect();
    let sel = select_alpha(
        f,
        &phantoms,
        cfg.noise_fraction,
        cfg.selection_draws,
        derive_seed(cfg.seed, "select", 0),
    )?;
    std::fs::write(
        &paths.truncation,
        serde_json::to_string_pretty(&TruncationRecord {
            policy: sel.policy,
            objective: Some(sel.objective),
        })?,
    )?;
    Ok(sel.policy)
}

fn load_reconstructions(cfg: &RunConfig, side: usize) -> Result<Vec<Reconstructions>> {
    let paths = cfg.paths();
    cfg.methods
        .iter()
        .map(|&m| {
            let p = paths.reconstruction(m);
            let kept: Vec<usize> = serde_json::from_slice(
                &std::fs::read(paths.reconstruction_kept(m)).with_context(|| format!("run `reconstruct` for {m} first"))?,
            )?;
            Ok(Reconstructions::load(&p, m, side, kept)?)
        })
        .collect()
}

fn print_report(report: &RunReport) {
    println!("alpha {:e}, kept {}", report.policy.alpha, report.policy.kept);
    for r in &report.methods {
        println!("{:<13} mean relative error {:.6}", r.method.name(), r.mean);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let paths = cfg.paths();
    if matches!(cli.command, Command::Config) {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    if let Some(n) = cfg.threads {
        rayon_threads(n)?;
    }
    match cli.command {
        Command::Config => unreachable!(),
        Command::Assemble => {
            let a = in_stage(
                "assemble",
                &paths.matrix,
                assemble_system_matrix(&cfg.grid()?, &cfg.geometry()?, &cfg.assembly()),
            )?;
            ensure_parent(&paths.matrix)?;
            in_stage("assemble", &paths.matrix, a.save(&paths.matrix))?;
            println!("{} × {} matrix written to {}", a.rows(), a.cols(), paths.matrix.display());
        }
        Command::Svd => {
            let a = load_matrix(&paths)?;
            let f = in_stage("svd", &paths.factors, svd_factorize(&a, cfg.rank_cutoff, cfg.svd_backend))?;
            ensure_parent(&paths.factors)?;
            in_stage("svd", &paths.factors, f.save(&paths.factors))?;
            let s1 = f.sigma.first().copied().unwrap_or(0.0);
            let small = f.sigma.iter().filter(|s| **s < 1e-3 * s1).count();
            println!(
                "rank {}, sigma_1 {:e}, {} of {} below 1e-3 sigma_1, written to {}",
                f.rank(),
                s1,
                small,
                a.cols(),
                paths.factors.display()
            );
        }
        Command::Phantoms { role, count, out, pgm } => {
            let a = load_matrix(&paths)?;
            let grid = cfg.grid()?;
            let all = [
                (Role::Train, cfg.train_count, paths.train.clone()),
                (Role::Validation, cfg.selection_phantoms, paths.validation.clone()),
                (Role::Test, cfg.test_count, paths.test_clean.clone()),
            ];
            for (r, default_count, default_dir) in all {
                if role.is_some_and(|x| x != r) {
                    continue;
                }
                let n = count.unwrap_or(default_count);
                let dir = out.clone().unwrap_or(default_dir);
                let d = in_stage("phantoms", &dir, build_dataset(n, &grid, &a, 0.0, r, cfg.seed))?;
                in_stage("phantoms", &dir, d.save(&dir))?;
                if pgm {
                    in_stage("phantoms", &dir, d.export_pgm(&dir.join("pgm")))?;
                }
                println!("{n} {r} phantoms written to {}", dir.display());
            }
        }
        Command::Simulate { input, out } => {
            let a = load_matrix(&paths)?;
            let input = input.unwrap_or(paths.test_clean.clone());
            let out = out.unwrap_or(paths.test.clone());
            let clean = load_dataset(&input, &a, None)?;
            let d = in_stage("simulate", &out, simulate(&clean, &a, cfg.noise_fraction))?;
            in_stage("simulate", &out, d.save(&out))?;
            println!("{} samples at noise {} written to {}", d.len(), cfg.noise_fraction, out.display());
        }
        Command::Train { data } => {
            let a = load_matrix(&paths)?;
            let f = load_factors(&paths)?;
            let policy = resolve_policy(&cfg, &f)?;
            let dir = data.unwrap_or(paths.train.clone());
            let d = load_dataset(&dir, &a, Some(Role::Train))?;
            let outcome = in_stage("train", &paths.model, train(&d, &f, &policy, &cfg.train))?;
            ensure_parent(&paths.model)?;
            in_stage("train", &paths.model, outcome.params.save(&paths.model))?;
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in outcome.loss_trace.iter().enumerate() {
                csv.push_str(&format!("{},{l:e}\n", e + 1));
            }
            std::fs::write(paths.model.with_extension("loss.csv"), csv)?;
            println!(
                "trained {} parameters with {} kept values, final loss {:e}, written to {}",
                outcome.params.param_count(),
                policy.kept,
                outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
                paths.model.display()
            );
        }
        Command::Reconstruct { data } => {
            let a = load_matrix(&paths)?;
            let f = load_factors(&paths)?;
            let policy = resolve_policy(&cfg, &f)?;
            let dir = data.unwrap_or(paths.test.clone());
            let test = load_dataset(&dir, &a, None)?;
            let model = if cfg.methods.contains(&Method::Net) {
                let p = NetworkParams::load(&paths.model).with_context(|| format!("loading {}", paths.model.display()))?;
                if p.factors_checksum != f.checksum() {
                    bail!("{} was trained against different SVD factors", paths.model.display());
                }
                if paths.train.exists() {
                    check_disjoint(&Dataset::load(&paths.train)?, &test)?;
                }
                Some(p)
            } else {
                None
            };
            std::fs::create_dir_all(&paths.recon)?;
            for &m in &cfg.methods {
                let out = paths.reconstruction(m);
                let r = in_stage("reconstruct", &out, reconstruct_dataset(m, &f, &policy, model.as_ref(), &test))?;
                in_stage("reconstruct", &out, r.save(&out))?;
                std::fs::write(paths.reconstruction_kept(m), serde_json::to_string(&r.kept)?)?;
                println!("{m} reconstructions written to {}", out.display());
            }
        }
        Command::Evaluate { data } => {
            let dir = data.unwrap_or(paths.test.clone());
            let test = Dataset::load(&dir)?;
            let f = load_factors(&paths)?;
            let policy = resolve_policy(&cfg, &f)?;
            let methods = load_reconstructions(&cfg, test.grid.side)?
                .iter()
                .map(|r| evaluate(r, &test, policy.kept))
                .collect::<tsvdnet_core::Result<Vec<_>>>()?;
            let report = RunReport {
                policy,
                noise_fraction: test.noise_fraction,
                methods,
            };
            std::fs::write(&paths.report, serde_json::to_string_pretty(&report)?)?;
            print_report(&report);
        }
        Command::Oracle {
            column,
            phantom,
            spacing,
            out,
        } => {
            let grid = cfg.grid()?;
            let geom = cfg.geometry()?;
            let x = match (column, phantom) {
                (_, Some(seed)) => generate_phantom(seed, &grid),
                (c, None) => {
                    let c = c.unwrap_or(grid.len() / 2);
                    if c >= grid.len() {
                        bail!("column {c} out of range for {} coefficients", grid.len());
                    }
                    CoefficientImage::unit(grid.side, c)
                }
            };
            let a = load_matrix(&paths)?;
            let analytic = forward_apply(&a, &x)?.values;
            let fd_cfg = FdConfig::for_geometry(spacing, &geom, 1.0 + grid.kb.support_radius);
            let out = out.unwrap_or(cfg.output_dir.join("oracle.csv"));
            let fd = in_stage("oracle", &out, oracle_apply(&x, &grid, &geom, &fd_cfg))?;
            let mut csv = String::from("detector,time,analytic,fd\n");
            for n in 0..geom.detectors {
                for j in 0..geom.time_samples {
                    let r = geom.row(n, j);
                    csv.push_str(&format!("{n},{:e},{:e},{:e}\n", geom.time(j), analytic[r], fd[r]));
                }
            }
            ensure_parent(&out)?;
            std::fs::write(&out, csv)?;
            let num: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = fd.iter().map(|b| b * b).sum();
            println!("relative l2 difference {:.4e}, traces written to {}", (num / den).sqrt(), out.display());
        }
        Command::Pipeline => {
            let outcome = run_pipeline(&cfg)?;
            for (stage, status) in &outcome.stages {
                let s = match status {
                    StageStatus::Ran => "ran",
                    StageStatus::Skipped => "up to date",
                    StageStatus::NotNeeded => "not needed",
                };
                println!("{stage:<12} {s}");
            }
            print_report(&outcome.report);
            println!("report written to {}", outcome.report_path.display());
        }
        Command::EmitFigures { data } => {
            let dir = data.unwrap_or(paths.test.clone());
            let test = Dataset::load(&dir)?;
            let report: RunReport = serde_json::from_slice(
                &std::fs::read(&paths.report).with_context(|| "run `evaluate` first".to_string())?,
            )?;
            let recons = load_reconstructions(&cfg, test.grid.side)?;
            let f = load_factors(&paths)?;
            let written = in_stage(
                "figures",
                &paths.figures,
                emit_figures(&paths.figures, &report.methods, &recons, &test, &f.sigma, cfg.figure_samples),
            )?;
            println!("{} files written to {}", written.len(), paths.figures.display());
        }
    }
    Ok(())
}

fn rayon_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
