//! End-to-end run: configuration, checksum-gated stages and the run report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{file_checksum, fnv1a};
use crate::dataset::{build_dataset, simulate, verify_seed_domain, Dataset, Role, MANIFEST};
use crate::error::{Error, Result};
use crate::evaluation::{check_disjoint, emit_figures, evaluate, reconstruct_dataset, EvalReport, Method, Reconstructions};
use crate::geometry::{BasisGrid, MeasurementGeometry};
use crate::kaiser_bessel::KaiserBesselParams;
use crate::network::{train, NetworkParams, TrainConfig};
use crate::noise::derive_seed;
use crate::regularization::{select_alpha, TruncationPolicy};
use crate::svd::{svd_factorize, SvdBackend, SvdFactors, DEFAULT_RANK_CUTOFF};
use crate::system_matrix::{assemble_system_matrix, AssemblyOptions, SystemMatrix};

pub const STAGES_FILE: &str = "stages.json";
pub const REPORT_FILE: &str = "report.json";

/// Everything a run depends on. Missing keys in a TOML file take the desk
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub side: usize,
    pub kb: KaiserBesselParams,
    pub detectors: usize,
    pub time_samples: usize,
    pub horizon: f64,
    pub table_resolution: usize,
    pub rank_cutoff: f64,
    pub svd_backend: SvdBackend,
    /// Fixed threshold `α`. Exclusive with `kept`; with neither, `α` is
    /// selected on validation phantoms.
    pub alpha: Option<f64>,
    pub kept: Option<usize>,
    pub selection_phantoms: usize,
    pub selection_draws: usize,
    pub noise_fraction: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub matrix_path: Option<PathBuf>,
    pub factors_path: Option<PathBuf>,
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    /// Size of the rayon pool; `None` uses the global pool.
    pub threads: Option<usize>,
    pub figure_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale profile: 32² blobs, 64 detectors, 96 time samples.
    pub fn desk() -> Self {
        RunConfig {
            side: 32,
            kb: KaiserBesselParams {
                support_radius: 0.25,
                ..KaiserBesselParams::default()
            },
            detectors: 64,
            time_samples: 96,
            horizon: 3.75,
            table_resolution: AssemblyOptions::default().table_resolution,
            rank_cutoff: DEFAULT_RANK_CUTOFF,
            svd_backend: SvdBackend::Deterministic,
            alpha: None,
            kept: None,
            selection_phantoms: 20,
            selection_draws: 4,
            noise_fraction: 0.07,
            train_count: 300,
            test_count: 50,
            seed: 1,
            methods: vec![Method::Pinv, Method::Tsvd, Method::OptimalTsvd, Method::Net],
            train: TrainConfig::default(),
            output_dir: PathBuf::from("run"),
            matrix_path: None,
            factors_path: None,
            train_dir: None,
            test_dir: None,
            model_path: None,
            threads: None,
            figure_samples: 4,
        }
    }

    /// Full-scale profile: 128² blobs, 400 detectors, 376 time samples,
    /// 3500 training and 500 test phantoms.
    pub fn full_scale() -> Self {
        let g = MeasurementGeometry::full_scale();
        RunConfig {
            side: 128,
            kb: KaiserBesselParams::default(),
            detectors: g.detectors,
            time_samples: g.time_samples,
            horizon: g.horizon,
            train_count: 3500,
            test_count: 500,
            ..Self::desk()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid(&self) -> Result<BasisGrid> {
        BasisGrid::new(self.side, self.kb)
    }

    pub fn geometry(&self) -> Result<MeasurementGeometry> {
        MeasurementGeometry::new(self.detectors, self.time_samples, self.horizon)
    }

    pub fn assembly(&self) -> AssemblyOptions {
        AssemblyOptions {
            table_resolution: self.table_resolution,
            ..AssemblyOptions::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.geometry()?;
        self.train.validate()?;
        if self.alpha.is_some() && self.kept.is_some() {
            return Err(Error::Config("alpha and kept are mutually exclusive".into()));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("alpha must be positive, got {a}")));
            }
        }
        if !(self.noise_fraction >= 0.0 && self.noise_fraction.is_finite()) {
            return Err(Error::Config("noise fraction must be non-negative".into()));
        }
        if self.table_resolution == 0 {
            return Err(Error::Config("table resolution must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no reconstruction method selected".into()));
        }
        if self.test_count == 0 {
            return Err(Error::Config("test count must be positive".into()));
        }
        if self.methods.contains(&Method::Net) && self.train_count == 0 {
            return Err(Error::Config("method net needs training phantoms".into()));
        }
        if self.alpha.is_none() && self.kept.is_none() && self.selection_phantoms == 0 {
            return Err(Error::Config("alpha selection needs validation phantoms".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("thread count must be positive".into()));
        }
        Ok(())
    }

    pub fn paths(&self) -> ArtifactPaths {
        let out = &self.output_dir;
        let or = |p: &Option<PathBuf>, default: &str| p.clone().unwrap_or_else(|| out.join(default));
        ArtifactPaths {
            matrix: or(&self.matrix_path, "matrix.bin"),
            factors: or(&self.factors_path, "factors.bin"),
            train: or(&self.train_dir, "data/train"),
            validation: out.join("data/validation"),
            test_clean: out.join("data/test-clean"),
            test: or(&self.test_dir, "data/test"),
            truncation: out.join("truncation.json"),
            model: or(&self.model_path, "model.bin"),
            recon: out.join("recon"),
            report: out.join(REPORT_FILE),
            figures: out.join("figures"),
            stages: out.join(STAGES_FILE),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactPaths {
    pub matrix: PathBuf,
    pub factors: PathBuf,
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test_clean: PathBuf,
    pub test: PathBuf,
    pub truncation: PathBuf,
    pub model: PathBuf,
    pub recon: PathBuf,
    pub report: PathBuf,
    pub figures: PathBuf,
    pub stages: PathBuf,
}

impl ArtifactPaths {
    pub fn reconstruction(&self, m: Method) -> PathBuf {
        self.recon.join(format!("{m}.bin"))
    }

    pub fn reconstruction_kept(&self, m: Method) -> PathBuf {
        self.recon.join(format!("{m}.kept.json"))
    }
}

/// Selected truncation and, when it was chosen on data, the objective per
/// kept count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRecord {
    pub policy: TruncationPolicy,
    pub objective: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: TruncationPolicy,
    pub noise_fraction: f64,
    pub methods: Vec<EvalReport>,
}

impl RunReport {
    pub fn method(&self, m: Method) -> Option<&EvalReport> {
        self.methods.iter().find(|r| r.method == m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Ran,
    Skipped,
    NotNeeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub stages: Vec<(&'static str, StageStatus)>,
    pub report: RunReport,
    pub report_path: PathBuf,
}

impl PipelineOutcome {
    pub fn status(&self, stage: &str) -> Option<StageStatus> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, st)| *st)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    key: u64,
    outputs: BTreeMap<PathBuf, u64>,
    /// Content checksum of the primary output, when it differs from the
    /// file checksum.
    #[serde(default)]
    content: Option<u64>,
}

/// Stage keys and output checksums, persisted in `stages.json`.
struct StageBook {
    path: PathBuf,
    records: BTreeMap<String, StageRecord>,
}

impl StageBook {
    fn open(path: PathBuf) -> Result<Self> {
        let records = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)?
        } else {
            BTreeMap::new()
        };
        Ok(StageBook { path, records })
    }

    /// Outputs recorded for `stage` under `key`, if every one still exists
    /// with its recorded checksum.
    fn fresh(&self, stage: &str, key: u64) -> Option<&BTreeMap<PathBuf, u64>> {
        let rec = self.records.get(stage).filter(|r| r.key == key)?;
        rec.outputs
            .iter()
            .all(|(p, sum)| file_checksum(p).ok() == Some(*sum))
            .then_some(&rec.outputs)
    }

    fn commit(&mut self, stage: &str, key: u64, outputs: &[PathBuf], content: Option<u64>) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|p| Ok((p.clone(), file_checksum(p)?)))
            .collect::<Result<_>>()?;
        self.records.insert(stage.to_string(), StageRecord { key, outputs, content });
        std::fs::write(&self.path, serde_json::to_string_pretty(&self.records)?)?;
        Ok(())
    }

    /// Checksum of one recorded output.
    fn checksum(&self, stage: &str, path: &Path) -> Result<u64> {
        self.records
            .get(stage)
            .and_then(|r| r.outputs.get(path))
            .copied()
            .ok_or_else(|| Error::container(path, format!("not recorded as an output of stage {stage}")))
    }

    fn content(&self, stage: &str, path: &Path) -> Result<u64> {
        self.records
            .get(stage)
            .and_then(|r| r.content)
            .ok_or_else(|| Error::container(path, format!("no content checksum recorded for stage {stage}")))
    }
}

fn stage_key(parts: &serde_json::Value) -> u64 {
    fnv1a(parts.to_string().as_bytes())
}

fn in_stage<T>(stage: &'static str, path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage,
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Loads a dataset and checks that it matches the system matrix it is
/// used with.
fn load_dataset(dir: &Path, matrix_checksum: u64, role: Role) -> Result<Dataset> {
    let d = Dataset::load(dir)?;
    if d.role != role {
        return Err(Error::RoleViolation(format!("expected a {role} set, found {}", d.role)));
    }
    if d.matrix_checksum != matrix_checksum {
        return Err(Error::Checksum {
            path: dir.join(MANIFEST),
            expected: matrix_checksum,
            actual: d.matrix_checksum,
        });
    }
    verify_seed_domain(&d)?;
    Ok(d)
}

fn load_factors(path: &Path, matrix_checksum: u64) -> Result<SvdFactors> {
    let f = SvdFactors::load(path)?;
    if f.meta.matrix_checksum != matrix_checksum {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: matrix_checksum,
            actual: f.meta.matrix_checksum,
        });
    }
    Ok(f)
}

fn load_model(path: &Path, factors_checksum: u64) -> Result<NetworkParams> {
    let p = NetworkParams::load(path)?;
    if p.factors_checksum != factors_checksum {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected: factors_checksum,
            actual: p.factors_checksum,
        });
    }
    Ok(p)
}

/// Runs every stage whose recorded key or outputs are stale.
///
/// Stages: assemble, svd, phantoms, simulate, select, train, reconstruct,
/// evaluate, figures. Failures are reported as [`Error::Stage`].
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    match config.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            pool.install(|| run_stages(config))
        }
        None => run_stages(config),
    }
}

fn take_matrix(m: &mut Option<SystemMatrix>, path: &Path, stage: &'static str) -> Result<SystemMatrix> {
    match m.take() {
        Some(a) => Ok(a),
        None => in_stage(stage, path, SystemMatrix::load(path)),
    }
}

fn take_factors(
    f: &mut Option<SvdFactors>,
    path: &Path,
    matrix_checksum: u64,
    stage: &'static str,
) -> Result<SvdFactors> {
    match f.take() {
        Some(f) => Ok(f),
        None => in_stage(stage, path, load_factors(path, matrix_checksum)),
    }
}

fn load_reconstructions(paths: &ArtifactPaths, methods: &[Method], side: usize) -> Result<Vec<Reconstructions>> {
    methods
        .iter()
        .map(|&m| {
            let p = paths.reconstruction(m);
            in_stage("reconstruct", &p, (|| {
                let kept: Vec<usize> = read_json(&paths.reconstruction_kept(m))?;
                Reconstructions::load(&p, m, side, kept)
            })())
        })
        .collect()
}

fn run_stages(cfg: &RunConfig) -> Result<PipelineOutcome> {
    let paths = cfg.paths();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut book = StageBook::open(paths.stages.clone())?;
    let mut stages = Vec::new();
    let grid = cfg.grid()?;
    let geometry = cfg.geometry()?;
    let manifests = |dirs: &[&PathBuf]| dirs.iter().map(|d| d.join(MANIFEST)).collect::<Vec<_>>();

    // assemble
    let key = stage_key(&serde_json::json!([grid, geometry, cfg.assembly()]));
    let mut matrix: Option<SystemMatrix> = None;
    if book.fresh("assemble", key).is_some() {
        stages.push(("assemble", StageStatus::Skipped));
    } else {
        let a = in_stage("assemble", &paths.matrix, (|| {
            let a = assemble_system_matrix(&grid, &geometry, &cfg.assembly())?;
            ensure_parent(&paths.matrix)?;
            a.save(&paths.matrix)?;
            Ok(a)
        })())?;
        book.commit("assemble", key, &[paths.matrix.clone()], Some(a.checksum()))?;
        matrix = Some(a);
        stages.push(("assemble", StageStatus::Ran));
    }
    let matrix_file = book.checksum("assemble", &paths.matrix)?;
    let matrix_sum = book.content("assemble", &paths.matrix)?;

    // svd
    let key = stage_key(&serde_json::json!([matrix_file, cfg.rank_cutoff, cfg.svd_backend]));
    let mut factors: Option<SvdFactors> = None;
    if book.fresh("svd", key).is_some() {
        stages.push(("svd", StageStatus::Skipped));
    } else {
        let a = take_matrix(&mut matrix, &paths.matrix, "svd")?;
        let f = in_stage("svd", &paths.factors, (|| {
            let f = svd_factorize(&a, cfg.rank_cutoff, cfg.svd_backend)?;
            ensure_parent(&paths.factors)?;
            f.save(&paths.factors)?;
            Ok(f)
        })())?;
        matrix = Some(a);
        book.commit("svd", key, &[paths.factors.clone()], Some(f.checksum()))?;
        factors = Some(f);
        stages.push(("svd", StageStatus::Ran));
    }
    let factors_file = book.checksum("svd", &paths.factors)?;
    let factors_sum = book.content("svd", &paths.factors)?;

    // phantoms
    let key = stage_key(&serde_json::json!([
        matrix_file,
        cfg.seed,
        cfg.train_count,
        cfg.test_count,
        cfg.selection_phantoms
    ]));
    if book.fresh("phantoms", key).is_some() {
        stages.push(("phantoms", StageStatus::Skipped));
    } else {
        let a = take_matrix(&mut matrix, &paths.matrix, "phantoms")?;
        for (dir, count, role) in [
            (&paths.train, cfg.train_count, Role::Train),
            (&paths.validation, cfg.selection_phantoms, Role::Validation),
            (&paths.test_clean, cfg.test_count, Role::Test),
        ] {
            in_stage("phantoms", dir, (|| {
                build_dataset(count, &grid, &a, 0.0, role, cfg.seed)?.save(dir)?;
                Ok(())
            })())?;
        }
        matrix = Some(a);
        let outputs = manifests(&[&paths.train, &paths.validation, &paths.test_clean]);
        book.commit("phantoms", key, &outputs, None)?;
        stages.push(("phantoms", StageStatus::Ran));
    }
    let train_file = book.checksum("phantoms", &paths.train.join(MANIFEST))?;
    let validation_file = book.checksum("phantoms", &paths.validation.join(MANIFEST))?;
    let test_clean_file = book.checksum("phantoms", &paths.test_clean.join(MANIFEST))?;

    // simulate
    let key = stage_key(&serde_json::json!([matrix_file, test_clean_file, cfg.noise_fraction]));
    if book.fresh("simulate", key).is_some() {
        stages.push(("simulate", StageStatus::Skipped));
    } else {
        let a = take_matrix(&mut matrix, &paths.matrix, "simulate")?;
        in_stage("simulate", &paths.test, (|| {
            let clean = load_dataset(&paths.test_clean, matrix_sum, Role::Test)?;
            simulate(&clean, &a, cfg.noise_fraction)?.save(&paths.test)?;
            Ok(())
        })())?;
        book.commit("simulate", key, &manifests(&[&paths.test]), None)?;
        stages.push(("simulate", StageStatus::Ran));
    }
    let test_file = book.checksum("simulate", &paths.test.join(MANIFEST))?;
    drop(matrix);

    // select
    let key = stage_key(&serde_json::json!([
        factors_file,
        validation_file,
        cfg.alpha,
        cfg.kept,
        cfg.noise_fraction,
        cfg.selection_draws,
        cfg.seed
    ]));
    if book.fresh("select", key).is_some() {
        stages.push(("select", StageStatus::Skipped));
    } else {
        let f = take_factors(&mut factors, &paths.factors, matrix_sum, "select")?;
        in_stage("select", &paths.truncation, (|| {
            let record = match (cfg.alpha, cfg.kept) {
                (Some(a), _) => TruncationRecord {
                    policy: TruncationPolicy::from_alpha(&f, a)?,
                    objective: None,
                },
                (None, Some(k)) => TruncationRecord {
                    policy: TruncationPolicy::from_kept(&f, k)?,
                    objective: None,
                },
                (None, None) => {
                    let validation = load_dataset(&paths.validation, matrix_sum, Role::Validation)?;
                    let phantoms: Vec<_> = validation.samples.into_iter().map(|s| s.x).collect();
                    let sel = select_alpha(
                        &f,
                        &phantoms,
                        cfg.noise_fraction,
                        cfg.selection_draws,
                        derive_seed(cfg.seed, "select", 0),
                    )?;
                    TruncationRecord {
                        policy: sel.policy,
                        objective: Some(sel.objective),
                    }
                }
            };
            write_json(&paths.truncation, &record)
        })())?;
        factors = Some(f);
        book.commit("select", key, &[paths.truncation.clone()], None)?;
        stages.push(("select", StageStatus::Ran));
    }
    let truncation_file = book.checksum("select", &paths.truncation)?;
    let policy = in_stage("select", &paths.truncation, read_json::<TruncationRecord>(&paths.truncation))?.policy;

    // train
    let needs_net = cfg.methods.contains(&Method::Net);
    let key = stage_key(&serde_json::json!([factors_file, truncation_file, train_file, cfg.train]));
    let mut model: Option<NetworkParams> = None;
    if !needs_net {
        stages.push(("train", StageStatus::NotNeeded));
    } else if book.fresh("train", key).is_some() {
        stages.push(("train", StageStatus::Skipped));
    } else {
        let f = take_factors(&mut factors, &paths.factors, matrix_sum, "train")?;
        let p = in_stage("train", &paths.model, (|| {
            let data = load_dataset(&paths.train, matrix_sum, Role::Train)?;
            let outcome = train(&data, &f, &policy, &cfg.train)?;
            ensure_parent(&paths.model)?;
            outcome.params.save(&paths.model)?;
            Ok(outcome.params)
        })())?;
        factors = Some(f);
        book.commit("train", key, &[paths.model.clone()], None)?;
        model = Some(p);
        stages.push(("train", StageStatus::Ran));
    }
    let model_file = if needs_net {
        Some(book.checksum("train", &paths.model)?)
    } else {
        None
    };

    // reconstruct
    let key = stage_key(&serde_json::json!([
        factors_file,
        truncation_file,
        test_file,
        model_file,
        cfg.methods
    ]));
    let mut recons: Option<Vec<Reconstructions>> = None;
    if book.fresh("reconstruct", key).is_some() {
        stages.push(("reconstruct", StageStatus::Skipped));
    } else {
        let f = take_factors(&mut factors, &paths.factors, matrix_sum, "reconstruct")?;
        let test = in_stage("reconstruct", &paths.test, (|| {
            let test = load_dataset(&paths.test, matrix_sum, Role::Test)?;
            if needs_net {
                let train = load_dataset(&paths.train, matrix_sum, Role::Train)?;
                check_disjoint(&train, &test)?;
            }
            Ok(test)
        })())?;
        if needs_net && model.is_none() {
            model = Some(in_stage("reconstruct", &paths.model, load_model(&paths.model, factors_sum))?);
        }
        std::fs::create_dir_all(&paths.recon)?;
        let mut outputs = Vec::new();
        let mut all = Vec::new();
        for &m in &cfg.methods {
            let out = paths.reconstruction(m);
            let r = in_stage("reconstruct", &out, (|| {
                let r = reconstruct_dataset(m, &f, &policy, model.as_ref(), &test)?;
                r.save(&out)?;
                write_json(&paths.reconstruction_kept(m), &r.kept)?;
                Ok(r)
            })())?;
            outputs.push(out);
            outputs.push(paths.reconstruction_kept(m));
            all.push(r);
        }
        factors = Some(f);
        book.commit("reconstruct", key, &outputs, None)?;
        recons = Some(all);
        stages.push(("reconstruct", StageStatus::Ran));
    }
    let mut recon_files = Vec::new();
    for &m in &cfg.methods {
        recon_files.push(book.checksum("reconstruct", &paths.reconstruction(m))?);
        recon_files.push(book.checksum("reconstruct", &paths.reconstruction_kept(m))?);
    }

    // evaluate
    let key = stage_key(&serde_json::json!([test_file, truncation_file, recon_files]));
    let mut test: Option<Dataset> = None;
    if book.fresh("evaluate", key).is_some() {
        stages.push(("evaluate", StageStatus::Skipped));
    } else {
        let t = in_stage("evaluate", &paths.test, load_dataset(&paths.test, matrix_sum, Role::Test))?;
        let rs = match recons.take() {
            Some(r) => r,
            None => load_reconstructions(&paths, &cfg.methods, t.grid.side)?,
        };
        in_stage("evaluate", &paths.report, (|| {
            let methods = rs
                .iter()
                .map(|r| evaluate(r, &t, policy.kept))
                .collect::<Result<Vec<_>>>()?;
            let report = RunReport {
                policy,
                noise_fraction: t.noise_fraction,
                methods,
            };
            write_json(&paths.report, &report)
        })())?;
        recons = Some(rs);
        test = Some(t);
        book.commit("evaluate", key, &[paths.report.clone()], None)?;
        stages.push(("evaluate", StageStatus::Ran));
    }
    let report_file = book.checksum("evaluate", &paths.report)?;
    let report: RunReport = in_stage("evaluate", &paths.report, read_json(&paths.report))?;

    // figures
    let key = stage_key(&serde_json::json!([report_file, factors_file, recon_files, cfg.figure_samples]));
    if book.fresh("figures", key).is_some() {
        stages.push(("figures", StageStatus::Skipped));
    } else {
        let t = match test.take() {
            Some(t) => t,
            None => in_stage("figures", &paths.test, load_dataset(&paths.test, matrix_sum, Role::Test))?,
        };
        let rs = match recons.take() {
            Some(r) => r,
            None => load_reconstructions(&paths, &cfg.methods, t.grid.side)?,
        };
        let sigma = take_factors(&mut factors, &paths.factors, matrix_sum, "figures")?.sigma;
        let written = in_stage(
            "figures",
            &paths.figures,
            emit_figures(&paths.figures, &report.methods, &rs, &t, &sigma, cfg.figure_samples),
        )?;
        book.commit("figures", key, &written, None)?;
        stages.push(("figures", StageStatus::Ran));
    }

    Ok(PipelineOutcome {
        stages,
        report,
        report_path: paths.report,
    })
}
