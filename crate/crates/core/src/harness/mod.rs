//! Experiment orchestration: data loading, roster training, attack sweeps
//! and report emission with a hashed manifest.

pub mod config;
pub mod roster;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    DataSource, EnsembleConfig, EvalConfig, ExperimentConfig, GridConfig, KvConfig, Lineage, ModelEntry,
    NonRobustConfig, Role, TheoryConfig,
};
pub use roster::{prepare_roster, training_order, ModelMeta, Roster, RosterModel};

use crate::data::{generate_synthetic, load_cifar_binary, load_idx, Dataset, SyntheticSpec};
use crate::error::{LabError, Result};
use crate::geometry::{boundary_grid, model_distance, outcome_overlay, DirectionPair};
use crate::metrics::{
    build_eligible_set, correctly_classified, ensemble_comparison, reports_to_csv, sample_indices, transfer_report,
    TransferReport,
};
use crate::nonrobust::{
    build_nonrobust_sets, retrain_and_eval, success_breakdown, NonRobustBuildSpec, BREAKDOWN_HEADER, RETRAIN_HEADER,
};
use crate::theory::{sweep, sweep_csv};

/// Environment variable naming a directory with the Fashion-MNIST IDX files.
pub const FASHION_DIR_VAR: &str = "ATLAB_FASHION_DIR";

/// Standard Fashion-MNIST file names (uncompressed).
pub const FASHION_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Train/test split with a short identifier for reports.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub id: String,
    pub train: Dataset<f64>,
    pub test: Dataset<f64>,
    /// Set when a requested source was replaced by the synthetic fallback.
    pub note: Option<String>,
}

fn fashion_dir(dir: Option<&Path>) -> Option<PathBuf> {
    let dir = dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(FASHION_DIR_VAR).map(PathBuf::from))?;
    FASHION_FILES.iter().all(|f| dir.join(f).is_file()).then_some(dir)
}

pub fn load_data(source: &DataSource) -> Result<LoadedData> {
    let synthetic = |spec: &SyntheticSpec, note: Option<String>| -> Result<LoadedData> {
        let (train, test) = generate_synthetic(spec)?;
        Ok(LoadedData {
            id: "synthetic".into(),
            train,
            test,
            note,
        })
    };
    match source {
        DataSource::Fashion { dir, fallback } => match fashion_dir(dir.as_deref()) {
            Some(d) => {
                let p = |i: usize| d.join(FASHION_FILES[i]);
                Ok(LoadedData {
                    id: "fashion-mnist".into(),
                    train: load_idx(p(0), p(1))?,
                    test: load_idx(p(2), p(3))?,
                    note: None,
                })
            }
            None => synthetic(
                fallback,
                Some("Fashion-MNIST files not found; using the synthetic fallback".into()),
            ),
        },
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok(LoadedData {
            id: "idx".into(),
            train: load_idx(train_images, train_labels)?,
            test: load_idx(test_images, test_labels)?,
            note: None,
        }),
        DataSource::Cifar { train, test } => Ok(LoadedData {
            id: "cifar10".into(),
            train: load_cifar_binary(train)?,
            test: load_cifar_binary(test)?,
            note: None,
        }),
        DataSource::Synthetic(spec) => synthetic(spec, None),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    /// Path relative to the bundle root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: String,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub dataset: String,
    pub notes: Vec<String>,
    pub partial: bool,
    pub tasks: Vec<TaskRecord>,
    pub files: Vec<ManifestFile>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Output directory that hashes everything written into it.
#[derive(Debug)]
pub struct Bundle {
    root: PathBuf,
    files: Vec<ManifestFile>,
    tasks: Vec<TaskRecord>,
    notes: Vec<String>,
}

impl Bundle {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| LabError::io(&root, e))?;
        Ok(Self {
            root,
            files: Vec::new(),
            tasks: Vec::new(),
            notes: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Directory under the root, created on demand.
    pub fn dir(&self, rel: &str) -> Result<PathBuf> {
        let d = self.root.join(rel);
        fs::create_dir_all(&d).map_err(|e| LabError::io(&d, e))?;
        Ok(d)
    }

    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| LabError::io(parent, e))?;
        }
        fs::write(&path, contents.as_ref()).map_err(|e| LabError::io(&path, e))?;
        self.record(&path)?;
        Ok(path)
    }

    /// Hashes a file already written under the root.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        let rel = path
            .strip_prefix(&self.root)
            .map_err(|_| LabError::Precondition(format!("{} lies outside the bundle", path.display())))?;
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        self.files.retain(|f| f.path != rel);
        self.files.push(ManifestFile {
            path: rel,
            sha256: config::hex_digest(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn record_all(&mut self, paths: &[PathBuf]) -> Result<()> {
        paths.iter().try_for_each(|p| self.record(p))
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Runs one task, recording success or the error message.
    pub fn task<F>(&mut self, name: &str, f: F) -> bool
    where
        F: FnOnce(&mut Self) -> Result<()>,
    {
        let r = f(self);
        let ok = r.is_ok();
        self.tasks.push(TaskRecord {
            task: name.to_string(),
            ok,
            error: r.err().map(|e| e.to_string()),
        });
        ok
    }

    /// Writes `manifest.json`, listing files in path order.
    pub fn finish(mut self, config_hash: &str, seed: u64, dataset: &str) -> Result<Manifest> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            config_hash: config_hash.to_string(),
            seed,
            dataset: dataset.to_string(),
            notes: self.notes,
            partial: self.tasks.iter().any(|t| !t.ok),
            tasks: self.tasks,
            files: self.files,
        };
        let path = self.root.join(MANIFEST_NAME);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| LabError::io(&path, e))?;
        Ok(manifest)
    }
}

/// Re-hashes every manifest entry; returns the paths whose content changed
/// or went missing.
pub fn verify_manifest(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let root = root.as_ref();
    let path = root.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    Ok(m.files
        .into_iter()
        .filter(|f| {
            fs::read(root.join(&f.path))
                .map(|b| config::hex_digest(&b) != f.sha256)
                .unwrap_or(true)
        })
        .map(|f| f.path)
        .collect())
}

pub const DIST_HEADER: &str = "f1,f2,dist,n_images,capped_f1,capped_f2";

/// Everything a run produced, for callers that want values rather than files.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub reports: Vec<TransferReport>,
}

/// Runs every configured task into `out` and writes the manifest. Failed
/// tasks are recorded and the run continues; configuration, data and roster
/// errors abort.
pub fn run_experiment(cfg: &ExperimentConfig, out: impl AsRef<Path>) -> Result<RunSummary> {
    let data = load_data(&cfg.data)?;
    let mut bundle = Bundle::create(out)?;
    if let Some(n) = &data.note {
        bundle.note(n.clone());
    }
    let models_dir = bundle.dir("models")?;
    let roster = prepare_roster(cfg, &data.train, &data.test, Some(&models_dir))?;
    bundle.record_all(&roster.files)?;
    let (train, test) = (&data.train, &data.test);
    let mut reports: Vec<TransferReport> = Vec::new();

    if !cfg.attacks.is_empty() {
        let pairs = cfg.transfer_pairs();
        bundle.task("transfer", |b| {
            let everyone: Vec<_> = roster.models.iter().map(|m| &m.network).collect();
            for spec in &cfg.attacks {
                for (s, t) in &pairs {
                    let (f1, f2) = (roster.get(s)?, roster.get(t)?);
                    let gate = if cfg.eval.all_models { everyone.clone() } else { vec![f2] };
                    let set = build_eligible_set(f1, &gate, test, spec, cfg.eval.sample_n.min(test.len()), cfg.eval.seed)?;
                    reports.push(transfer_report(s, t, &data.id, f2, &set)?);
                }
            }
            b.write("reports/transfer.csv", reports_to_csv(&reports))?;
            b.write("reports/transfer.json", serde_json::to_string_pretty(&reports)?)?;
            Ok(())
        });
    }

    if cfg.eval.dist_images > 0 && roster.models.len() > 1 {
        bundle.task("dist", |b| {
            let drawn = sample_indices(test.len(), cfg.eval.dist_images.min(test.len()), cfg.eval.seed)?;
            let mut csv = format!("{DIST_HEADER}\n");
            for s in roster.models.iter().filter(|m| m.entry.role.is_source()) {
                for t in &roster.models {
                    let (f1, f2) = (&s.network, &t.network);
                    let keep = correctly_classified(&[f1, f2], test, &drawn)?;
                    if keep.is_empty() {
                        let _ = writeln!(csv, "{},{},NA,0,0,0", s.entry.id, t.entry.id);
                        continue;
                    }
                    let sub = test.subset(&keep);
                    let d = model_distance(f1, f2, sub.images(), sub.labels(), &cfg.eval.search)?;
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{},{}",
                        s.entry.id, t.entry.id, d.dist, d.n_images, d.capped_f1, d.capped_f2
                    );
                }
            }
            b.write("reports/dist.csv", csv)?;
            Ok(())
        });
    }

    if let Some(g) = &cfg.grid {
        bundle.task("grids", |b| {
            let (f1, f2) = (roster.get(&g.source)?, roster.get(&g.target)?);
            let dir = b.dir("grids")?;
            for &i in &g.images {
                if i >= test.len() {
                    return Err(LabError::InvalidConfig(format!("grid image {i} is out of range")));
                }
                let x = test.images().item(i);
                let y = test.labels()[i];
                let image_id = format!("test-{i}");
                let dirs = DirectionPair::from_gradient(f1, x, y, g.unit, g.seed.wrapping_add(i as u64))?;
                let g1 = boundary_grid(f1, &g.source, x, &image_id, &dirs, g.half_extent, g.resolution)?;
                let g2 = boundary_grid(f2, &g.target, x, &image_id, &dirs, g.half_extent, g.resolution)?;
                let mut files = g1.save(&dir, &format!("{}_{image_id}", g.source))?;
                if g.target != g.source {
                    files.extend(g2.save(&dir, &format!("{}_{image_id}", g.target))?);
                }
                let overlay = outcome_overlay(&g1, &g2, y)?;
                files.extend(overlay.save(&dir, &format!("overlay_{}_{}_{image_id}", g.source, g.target))?);
                b.record_all(&files)?;
            }
            Ok(())
        });
    }

    if let Some(nr) = &cfg.nonrobust {
        bundle.task("nonrobust", |b| {
            let (f1, f2) = (roster.get(&nr.f1)?, roster.get(&nr.f2)?);
            let source = if nr.train_n == 0 { train.clone() } else { train.take(nr.train_n.min(train.len())) };
            let spec = NonRobustBuildSpec {
                f1: nr.f1.clone(),
                f2: nr.f2.clone(),
                attack: nr.attack.clone(),
                replication: nr.replication,
                seed: nr.seed,
            };
            let sets = build_nonrobust_sets(&source, f1, f2, &spec)?;
            let dir = b.dir("nonrobust")?;
            let mut bd = format!("{BREAKDOWN_HEADER}\n");
            if let Some(r) = success_breakdown(&sets.stats) {
                let _ = writeln!(
                    bd,
                    "{},{},{},{},{},{},{},{}",
                    nr.f1, nr.f2, nr.attack.epsilon, sets.stats.n, r.f1_rate, r.f2_rate, r.joint_rate, r.same_target_rate
                );
            }
            b.write("nonrobust/success.csv", bd)?;
            let mut variants = vec![sets.d1.clone(), sets.d2.clone()];
            if nr.random_control {
                variants.push(sets.d1.random_labels(nr.seed.wrapping_add(1)));
            }
            if nr.filtered {
                variants.push(sets.d1.filtered(true));
                variants.push(sets.d2.filtered(true));
            }
            let mut csv = format!("{RETRAIN_HEADER},filtered\n");
            let mut results = Vec::new();
            for (k, ds) in variants.iter().enumerate() {
                let filtered = k >= 2 + nr.random_control as usize;
                if !filtered {
                    let files = ds.save(&dir)?;
                    b.record_all(&files)?;
                }
                for (p, preset) in nr.presets.iter().enumerate() {
                    let model_seed = nr.seed.wrapping_add(100 + p as u64);
                    let (r, _) = retrain_and_eval(ds, preset, model_seed, &nr.retrain, test)?;
                    let _ = writeln!(csv, "{},{filtered}", r.csv_row(&spec));
                    results.push(r);
                }
            }
            b.write("nonrobust/retrain.csv", csv)?;
            b.write("nonrobust/retrain.json", serde_json::to_string_pretty(&results)?)?;
            Ok(())
        });
    }

    if let Some(e) = &cfg.ensemble {
        bundle.task("ensemble", |b| {
            let source = roster.get(&e.source)?;
            let target = roster.get(&e.target)?;
            let extra = e.extra.iter().map(|id| roster.get(id)).collect::<Result<Vec<_>>>()?;
            let cmp = ensemble_comparison(source, &extra, target, test, &e.attack, e.sample_n.min(test.len()), e.seed)?;
            b.write("reports/ensemble.csv", cmp.to_csv())?;
            b.write("reports/ensemble.json", serde_json::to_string_pretty(&cmp)?)?;
            Ok(())
        });
    }

    if let Some(t) = &cfg.theory {
        bundle.task("theory", |b| {
            let rows = sweep(&t.ds, &t.etas, t.n, t.seed, t.p)?;
            b.write("reports/theory.csv", sweep_csv(&rows))?;
            Ok(())
        });
    }

    let manifest = bundle.finish(&cfg.config_hash, cfg.seed, &data.id)?;
    Ok(RunSummary { manifest, reports })
}
