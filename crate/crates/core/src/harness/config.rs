//! Flat `key = value` experiment configuration with dotted section prefixes.
//!
//! ```text
//! # comment
//! seed = 7
//! data.source = synthetic
//! model.a.preset = Conv-2
//! model.b.lineage = same-init-as:a
//! attack.pgd.epsilon = 0.25, 0.5, 1.0, 2.0
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::attack::{AttackSpec, Family, Objective};
use crate::data::SyntheticSpec;
use crate::error::{LabError, Result};
use crate::geometry::{BoundarySearch, GRID_HALF_EXTENT, GRID_RESOLUTION, GRID_UNIT};
use crate::nn::OptimizerConfig;
use crate::nonrobust::retrain_config;

/// Parsed key/value pairs. Every key must be consumed by a getter;
/// [`KvConfig::finish`] rejects the rest.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

fn bad(msg: impl Into<String>) -> LabError {
    LabError::InvalidConfig(msg.into())
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() || k.split('.').any(str::is_empty) || k.contains(char::is_whitespace) {
                return Err(bad(format!("line {}: malformed key `{k}`", n + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(bad(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self {
            entries,
            used: BTreeSet::new(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets a key, replacing any previous value.
    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.entries.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| bad(format!("`{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| bad(format!("`{key}`: cannot parse `{s}`: {e}"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn has_prefix(&self, section: &str) -> bool {
        let p = format!("{section}.");
        self.entries.keys().any(|k| k.starts_with(&p))
    }

    /// Distinct names `x` for which some key `prefix.x.…` exists, sorted.
    pub fn sections(&self, prefix: &str) -> Vec<String> {
        let p = format!("{prefix}.");
        let mut names: Vec<String> = self
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix(&p))
            .filter_map(|rest| rest.split_once('.').map(|(name, _)| name.to_string()))
            .collect();
        names.dedup();
        names
    }

    /// Errors on keys no getter asked for.
    pub fn finish(&self) -> Result<()> {
        let unused: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(bad(format!("unknown keys: {}", unused.join(", "))))
        }
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex sha256 of [`KvConfig::canonical`].
    pub fn hash(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Fashion-MNIST style IDX files in one directory; falls back to the
    /// synthetic generator when they are missing.
    Fashion { dir: Option<PathBuf>, fallback: SyntheticSpec },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar { train: Vec<PathBuf>, test: Vec<PathBuf> },
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
    Both,
}

impl FromStr for Role {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Role::Source),
            "target" => Ok(Role::Target),
            "both" => Ok(Role::Both),
            _ => Err(bad(format!("unknown role `{s}`"))),
        }
    }
}

impl Role {
    pub fn is_source(self) -> bool {
        matches!(self, Role::Source | Role::Both)
    }

    pub fn is_target(self) -> bool {
        matches!(self, Role::Target | Role::Both)
    }
}

/// How a roster model comes to be.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lineage {
    Fresh,
    /// Starts from the initial parameters of another model.
    SameInitAs(String),
    /// Parameters of another model after the given number of epochs.
    EpochSnapshotOf(String, usize),
    /// Final parameters of another model.
    FinalSnapshotOf(String),
}

impl FromStr for Lineage {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fresh" {
            return Ok(Lineage::Fresh);
        }
        if let Some(id) = s.strip_prefix("same-init-as:") {
            return Ok(Lineage::SameInitAs(id.to_string()));
        }
        if let Some(rest) = s.strip_prefix("epoch-snapshot-of:") {
            let (id, epoch) = rest
                .split_once('@')
                .ok_or_else(|| bad(format!("lineage `{s}` needs `@<epoch>`")))?;
            return Ok(match epoch {
                "final" => Lineage::FinalSnapshotOf(id.to_string()),
                e => Lineage::EpochSnapshotOf(
                    id.to_string(),
                    e.parse().map_err(|_| bad(format!("bad snapshot epoch `{e}`")))?,
                ),
            });
        }
        Err(bad(format!("unknown lineage `{s}`")))
    }
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lineage::Fresh => f.write_str("fresh"),
            Lineage::SameInitAs(id) => write!(f, "same-init-as:{id}"),
            Lineage::EpochSnapshotOf(id, e) => write!(f, "epoch-snapshot-of:{id}@{e}"),
            Lineage::FinalSnapshotOf(id) => write!(f, "epoch-snapshot-of:{id}@final"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelEntry {
    pub id: String,
    pub preset: String,
    /// Initialization seed; also seeds the shuffle order.
    pub seed: u64,
    pub role: Role,
    pub lineage: Lineage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub sample_n: usize,
    pub dist_images: usize,
    /// Gate eligibility on every roster model instead of the pair.
    pub all_models: bool,
    /// Explicit (source, target) pairs; empty means every source against
    /// every other target.
    pub pairs: Vec<(String, String)>,
    pub search: BoundarySearch,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub source: String,
    pub target: String,
    /// Test-set indices.
    pub images: Vec<usize>,
    pub unit: f64,
    pub half_extent: usize,
    pub resolution: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonRobustConfig {
    pub f1: String,
    pub f2: String,
    pub attack: AttackSpec,
    pub replication: usize,
    /// Leading training images to attack; 0 means all.
    pub train_n: usize,
    pub presets: Vec<String>,
    pub retrain: OptimizerConfig,
    pub random_control: bool,
    /// Also retrain on items where the attack hit both models.
    pub filtered: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub source: String,
    pub extra: Vec<String>,
    pub target: String,
    pub attack: AttackSpec,
    pub sample_n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConfig {
    pub ds: Vec<usize>,
    pub etas: Vec<f64>,
    pub n: usize,
    pub p: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataSource,
    pub train: OptimizerConfig,
    pub models: Vec<ModelEntry>,
    /// Expanded sweep: one spec per (attack section, epsilon).
    pub attacks: Vec<AttackSpec>,
    pub eval: EvalConfig,
    pub grid: Option<GridConfig>,
    pub nonrobust: Option<NonRobustConfig>,
    pub ensemble: Option<EnsembleConfig>,
    pub theory: Option<TheoryConfig>,
    /// Hash of the canonical configuration text.
    pub config_hash: String,
}

fn optimizer(kv: &mut KvConfig, prefix: &str, base: OptimizerConfig) -> Result<OptimizerConfig> {
    let k = |s: &str| format!("{prefix}.{s}");
    Ok(OptimizerConfig {
        learning_rate: kv.get_or(&k("lr"), base.learning_rate)?,
        momentum: kv.get_or(&k("momentum"), base.momentum)?,
        weight_decay: kv.get_or(&k("weight_decay"), base.weight_decay)?,
        lr_decay_epochs: kv.list(&k("lr_decay_epochs"))?.unwrap_or(base.lr_decay_epochs),
        lr_decay_factor: kv.get_or(&k("lr_decay_factor"), base.lr_decay_factor)?,
        epochs: kv.get_or(&k("epochs"), base.epochs)?,
        batch_size: kv.get_or(&k("batch_size"), base.batch_size)?,
        seed: kv.get_or(&k("seed"), base.seed)?,
        augment: crate::nn::Augment {
            horizontal_flip: kv.get_or(&k("flip"), base.augment.horizontal_flip)?,
            crop_padding: kv.get_or(&k("crop_padding"), base.augment.crop_padding)?,
        },
    })
}

fn synthetic(kv: &mut KvConfig, seed: u64) -> Result<SyntheticSpec> {
    let d = SyntheticSpec::default();
    let k = |s: &str| format!("data.synthetic.{s}");
    Ok(SyntheticSpec {
        num_classes: kv.get_or(&k("classes"), d.num_classes)?,
        input_shape: kv.list(&k("shape"))?.unwrap_or(d.input_shape),
        mean_contrast: kv.get_or(&k("contrast"), d.mean_contrast)?,
        smoothing: kv.get_or(&k("smoothing"), d.smoothing)?,
        style_rank: kv.get_or(&k("style_rank"), d.style_rank)?,
        style_scale: kv.get_or(&k("style_scale"), d.style_scale)?,
        pixel_noise: kv.get_or(&k("noise"), d.pixel_noise)?,
        train_count: kv.get_or(&k("train"), d.train_count)?,
        test_count: kv.get_or(&k("test"), d.test_count)?,
        seed: kv.get_or(&k("seed"), seed)?,
    })
}

/// Attack keys of one section, applied to each budget of a sweep.
#[derive(Debug, Clone)]
struct AttackTemplate {
    family: Family,
    objective: Objective,
    steps: Option<usize>,
    step_size: Option<f64>,
    step_ratio: Option<f64>,
    momentum: Option<f64>,
    seed: Option<u64>,
}

impl AttackTemplate {
    fn read(kv: &mut KvConfig, prefix: &str, default_objective: Objective) -> Result<Self> {
        let k = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            family: kv.get_or(&k("family"), Family::Pgd)?,
            objective: kv.get_or(&k("objective"), default_objective)?,
            steps: kv.get(&k("steps"))?,
            step_size: kv.get(&k("step_size"))?,
            step_ratio: kv.get(&k("step_ratio"))?,
            momentum: kv.get(&k("momentum"))?,
            seed: kv.get(&k("seed"))?,
        })
    }

    /// Defaults follow the preset constructors; `steps` alone implies a
    /// step of ε/5.
    fn at(&self, epsilon: f64) -> Result<AttackSpec> {
        let mut spec = match (self.family, self.objective) {
            (family, Objective::NTargeted) => AttackSpec {
                family,
                ..AttackSpec::n_targeted(epsilon)
            },
            (Family::Fgm, o) => AttackSpec::fgm(epsilon, o),
            (Family::Pgd, o) => AttackSpec::pgd(epsilon, o),
            (Family::Mim, o) => AttackSpec::mim(epsilon, o),
        };
        if let Some(steps) = self.steps {
            spec.steps = steps;
            spec.step_size = epsilon / 5.0;
        }
        if let Some(step) = self.step_size {
            spec.step_size = step;
        } else if let Some(r) = self.step_ratio {
            spec.step_size = r * epsilon;
        }
        if self.family == Family::Fgm {
            spec.step_size = epsilon;
        }
        if let Some(m) = self.momentum {
            spec.momentum_decay = m;
        }
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn pair(s: &str) -> Result<(String, String)> {
    s.split_once(':')
        .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
        .ok_or_else(|| bad(format!("pair `{s}` must be `source:target`")))
}

impl ExperimentConfig {
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let config_hash = kv.hash();
        let seed: u64 = kv.get_or("seed", 0)?;
        let out_dir = kv.get::<PathBuf>("out")?;

        let source = kv.raw("data.source").unwrap_or_else(|| "fashion".into());
        let data = match source.as_str() {
            "fashion" => DataSource::Fashion {
                dir: kv.get("data.dir")?,
                fallback: synthetic(&mut kv, seed)?,
            },
            "idx" => {
                let mut req = |key: &str| -> Result<PathBuf> {
                    kv.get(key)?.ok_or_else(|| bad(format!("`{key}` is required for idx data")))
                };
                DataSource::Idx {
                    train_images: req("data.train_images")?,
                    train_labels: req("data.train_labels")?,
                    test_images: req("data.test_images")?,
                    test_labels: req("data.test_labels")?,
                }
            }
            "cifar" => DataSource::Cifar {
                train: kv.list("data.train")?.unwrap_or_default(),
                test: kv.list("data.test")?.unwrap_or_default(),
            },
            "synthetic" => DataSource::Synthetic(synthetic(&mut kv, seed)?),
            other => return Err(bad(format!("unknown data.source `{other}`"))),
        };

        let train = optimizer(&mut kv, "train", OptimizerConfig {
            batch_size: 128,
            ..OptimizerConfig::default()
        })?;

        let mut models = Vec::new();
        for (i, id) in kv.sections("model").into_iter().enumerate() {
            let k = |s: &str| format!("model.{id}.{s}");
            let preset = kv
                .raw(&k("preset"))
                .ok_or_else(|| bad(format!("model `{id}` needs a preset")))?;
            models.push(ModelEntry {
                seed: kv.get_or(&k("seed"), seed.wrapping_add(i as u64 + 1))?,
                role: kv.get_or(&k("role"), Role::Both)?,
                lineage: kv.get_or(&k("lineage"), Lineage::Fresh)?,
                preset,
                id,
            });
        }

        let mut attacks = Vec::new();
        for name in kv.sections("attack") {
            let prefix = format!("attack.{name}");
            let eps: Vec<f64> = kv
                .list(&format!("{prefix}.epsilon"))?
                .ok_or_else(|| bad(format!("`{prefix}.epsilon` is required")))?;
            let template = AttackTemplate::read(&mut kv, &prefix, Objective::NonTargeted)?;
            if template.objective == Objective::NTargeted {
                return Err(bad(format!("`{prefix}`: sweeps take single-model objectives")));
            }
            for &e in &eps {
                if !(e > 0.0) {
                    return Err(bad(format!("`{prefix}.epsilon` values must be positive")));
                }
                attacks.push(template.at(e)?);
            }
        }

        let eval = EvalConfig {
            sample_n: kv.get_or("eval.sample_n", 2000)?,
            dist_images: kv.get_or("eval.dist_images", 1000)?,
            all_models: kv.get_or("eval.all_models", false)?,
            pairs: kv
                .list::<String>("eval.pairs")?
                .unwrap_or_default()
                .iter()
                .map(|s| pair(s))
                .collect::<Result<_>>()?,
            search: BoundarySearch {
                cap: kv.get_or("eval.dist_cap", BoundarySearch::default().cap)?,
                tol: kv.get_or("eval.dist_tol", BoundarySearch::default().tol)?,
                scan_points: kv.get_or("eval.dist_scan", BoundarySearch::default().scan_points)?,
            },
            seed: kv.get_or("eval.seed", seed)?,
        };

        let grid = match kv.raw("grid.source") {
            None => None,
            Some(source) => Some(GridConfig {
                target: kv.raw("grid.target").unwrap_or_else(|| source.clone()),
                source,
                images: kv.list("grid.images")?.unwrap_or_default(),
                unit: kv.get_or("grid.unit", GRID_UNIT)?,
                half_extent: kv.get_or("grid.half_extent", GRID_HALF_EXTENT)?,
                resolution: kv.get_or("grid.resolution", GRID_RESOLUTION)?,
                seed: kv.get_or("grid.seed", seed)?,
            }),
        };

        let nonrobust = match kv.raw("nonrobust.f1") {
            None => None,
            Some(f1) => {
                let f2 = kv.raw("nonrobust.f2").ok_or_else(|| bad("`nonrobust.f2` is required"))?;
                let eps = kv.get_or("nonrobust.epsilon", 2.0)?;
                let nr_seed = kv.get_or("nonrobust.seed", seed)?;
                Some(NonRobustConfig {
                    attack: AttackTemplate::read(&mut kv, "nonrobust", Objective::NTargeted)?.at(eps)?,
                    replication: kv.get_or("nonrobust.replication", 1)?,
                    train_n: kv.get_or("nonrobust.train_n", 0)?,
                    presets: kv
                        .list("nonrobust.presets")?
                        .unwrap_or_else(|| vec!["Conv-2".to_string(), "FC-2".to_string()]),
                    retrain: optimizer(&mut kv, "nonrobust.train", retrain_config(nr_seed))?,
                    random_control: kv.get_or("nonrobust.random_control", true)?,
                    filtered: kv.get_or("nonrobust.filtered", false)?,
                    seed: nr_seed,
                    f1,
                    f2,
                })
            }
        };

        let ensemble = match kv.raw("ensemble.source") {
            None => None,
            Some(source) => {
                let eps = kv.get_or("ensemble.epsilon", 1.0)?;
                Some(EnsembleConfig {
                    extra: kv.list("ensemble.extra")?.unwrap_or_default(),
                    target: kv.raw("ensemble.target").ok_or_else(|| bad("`ensemble.target` is required"))?,
                    attack: AttackTemplate::read(&mut kv, "ensemble", Objective::Targeted)?.at(eps)?,
                    sample_n: kv.get_or("ensemble.sample_n", 2000)?,
                    seed: kv.get_or("ensemble.seed", seed)?,
                    source,
                })
            }
        };

        let theory = if !kv.has_prefix("theory") {
            None
        } else {
            Some(TheoryConfig {
                ds: kv.list("theory.d")?.unwrap_or_else(|| vec![10, 100, 1000]),
                etas: kv.list("theory.eta")?.unwrap_or_else(|| vec![0.05, 0.11, 0.3]),
                n: kv.get_or("theory.n", 100_000)?,
                p: kv.get_or("theory.p", 0.5)?,
                seed: kv.get_or("theory.seed", seed)?,
            })
        };

        kv.finish()?;
        let cfg = Self {
            seed,
            out_dir,
            data,
            train,
            models,
            attacks,
            eval,
            grid,
            nonrobust,
            ensemble,
            theory,
            config_hash,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KvConfig::parse(text)?)
    }

    pub fn model(&self, id: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.id == id)
    }

    /// Checks that every model reference resolves. Lineage cycles are
    /// detected when the roster is ordered.
    pub fn validate(&self) -> Result<()> {
        let known = |id: &str, what: &str| -> Result<()> {
            if self.model(id).is_none() {
                return Err(bad(format!("{what} refers to unknown model `{id}`")));
            }
            Ok(())
        };
        let mut seen = BTreeSet::new();
        for m in &self.models {
            if !seen.insert(&m.id) {
                return Err(bad(format!("duplicate model id `{}`", m.id)));
            }
        }
        for (a, b) in &self.eval.pairs {
            known(a, "eval.pairs")?;
            known(b, "eval.pairs")?;
        }
        if let Some(g) = &self.grid {
            known(&g.source, "grid.source")?;
            known(&g.target, "grid.target")?;
        }
        if let Some(n) = &self.nonrobust {
            known(&n.f1, "nonrobust.f1")?;
            known(&n.f2, "nonrobust.f2")?;
            if n.replication == 0 {
                return Err(bad("nonrobust.replication must be at least 1"));
            }
        }
        if let Some(e) = &self.ensemble {
            known(&e.source, "ensemble.source")?;
            known(&e.target, "ensemble.target")?;
            for x in &e.extra {
                known(x, "ensemble.extra")?;
            }
        }
        self.train.validate()?;
        super::roster::training_order(&self.models, self.train.epochs)?;
        Ok(())
    }

    /// (source, target) pairs the transfer sweep evaluates.
    pub fn transfer_pairs(&self) -> Vec<(String, String)> {
        if !self.eval.pairs.is_empty() {
            return self.eval.pairs.clone();
        }
        let mut out = Vec::new();
        for s in self.models.iter().filter(|m| m.role.is_source()) {
            for t in self.models.iter().filter(|m| m.role.is_target() && m.id != s.id) {
                out.push((s.id.clone(), t.id.clone()));
            }
        }
        out
    }
}
