//! Trained model rosters with lineage: fresh models, models sharing another
//! model's initial parameters, and epoch snapshots.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Lineage, ModelEntry};
use crate::data::Dataset;
use crate::error::{LabError, Result};
use crate::nn::checkpoint::{decode, encode};
use crate::nn::{accuracy, fit_with, History, Network};

fn lineage_err(msg: String) -> LabError {
    LabError::Lineage(msg)
}

/// Indices of the models that train, parents first. Snapshots are taken
/// while their source trains and never appear here. Errors on unknown
/// references, cycles, mismatched presets and out-of-range epochs.
pub fn training_order(models: &[ModelEntry], epochs: usize) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = models.iter().enumerate().map(|(i, m)| (m.id.as_str(), i)).collect();
    let parent = |i: usize| -> Result<Option<usize>> {
        let m = &models[i];
        let r = match &m.lineage {
            Lineage::Fresh => return Ok(None),
            Lineage::SameInitAs(r) | Lineage::EpochSnapshotOf(r, _) | Lineage::FinalSnapshotOf(r) => r,
        };
        let p = *index
            .get(r.as_str())
            .ok_or_else(|| lineage_err(format!("`{}` refers to unknown model `{r}`", m.id)))?;
        Ok(Some(p))
    };
    let is_snapshot = |m: &ModelEntry| matches!(m.lineage, Lineage::EpochSnapshotOf(..) | Lineage::FinalSnapshotOf(_));

    for (i, m) in models.iter().enumerate() {
        // Walk the parent chain; a revisit means a cycle.
        let mut seen = vec![i];
        let mut cur = i;
        while let Some(p) = parent(cur)? {
            if seen.contains(&p) {
                let chain: Vec<&str> = seen.iter().map(|&k| models[k].id.as_str()).collect();
                return Err(lineage_err(format!("lineage cycle through {}", chain.join(" -> "))));
            }
            seen.push(p);
            cur = p;
        }
        if let Some(p) = parent(i)? {
            let pm = &models[p];
            if is_snapshot(pm) {
                return Err(lineage_err(format!(
                    "`{}` refers to snapshot `{}`; refer to a trained model",
                    m.id, pm.id
                )));
            }
            if pm.preset != m.preset && !is_snapshot(m) {
                return Err(lineage_err(format!(
                    "`{}` ({}) cannot share initial parameters with `{}` ({})",
                    m.id, m.preset, pm.id, pm.preset
                )));
            }
        }
        if let Lineage::EpochSnapshotOf(_, e) = m.lineage {
            if e > epochs {
                return Err(lineage_err(format!(
                    "`{}` snapshots epoch {e} of a {epochs}-epoch training",
                    m.id
                )));
            }
        }
    }

    let mut order = Vec::new();
    let mut placed = vec![false; models.len()];
    while order.len() < models.iter().filter(|m| !is_snapshot(m)).count() {
        let before = order.len();
        for i in 0..models.len() {
            if placed[i] || is_snapshot(&models[i]) {
                continue;
            }
            if parent(i)?.is_none_or(|p| placed[p]) {
                placed[i] = true;
                order.push(i);
            }
        }
        if order.len() == before {
            return Err(lineage_err("unresolvable lineage".into()));
        }
    }
    Ok(order)
}

/// Lineage metadata written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub id: String,
    pub preset: String,
    pub seed: u64,
    /// Seed the initial parameters were drawn from.
    pub init_seed: u64,
    pub lineage: String,
    pub epochs_trained: usize,
    pub test_accuracy: f64,
    pub history: Option<History>,
}

#[derive(Debug, Clone)]
pub struct RosterModel {
    pub entry: ModelEntry,
    pub network: Network<f64>,
    pub meta: ModelMeta,
}

#[derive(Debug, Clone, Default)]
pub struct Roster {
    pub models: Vec<RosterModel>,
    /// Checkpoint and metadata files, when written.
    pub files: Vec<PathBuf>,
}

impl Roster {
    pub fn get(&self, id: &str) -> Result<&Network<f64>> {
        self.models
            .iter()
            .find(|m| m.entry.id == id)
            .map(|m| &m.network)
            .ok_or_else(|| LabError::InvalidConfig(format!("no model `{id}` in the roster")))
    }

    pub fn meta(&self, id: &str) -> Option<&ModelMeta> {
        self.models.iter().find(|m| m.entry.id == id).map(|m| &m.meta)
    }
}

fn init_seed(models: &[ModelEntry], i: usize) -> u64 {
    let mut cur = &models[i];
    while let Lineage::SameInitAs(r) = &cur.lineage {
        cur = models.iter().find(|m| &m.id == r).expect("validated lineage");
    }
    cur.seed
}

/// Checkpoint round trip, so in-memory and reloaded rosters agree.
fn through_checkpoint(net: &Network<f64>) -> Result<Network<f64>> {
    decode(&encode(net))
}

/// Trains the roster in lineage order. Every model passes through the
/// checkpoint encoding; with `dir` set, `<id>.atlb` and `<id>.json` are
/// written there and the models are reloaded from disk.
pub fn prepare_roster(
    cfg: &ExperimentConfig,
    train: &Dataset<f64>,
    test: &Dataset<f64>,
    dir: Option<&Path>,
) -> Result<Roster> {
    let models = &cfg.models;
    let order = training_order(models, cfg.train.epochs)?;
    let mut done: Vec<Option<RosterModel>> = vec![None; models.len()];
    let shape = train.item_shape().to_vec();
    let classes = train.num_classes();

    for i in order {
        let entry = &models[i];
        let seed0 = init_seed(models, i);
        let mut net = Network::build(&entry.preset, &shape, classes, seed0)?;
        let snapshots: Vec<(usize, Option<usize>)> = models
            .iter()
            .enumerate()
            .filter_map(|(k, m)| match &m.lineage {
                Lineage::EpochSnapshotOf(r, e) if r == &entry.id => Some((k, Some(*e))),
                Lineage::FinalSnapshotOf(r) if r == &entry.id => Some((k, None)),
                _ => None,
            })
            .collect();
        let mut taken: Vec<(usize, usize, Network<f64>)> = Vec::new();
        for &(k, e) in &snapshots {
            if e == Some(0) {
                taken.push((k, 0, net.clone()));
            }
        }
        let opt = crate::nn::OptimizerConfig {
            seed: entry.seed,
            ..cfg.train.clone()
        };
        let history = fit_with(&mut net, train, &opt, None, |epoch, m| {
            for &(k, e) in &snapshots {
                if e == Some(epoch) {
                    taken.push((k, epoch, m.clone()));
                }
            }
            Ok(())
        })?;
        for &(k, e) in &snapshots {
            if e.is_none() {
                taken.push((k, opt.epochs, net.clone()));
            }
        }

        let mut finish = |k: usize, network: Network<f64>, epochs: usize, history: Option<History>| -> Result<()> {
            let network = through_checkpoint(&network)?;
            let e = &models[k];
            let meta = ModelMeta {
                id: e.id.clone(),
                preset: e.preset.clone(),
                seed: e.seed,
                init_seed: seed0,
                lineage: e.lineage.to_string(),
                epochs_trained: epochs,
                test_accuracy: accuracy(&network, test)?,
                history,
            };
            done[k] = Some(RosterModel {
                entry: e.clone(),
                network,
                meta,
            });
            Ok(())
        };
        for (k, epoch, snap) in taken {
            let h = history.epochs.get(..epoch).map(|e| History { epochs: e.to_vec() });
            finish(k, snap, epoch, h)?;
        }
        finish(i, net, opt.epochs, Some(history))?;
    }

    let mut roster = Roster {
        models: done.into_iter().map(|m| m.expect("every model trained")).collect(),
        files: Vec::new(),
    };
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        for m in &mut roster.models {
            let ckpt = dir.join(format!("{}.atlb", m.entry.id));
            let json = dir.join(format!("{}.json", m.entry.id));
            crate::nn::save_model(&m.network, &ckpt)?;
            fs::write(&json, serde_json::to_string_pretty(&m.meta)?).map_err(|e| LabError::io(&json, e))?;
            m.network = crate::nn::load_model(&ckpt)?;
            roster.files.push(ckpt);
            roster.files.push(json);
        }
    }
    Ok(roster)
}
