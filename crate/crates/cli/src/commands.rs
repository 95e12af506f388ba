use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use atlab::attack::{self, AdversarialBatch, AttackSpec, Family, Objective};
use atlab::geometry::{boundary_grid, model_distance, outcome_overlay, DirectionPair};
use atlab::harness::{self, ExperimentConfig, KvConfig, LoadedData, ModelMeta, DIST_HEADER};
use atlab::metrics::{
    build_eligible_set, correctly_classified, ensemble_comparison, reports_to_csv, sample_indices, transfer_report,
};
use atlab::nn::{self, fit, Network};
use atlab::nonrobust::{
    build_nonrobust_sets, retrain_and_eval, retrain_config, success_breakdown, NonRobustBuildSpec,
    NonRobustDataset, BREAKDOWN_HEADER, RETRAIN_HEADER,
};
use atlab::theory::{sweep, sweep_csv};

use crate::{AttackArgs, Cli, Command};

/// Argument combinations clap cannot reject on its own.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut kv = match &cli.config {
            Some(p) => KvConfig::load(p)?,
            None => KvConfig::default(),
        };
        if let Some(s) = cli.seed {
            kv.set("seed", s);
        }
        let cfg = ExperimentConfig::from_kv(kv)?;
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { cfg, out })
    }

    fn data(&self) -> Result<LoadedData> {
        let data = harness::load_data(&self.cfg.data)?;
        if let Some(n) = &data.note {
            eprintln!("note: {n}");
        }
        Ok(data)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.out.join(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

fn model_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn load(path: &Path) -> Result<(String, Network<f64>)> {
    Ok((model_id(path), nn::load_model(path)?))
}

fn attack_spec(a: &AttackArgs, seed: u64) -> Result<AttackSpec> {
    let family: Family = a.family.parse()?;
    let objective: Objective = a.objective.parse()?;
    let eps = a.epsilon;
    let mut spec = match (family, objective) {
        (f, Objective::NTargeted) => AttackSpec {
            family: f,
            ..AttackSpec::n_targeted(eps)
        },
        (Family::Fgm, o) => AttackSpec::fgm(eps, o),
        (Family::Pgd, o) => AttackSpec::pgd(eps, o),
        (Family::Mim, o) => AttackSpec::mim(eps, o),
    };
    if let Some(s) = a.steps {
        spec.steps = s;
        spec.step_size = eps / 5.0;
    }
    if let Some(s) = a.step_size {
        spec.step_size = s;
    }
    if family == Family::Fgm {
        spec.step_size = eps;
    }
    if let Some(m) = a.momentum {
        spec.momentum_decay = m;
    }
    spec.seed = seed;
    spec.validate()?;
    Ok(spec)
}

fn check_index(i: usize, len: usize) -> Result<()> {
    if i >= len {
        return Err(usage(format!("image {i} is out of range for {len} test images")));
    }
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    if let Command::TheorySim { d, eta, n, p } = &cli.command {
        // Needs neither data nor models.
        let ctx = Ctx::new(&cli)?;
        let seed = ctx.cfg.theory.as_ref().map_or(ctx.cfg.seed, |t| t.seed);
        let seed = cli.seed.unwrap_or(seed);
        let rows = sweep(d, eta, *n, seed, *p)?;
        let csv = sweep_csv(&rows);
        ctx.write("theory.csv", &csv)?;
        print!("{csv}");
        let bad = rows.iter().filter(|r| !r.agrees()).count();
        if bad > 0 {
            eprintln!("warning: {bad} of {} rows disagree with the closed form", rows.len());
        }
        return Ok(());
    }
    let ctx = Ctx::new(&cli)?;
    let seed = ctx.cfg.seed;
    match cli.command {
        Command::TheorySim { .. } => unreachable!("handled above"),
        Command::Run => {
            let summary = harness::run_experiment(&ctx.cfg, &ctx.out)?;
            for t in &summary.manifest.tasks {
                let status = if t.ok { "ok" } else { "FAILED" };
                println!("{:<10} {status}", t.task);
                if let Some(e) = &t.error {
                    eprintln!("  {e}");
                }
            }
            println!("manifest: {}", ctx.out.join(harness::MANIFEST_NAME).display());
            if summary.manifest.partial {
                anyhow::bail!("one or more tasks failed");
            }
        }
        Command::Train { id, preset, epochs } => {
            let data = ctx.data()?;
            let mut net = Network::build(&preset, data.train.item_shape(), data.train.num_classes(), seed)?;
            let mut opt = ctx.cfg.train.clone();
            opt.seed = seed;
            if let Some(e) = epochs {
                opt.epochs = e;
            }
            let history = fit(&mut net, &data.train, &opt, Some(&data.test))?;
            let acc = nn::accuracy(&net, &data.test)?;
            let ckpt = ctx.out.join(format!("{id}.atlb"));
            nn::save_model(&net, &ckpt)?;
            let meta = ModelMeta {
                id: id.clone(),
                preset,
                seed,
                init_seed: seed,
                lineage: "fresh".into(),
                epochs_trained: opt.epochs,
                test_accuracy: acc,
                history: Some(history),
            };
            ctx.write(&format!("{id}.json"), serde_json::to_string_pretty(&meta)?)?;
            println!("{id}: test accuracy {acc:.4} -> {}", ckpt.display());
        }
        Command::Attack {
            model,
            attack: a,
            n,
            stem,
        } => {
            let data = ctx.data()?;
            let (id, net) = load(&model)?;
            let spec = attack_spec(&a, seed)?;
            if spec.objective == Objective::NTargeted {
                return Err(usage("`attack` runs single-model attacks; use nonrobust-build"));
            }
            let sub = data.test.take(n.min(data.test.len()));
            let y = sub.labels().to_vec();
            let (labels, targets) = match spec.objective {
                Objective::Targeted => {
                    let t = attack::sample_target_classes(&y, sub.num_classes(), spec.seed)?;
                    (t.clone(), vec![t])
                }
                _ => (y.clone(), Vec::new()),
            };
            let x_adv = attack::attack(&net, sub.images(), &labels, &spec)?;
            let batch = AdversarialBatch::new(&[(&id, &net)], sub.images().clone(), x_adv, y.clone(), targets, spec)?;
            batch.save(&ctx.out, &stem)?;
            let fooled = batch.source_predictions[0].iter().zip(&y).filter(|(p, t)| p != t).count();
            println!("{id}: fooled {fooled} of {} -> {}/{stem}", batch.len(), ctx.out.display());
        }
        Command::TransferEval {
            source,
            target,
            attack: a,
            sample_n,
            save_set,
        } => {
            let data = ctx.data()?;
            let (s, f1) = load(&source)?;
            let (t, f2) = load(&target)?;
            let spec = attack_spec(&a, seed)?;
            let set = build_eligible_set(&f1, &[&f2], &data.test, &spec, sample_n.min(data.test.len()), seed)?;
            let report = transfer_report(&s, &t, &data.id, &f2, &set)?;
            let csv = reports_to_csv(std::slice::from_ref(&report));
            ctx.write("transfer.csv", &csv)?;
            ctx.write("transfer.json", serde_json::to_string_pretty(&report)?)?;
            if save_set {
                set.save(&ctx.out, &format!("eligible_{s}_{t}"))?;
            }
            print!("{csv}");
        }
        Command::Dist { f1, f2, images } => {
            let data = ctx.data()?;
            let (a, m1) = load(&f1)?;
            let (b, m2) = load(&f2)?;
            let test = &data.test;
            let drawn = sample_indices(test.len(), images.min(test.len()), ctx.cfg.eval.seed)?;
            let keep = correctly_classified(&[&m1, &m2], test, &drawn)?;
            let mut csv = format!("{DIST_HEADER}\n");
            if keep.is_empty() {
                let _ = writeln!(csv, "{a},{b},NA,0,0,0");
            } else {
                let sub = test.subset(&keep);
                let d = model_distance(&m1, &m2, sub.images(), sub.labels(), &ctx.cfg.eval.search)?;
                let _ = writeln!(csv, "{a},{b},{},{},{},{}", d.dist, d.n_images, d.capped_f1, d.capped_f2);
            }
            ctx.write("dist.csv", &csv)?;
            print!("{csv}");
        }
        Command::BoundaryGrid {
            source,
            target,
            image,
            unit,
            half_extent,
            resolution,
        } => {
            let data = ctx.data()?;
            check_index(image, data.test.len())?;
            let (s, f1) = load(&source)?;
            let x = data.test.images().item(image);
            let y = data.test.labels()[image];
            let image_id = format!("test-{image}");
            let dirs = DirectionPair::from_gradient(&f1, x, y, unit, seed.wrapping_add(image as u64))?;
            let g1 = boundary_grid(&f1, &s, x, &image_id, &dirs, half_extent, resolution)?;
            let mut files = g1.save(&ctx.out, &format!("{s}_{image_id}"))?;
            if let Some(target) = target {
                let (t, f2) = load(&target)?;
                let g2 = boundary_grid(&f2, &t, x, &image_id, &dirs, half_extent, resolution)?;
                files.extend(g2.save(&ctx.out, &format!("{t}_{image_id}"))?);
                let overlay = outcome_overlay(&g1, &g2, y)?;
                files.extend(overlay.save(&ctx.out, &format!("overlay_{s}_{t}_{image_id}"))?);
            }
            match g1.first_flip_along_u() {
                Some(k) => println!("{s}: first label change along the gradient at offset {k}"),
                None => println!("{s}: no label change along the gradient inside the grid"),
            }
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::NonrobustBuild {
            f1,
            f2,
            epsilon,
            steps,
            step_size,
            replication,
            train_n,
        } => {
            let data = ctx.data()?;
            let (a, m1) = load(&f1)?;
            let (b, m2) = load(&f2)?;
            let mut spec = NonRobustBuildSpec::new(&a, &b, epsilon, seed);
            spec.attack.steps = steps;
            spec.attack.step_size = step_size;
            spec.replication = replication;
            spec.validate()?;
            let source = if train_n == 0 {
                data.train.clone()
            } else {
                data.train.take(train_n.min(data.train.len()))
            };
            let sets = build_nonrobust_sets(&source, &m1, &m2, &spec)?;
            sets.d1.save(&ctx.out)?;
            sets.d2.save(&ctx.out)?;
            let mut csv = format!("{BREAKDOWN_HEADER}\n");
            if let Some(r) = success_breakdown(&sets.stats) {
                let _ = writeln!(
                    csv,
                    "{a},{b},{epsilon},{},{},{},{},{}",
                    sets.stats.n, r.f1_rate, r.f2_rate, r.joint_rate, r.same_target_rate
                );
            }
            ctx.write("success.csv", &csv)?;
            print!("{csv}");
            println!("{}\n{}", sets.d1.stem(), sets.d2.stem());
        }
        Command::NonrobustTrain {
            dir,
            stem,
            preset,
            epochs,
            batch_size,
            random_labels,
            filtered,
        } => {
            let data = ctx.data()?;
            let mut ds = NonRobustDataset::load(&dir, &stem, &data.train)?;
            if filtered {
                ds = ds.filtered(true);
            }
            if random_labels {
                ds = ds.random_labels(seed.wrapping_add(1));
            }
            let mut opt = ctx
                .cfg
                .nonrobust
                .as_ref()
                .map_or_else(|| retrain_config(seed), |n| n.retrain.clone());
            if let Some(e) = epochs {
                opt.epochs = e;
            }
            if let Some(b) = batch_size {
                opt.batch_size = b;
            }
            let (r, net) = retrain_and_eval(&ds, &preset, seed, &opt, &data.test)?;
            let csv = format!("{RETRAIN_HEADER}\n{}\n", r.csv_row(&ds.spec));
            let name = format!("{}_{preset}", ds.stem());
            nn::save_model(&net, &ctx.out.join(format!("{name}.atlb")))?;
            ctx.write(&format!("{name}.csv"), &csv)?;
            print!("{csv}");
        }
        Command::EnsembleCompare {
            source,
            extra,
            target,
            epsilon,
            steps,
            sample_n,
        } => {
            let data = ctx.data()?;
            let (_, src) = load(&source)?;
            let (_, tgt) = load(&target)?;
            let extra = extra.iter().map(|p| load(p).map(|(_, m)| m)).collect::<Result<Vec<_>>>()?;
            let extra_refs: Vec<&Network<f64>> = extra.iter().collect();
            let spec = AttackSpec::pgd(epsilon, Objective::Targeted)
                .with_steps(steps, epsilon / 5.0)
                .with_seed(seed);
            spec.validate()?;
            let cmp = ensemble_comparison(&src, &extra_refs, &tgt, &data.test, &spec, sample_n.min(data.test.len()), seed)?;
            let csv = cmp.to_csv();
            ctx.write("ensemble.csv", &csv)?;
            ctx.write("ensemble.json", serde_json::to_string_pretty(&cmp)?)?;
            print!("{csv}");
        }
    }
    Ok(())
}
