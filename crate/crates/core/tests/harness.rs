use std::fs;
use std::path::Path;

use atlab::attack::{Family, Objective};
use atlab::data::SyntheticSpec;
use atlab::error::LabError;
use atlab::harness::{
    load_data, prepare_roster, run_experiment, training_order, verify_manifest, DataSource, ExperimentConfig,
    KvConfig, Lineage, MANIFEST_NAME,
};
use atlab::nn::checkpoint::{decode, encode};
use atlab::nn::Network;

const TINY: &str = "
seed = 3
data.source = synthetic
data.synthetic.shape = 1, 8, 8
data.synthetic.train = 200
data.synthetic.test = 100
train.epochs = 3
train.batch_size = 20
train.lr_decay_epochs = 2
model.a.preset = FC-2
model.b.preset = FC-2
model.b.lineage = same-init-as:a
model.c.preset = dense(64,10)
";

fn cfg(extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!("{TINY}\n{extra}")).unwrap()
}

#[test]
fn key_value_parsing() {
    let mut kv = KvConfig::parse("# header\n a.b = 1 # trailing\n\nx = 2.5, 3\n").unwrap();
    assert_eq!(kv.get::<u32>("a.b").unwrap(), Some(1));
    assert_eq!(kv.list::<f64>("x").unwrap(), Some(vec![2.5, 3.0]));
    kv.finish().unwrap();
    assert!(KvConfig::parse("a = 1\na = 2").is_err());
    assert!(KvConfig::parse("no equals sign").is_err());
    assert!(KvConfig::parse("a..b = 1").is_err());
    let e = ExperimentConfig::parse("data.source = synthetic\nmodel.a.preset = FC-2\nmodel.a.colour = red").unwrap_err();
    assert!(matches!(e, LabError::InvalidConfig(_)) && e.to_string().contains("model.a.colour"));
    assert_eq!(e.exit_code(), 1);
    assert!(ExperimentConfig::parse("data.source = tape").is_err());
    let a = KvConfig::parse("x = 1\ny = 2").unwrap();
    let b = KvConfig::parse("y = 2\n# c\nx = 1").unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), KvConfig::parse("x = 1\ny = 3").unwrap().hash());
}

#[test]
fn attack_sweeps_expand_per_budget() {
    let c = cfg("attack.p.epsilon = 0.25, 0.5, 1.0, 2.0\nattack.m.family = mim\nattack.m.objective = targeted\nattack.m.epsilon = 1.0\nattack.m.steps = 20\nattack.f.family = fgm\nattack.f.epsilon = 0.5");
    assert_eq!(c.attacks.len(), 6);
    let fgm = &c.attacks[0];
    assert_eq!((fgm.family, fgm.steps, fgm.step_size), (Family::Fgm, 1, 0.5));
    let mim = &c.attacks[1];
    assert_eq!((mim.family, mim.objective, mim.steps), (Family::Mim, Objective::Targeted, 20));
    assert!((mim.step_size - 0.2).abs() < 1e-15);
    let eps: Vec<f64> = c.attacks[2..].iter().map(|a| a.epsilon).collect();
    assert_eq!(eps, vec![0.25, 0.5, 1.0, 2.0]);
    assert!(c.attacks[2..].iter().all(|a| a.family == Family::Pgd && (a.step_size - a.epsilon / 5.0).abs() < 1e-15));
    assert!(ExperimentConfig::parse(&format!("{TINY}\nattack.p.epsilon = 0.0")).is_err());
    assert!(ExperimentConfig::parse(&format!("{TINY}\nattack.p.epsilon = 1\nattack.p.objective = n-targeted")).is_err());
    assert_eq!(c.transfer_pairs().len(), 6);
    let explicit = cfg("eval.pairs = a:b, c:a");
    assert_eq!(explicit.transfer_pairs(), vec![("a".into(), "b".into()), ("c".into(), "a".into())]);
    assert!(ExperimentConfig::parse(&format!("{TINY}\neval.pairs = a:z")).is_err());
}

#[test]
fn lineage_validation() {
    let parse = |s: &str| s.parse::<Lineage>().unwrap();
    assert_eq!(parse("epoch-snapshot-of:a@20"), Lineage::EpochSnapshotOf("a".into(), 20));
    assert_eq!(parse("epoch-snapshot-of:a@final"), Lineage::FinalSnapshotOf("a".into()));
    assert_eq!(parse("same-init-as:a").to_string(), "same-init-as:a");
    assert!("epoch-snapshot-of:a".parse::<Lineage>().is_err());

    let lineage_error = |extra: &str| {
        let e = ExperimentConfig::parse(&format!("{TINY}\n{extra}")).unwrap_err();
        assert!(matches!(e, LabError::Lineage(_)), "{e}");
    };
    lineage_error("model.a.lineage = same-init-as:b");
    lineage_error("model.d.preset = FC-2\nmodel.d.lineage = same-init-as:d");
    lineage_error("model.d.preset = FC-2\nmodel.d.lineage = same-init-as:zz");
    lineage_error("model.d.preset = FC-2\nmodel.d.lineage = epoch-snapshot-of:a@4");
    lineage_error("model.d.preset = FC-2\nmodel.d.lineage = epoch-snapshot-of:a@1\nmodel.e.preset = FC-2\nmodel.e.lineage = epoch-snapshot-of:d@1");
    lineage_error("model.d.preset = dense(64,10)\nmodel.d.lineage = same-init-as:a");

    let c = cfg("model.s.preset = FC-2\nmodel.s.lineage = epoch-snapshot-of:b@2");
    let order: Vec<&str> = training_order(&c.models, 3).unwrap().iter().map(|&i| c.models[i].id.as_str()).collect();
    assert_eq!(order, vec!["a", "b", "c"]);
}

#[test]
fn roster_lineage_semantics() {
    let c = cfg("model.a.seed = 11\nmodel.b.seed = 12\nmodel.s0.preset = FC-2\nmodel.s0.lineage = epoch-snapshot-of:a@0\nmodel.s2.preset = FC-2\nmodel.s2.lineage = epoch-snapshot-of:a@2\nmodel.sf.preset = FC-2\nmodel.sf.lineage = epoch-snapshot-of:a@final");
    let data = load_data(&c.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let roster = prepare_roster(&c, &data.train, &data.test, Some(dir.path())).unwrap();
    assert_eq!(roster.models.len(), 6);
    assert_eq!(roster.files.len(), 12);

    // Same initial parameters, different shuffles.
    let init = decode::<f64>(&encode(&Network::<f64>::build("FC-2", &[1, 8, 8], 10, 11).unwrap())).unwrap();
    assert_eq!(roster.get("s0").unwrap(), &init);
    assert_eq!(roster.meta("b").unwrap().init_seed, 11);
    assert_ne!(roster.get("a").unwrap(), roster.get("b").unwrap());
    assert_eq!(roster.get("sf").unwrap(), roster.get("a").unwrap());
    assert_ne!(roster.get("s2").unwrap(), roster.get("a").unwrap());
    assert_eq!(roster.meta("s2").unwrap().epochs_trained, 2);
    assert_eq!(roster.meta("s2").unwrap().history.as_ref().unwrap().epochs.len(), 2);
    for m in &roster.models {
        let on_disk = atlab::nn::load_model::<f64>(dir.path().join(format!("{}.atlb", m.entry.id))).unwrap();
        assert_eq!(on_disk, m.network);
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(format!("{}.json", m.entry.id))).unwrap()).unwrap();
        assert_eq!(meta["lineage"], m.entry.lineage.to_string());
    }
    let again = prepare_roster(&c, &data.train, &data.test, None).unwrap();
    for (x, y) in again.models.iter().zip(&roster.models) {
        assert_eq!(x.network, y.network);
    }
}

const FULL: &str = "
attack.p.epsilon = 0.5, 1.0
attack.p.steps = 4
eval.sample_n = 60
eval.dist_images = 15
grid.source = a
grid.target = c
grid.images = 0, 1
grid.half_extent = 4
grid.resolution = 9
nonrobust.f1 = a
nonrobust.f2 = c
nonrobust.epsilon = 1.0
nonrobust.steps = 5
nonrobust.train_n = 40
nonrobust.presets = FC-2
nonrobust.filtered = true
nonrobust.train.epochs = 2
nonrobust.train.batch_size = 10
ensemble.source = a
ensemble.extra = b
ensemble.target = c
ensemble.steps = 4
ensemble.sample_n = 40
theory.d = 10
theory.eta = 0.3
theory.n = 1000
";

fn bundle_files(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                if rel != MANIFEST_NAME {
                    out.push(rel);
                }
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_bundle_is_complete_hashed_and_deterministic() {
    let c = cfg(FULL);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let run = run_experiment(&c, d1.path()).unwrap();
    let m = &run.manifest;
    assert!(!m.partial, "{:?}", m.tasks);
    assert_eq!(m.config_hash, c.config_hash);
    assert_eq!(run.reports.len(), 2 * 6);
    let listed: Vec<String> = m.files.iter().map(|f| f.path.clone()).collect();
    assert_eq!(listed, bundle_files(d1.path()));
    for f in [
        "reports/transfer.csv",
        "reports/transfer.json",
        "reports/dist.csv",
        "reports/ensemble.csv",
        "reports/theory.csv",
        "nonrobust/retrain.csv",
        "nonrobust/success.csv",
        "models/a.atlb",
        "grids/overlay_a_c_test-1.csv",
    ] {
        assert!(listed.iter().any(|p| p == f), "{f} missing");
    }
    assert!(verify_manifest(d1.path()).unwrap().is_empty());

    let retrain = fs::read_to_string(d1.path().join("nonrobust/retrain.csv")).unwrap();
    // y1, y2, random, filtered y1, filtered y2.
    assert_eq!(retrain.lines().count(), 6);

    run_experiment(&c, d2.path()).unwrap();
    for f in &m.files {
        let a = fs::read(d1.path().join(&f.path)).unwrap();
        let b = fs::read(d2.path().join(&f.path)).unwrap();
        assert!(a == b, "{} differs between runs", f.path);
    }

    fs::write(d1.path().join("reports/dist.csv"), "tampered").unwrap();
    assert_eq!(verify_manifest(d1.path()).unwrap(), vec!["reports/dist.csv".to_string()]);
}

#[test]
fn empty_sweeps_and_failed_tasks() {
    let c = cfg("eval.dist_images = 0");
    let d = tempfile::tempdir().unwrap();
    let run = run_experiment(&c, d.path()).unwrap();
    assert!(!run.manifest.partial);
    assert!(run.reports.is_empty());
    assert!(run.manifest.files.iter().all(|f| f.path.starts_with("models/")));

    let c = cfg("eval.dist_images = 0\ngrid.source = a\ngrid.images = 5000\ntheory.n = 1000\ntheory.d = 10\ntheory.eta = 0.1");
    let d = tempfile::tempdir().unwrap();
    let m = run_experiment(&c, d.path()).unwrap().manifest;
    assert!(m.partial);
    let grid = m.tasks.iter().find(|t| t.task == "grids").unwrap();
    assert!(!grid.ok && grid.error.as_ref().unwrap().contains("out of range"));
    assert!(m.tasks.iter().find(|t| t.task == "theory").unwrap().ok);
    assert!(d.path().join("reports/theory.csv").is_file());
}

#[test]
fn fashion_source_falls_back_to_synthetic() {
    let empty = tempfile::tempdir().unwrap();
    let fallback = SyntheticSpec {
        input_shape: vec![1, 8, 8],
        train_count: 20,
        test_count: 10,
        ..SyntheticSpec::small()
    };
    let d = load_data(&DataSource::Fashion {
        dir: Some(empty.path().to_path_buf()),
        fallback,
    })
    .unwrap();
    assert_eq!(d.id, "synthetic");
    assert!(d.note.is_some());
    assert_eq!(d.train.len(), 20);
}

#[test]
fn documented_example_configuration_parses() {
    let text = "
seed = 7
data.source = fashion          # fashion | idx | cifar | synthetic
train.epochs = 10
train.lr_decay_epochs = 7

model.a.preset = Conv-2
model.a.seed = 1
model.b.preset = Conv-2
model.b.lineage = same-init-as:a
model.c.preset = FC-2
model.a5.preset = Conv-2
model.a5.lineage = epoch-snapshot-of:a@5

attack.pgd.epsilon = 0.25, 0.5, 1, 2
attack.pgd.steps = 10
eval.sample_n = 2000

grid.source = a
grid.target = c
grid.images = 0, 1, 2

nonrobust.f1 = a
nonrobust.f2 = c
nonrobust.train_n = 1200

ensemble.source = a
ensemble.extra = b
ensemble.target = c

theory.d = 10, 100, 1000
theory.eta = 0.05, 0.11, 0.3
";
    let c = ExperimentConfig::parse(text).unwrap();
    assert_eq!(c.models.len(), 4);
    assert_eq!(c.attacks.len(), 4);
    assert!(c.attacks.iter().all(|a| a.steps == 10 && a.family == Family::Pgd));
    assert_eq!(c.grid.as_ref().unwrap().images, vec![0, 1, 2]);
    assert_eq!(c.nonrobust.as_ref().unwrap().train_n, 1200);
    assert_eq!(c.ensemble.as_ref().unwrap().extra, vec!["b".to_string()]);
    assert_eq!(c.theory.as_ref().unwrap().ds, vec![10, 100, 1000]);
    assert!(matches!(c.data, DataSource::Fashion { .. }));
}
