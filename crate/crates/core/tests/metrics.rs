use atlab::attack::{AttackSpec, Objective};
use atlab::data::{generate_synthetic, Dataset, SyntheticSpec};
use atlab::metrics::{
    build_eligible_set, classify_outcome, classify_outcomes, pearson, reports_to_csv, transfer_report, EligibleItem,
    EligibleSet, Outcome, TransferReport, CSV_HEADER,
};
use atlab::nn::{fit, Architecture, LayerSpec, Network, OptimizerConfig, Param};
use atlab::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `dense(2, 3)` with explicit weights (row-major `[3, 2]`) and biases.
fn linear2d(w: [f64; 6], b: [f64; 3]) -> Network<f64> {
    let arch = Architecture::new(vec![LayerSpec::Dense { inputs: 2, outputs: 3 }], &[2], 3).unwrap();
    let p = Param {
        weight: Tensor::new(vec![3, 2], w.to_vec()).unwrap(),
        bias: Tensor::new(vec![3], b.to_vec()).unwrap(),
    };
    Network::from_params(arch, vec![Some(p)]).unwrap()
}

fn item(x: [f64; 2], x_adv: [f64; 2], y: usize, y1: usize) -> EligibleItem<f64> {
    EligibleItem {
        index: 0,
        x: x.to_vec(),
        x_adv: x_adv.to_vec(),
        y,
        y1,
        target: None,
    }
}

#[test]
fn hand_built_pair_gives_a_different_mistake() {
    // F1: class 1 right of x0 = 0.5, else 0. F2: class 2 right of x0 = 0.5, else 0.
    let f1 = linear2d([0.0, 0.0, 10.0, 0.0, 0.0, 0.0], [0.0, -5.0, -10.0]);
    let f2 = linear2d([0.0, 0.0, 0.0, 0.0, 10.0, 0.0], [0.0, -10.0, -5.0]);
    let it = item([0.2, 0.5], [0.8, 0.5], 0, 1);
    assert_eq!(f1.predict(&Tensor::new(vec![1, 2], it.x_adv.clone()).unwrap()).unwrap(), vec![1]);
    assert_eq!(classify_outcome(&f2, &it, &[2]).unwrap(), Outcome::DifferentMistake);
    assert_eq!(classify_outcome(&f1, &it, &[2]).unwrap(), Outcome::SameMistake);
    let constant = linear2d([0.0; 6], [1.0, 0.0, 0.0]);
    assert_eq!(classify_outcome(&constant, &it, &[2]).unwrap(), Outcome::Unfooled);
}

fn fake_set(outcomes: &[Outcome]) -> (EligibleSet<f64>, Vec<(Outcome, usize)>) {
    let items: Vec<_> = outcomes.iter().map(|_| item([0.1, 0.1], [0.2, 0.2], 0, 1)).collect();
    let pairs = outcomes
        .iter()
        .map(|&o| {
            let y2 = match o {
                Outcome::Unfooled => 0,
                Outcome::SameMistake => 1,
                Outcome::DifferentMistake => 2,
            };
            (o, y2)
        })
        .collect();
    let set = EligibleSet {
        item_shape: vec![2],
        items,
        attack: AttackSpec::pgd(1.0, Objective::NonTargeted),
        sampled: outcomes.len(),
        all_correct: outcomes.len(),
    };
    (set, pairs)
}

#[test]
fn report_arithmetic_and_csv() {
    use Outcome::*;
    let (set, o) = fake_set(&[Unfooled, Unfooled, DifferentMistake, SameMistake]);
    let r = TransferReport::from_outcomes("a", "b", "d", &set, &o);
    let ratios = r.ratios.unwrap();
    assert_eq!((ratios.unfooled, ratios.different, ratios.same), (0.5, 0.25, 0.25));
    assert_eq!(r.pairs, vec![(1, 0), (1, 0), (1, 2), (1, 1)]);
    assert_eq!(r.csv_row(), "a,b,pgd,non-targeted,1,10,4,2,1,1,0.5,0.25,0.25");
    assert_eq!(CSV_HEADER.split(',').count(), 13);

    let (set, o) = fake_set(&[SameMistake; 3]);
    let r = TransferReport::from_outcomes("a", "b", "d", &set, &o);
    assert_eq!(r.ratios.unwrap().same, 1.0);

    let (set, o) = fake_set(&[]);
    let r = TransferReport::from_outcomes("a", "b", "d", &set, &o);
    assert!(r.ratios.is_none());
    assert!(r.csv_row().ends_with(",0,0,0,0,NA,NA,NA"));
    let json = serde_json::to_value(&r).unwrap();
    assert!(json["ratios"].is_null());
    let csv = reports_to_csv(&[r]);
    assert!(csv.starts_with(CSV_HEADER) && csv.ends_with('\n') && !csv.contains('\r'));
}

#[test]
fn pearson_matches_hand_computation() {
    // Means 3 and 3; Sxy = 8, Sxx = Syy = 10.
    let r = pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap().unwrap();
    assert!((r - 0.8).abs() < 1e-15);
}

#[test]
fn constant_source_yields_an_empty_set() {
    let spec = SyntheticSpec {
        train_count: 10,
        test_count: 100,
        ..SyntheticSpec::small()
    };
    let (_, test) = generate_synthetic::<f64>(&spec).unwrap();
    let mut f1 = Network::build("dense(144,10)", &[1, 12, 12], 10, 0).unwrap();
    let p = f1.params_mut()[0].as_mut().unwrap();
    p.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
    p.bias.data_mut()[4] = 1.0;
    let set = build_eligible_set(&f1, &[&f1], &test, &AttackSpec::pgd(2.0, Objective::NonTargeted), 100, 0).unwrap();
    assert_eq!(set.all_correct, 10);
    assert!(set.is_empty());
    let r = transfer_report("c", "c", "syn", &f1, &set).unwrap();
    assert_eq!(r.n_eligible, 0);
    assert!(r.ratios.is_none());
}

fn trained_pair() -> (Network<f64>, Network<f64>, Dataset<f64>) {
    let spec = SyntheticSpec {
        train_count: 2000,
        test_count: 400,
        ..SyntheticSpec::small()
    };
    let (train, test) = generate_synthetic::<f64>(&spec).unwrap();
    let cfg = OptimizerConfig {
        epochs: 6,
        lr_decay_epochs: vec![],
        ..OptimizerConfig::default()
    };
    let mut a = Network::build("FC-2", &[1, 12, 12], 10, 1).unwrap();
    let mut b = Network::build("FC-2", &[1, 12, 12], 10, 2).unwrap();
    fit(&mut a, &train, &cfg, None).unwrap();
    fit(&mut b, &train, &OptimizerConfig { seed: 1, ..cfg }, None).unwrap();
    (a, b, test)
}

#[test]
fn eligible_sets_are_deterministic_verified_and_persist() {
    let (a, b, test) = trained_pair();
    let spec = AttackSpec::pgd(2.0, Objective::NonTargeted).with_steps(20, 0.2);
    let s1 = build_eligible_set(&a, &[&b], &test, &spec, 300, 7).unwrap();
    let s2 = build_eligible_set(&a, &[&b], &test, &spec, 300, 7).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(s1.sampled, 300);
    // A large budget fools the source on nearly every both-correct image.
    assert!(s1.len() as f64 >= 0.95 * s1.all_correct as f64, "{} / {}", s1.len(), s1.all_correct);
    s1.verify(&a, &b).unwrap();

    let r = transfer_report("a", "a", "syn", &a, &s1).unwrap();
    assert_eq!(r.same, r.n_eligible);

    let dir = tempfile::tempdir().unwrap();
    s1.save(dir.path(), "e").unwrap();
    assert_eq!(EligibleSet::load(dir.path(), "e", &a, &b).unwrap(), s1);
    let mut bad = s1.clone();
    bad.items[0].y1 = (bad.items[0].y1 + 1) % 10;
    if bad.items[0].y1 == bad.items[0].y {
        bad.items[0].y1 = (bad.items[0].y1 + 1) % 10;
    }
    bad.save(dir.path(), "bad").unwrap();
    assert!(EligibleSet::load(dir.path(), "bad", &a, &b).is_err());

    let targeted = AttackSpec::pgd(2.0, Objective::Targeted).with_seed(3);
    let st = build_eligible_set(&a, &[&b], &test, &targeted, 200, 7).unwrap();
    let rt = transfer_report("a", "b", "syn", &b, &st).unwrap();
    assert!(rt.targeted);
    let hits = st.items.iter().filter(|it| it.target == Some(it.y1)).count();
    assert_eq!(rt.y1_is_target, Some(hits));
    assert!(rt.same_on_target.unwrap() <= hits);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reports_partition_and_self_transfer_is_same(seed in 0u64..10_000, n in 5usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f1 = Network::build("dense(6,8);relu;dense(8,4)", &[6], 4, seed).unwrap();
        let f2 = Network::build("dense(6,8);relu;dense(8,4)", &[6], 4, seed + 1).unwrap();
        let x = Tensor::new(vec![n, 6], (0..n * 6).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let y1 = f1.predict(&x).unwrap();
        // Label by F1 so that F1 is correct on every image.
        let data = Dataset::new(x, y1, 4).unwrap();
        let spec = AttackSpec::pgd(rng.gen_range(0.1..3.0), Objective::NonTargeted);
        for gate in [vec![&f1], vec![&f2]] {
            let set = build_eligible_set(&f1, &gate, &data, &spec, n, seed).unwrap();
            for f in [&f1, &f2] {
                let r = transfer_report("1", "2", "p", f, &set).unwrap();
                prop_assert_eq!(r.unfooled + r.different + r.same, r.n_eligible);
                prop_assert_eq!(r.n_eligible, set.len());
                if let Some(q) = r.ratios {
                    prop_assert!((q.unfooled + q.different + q.same - 1.0).abs() < 1e-12);
                    for v in [q.unfooled, q.different, q.same] {
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
            let own = classify_outcomes(&f1, &set).unwrap();
            prop_assert!(own.iter().all(|(o, _)| *o == Outcome::SameMistake));
            let r = transfer_report("1", "1", "p", &f1, &set).unwrap();
            if r.n_eligible > 0 {
                prop_assert_eq!(r.ratios.unwrap().same, 1.0);
            }
        }
    }
}
