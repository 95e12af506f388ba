use atlab::attack::{
    self, ensemble_targeted, fgm, iterate, mim, n_targeted, pgd, sample_target_classes, AdversarialBatch,
    AttackSpec, Family, Objective,
};
use atlab::data::{generate_synthetic, Dataset, SyntheticSpec};
use atlab::nn::{fit, Architecture, LayerSpec, Network, OptimizerConfig};
use atlab::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::OnceLock;

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn small_conv(seed: u64) -> Network<f64> {
    Network::build(
        "conv2d(1,3,3,1);relu;maxpool2x2;dense(27,10)",
        &[1, 8, 8],
        10,
        seed,
    )
    .unwrap()
}

fn linear(dim: usize, classes: usize, seed: u64) -> Network<f64> {
    let arch = Architecture::new(vec![LayerSpec::Dense { inputs: dim, outputs: classes }], &[dim], classes).unwrap();
    Network::new(arch, seed)
}

fn item_loss(net: &Network<f64>, x: &[f64], label: usize) -> f64 {
    let t = Tensor::new(vec![1, x.len()], x.to_vec()).unwrap().reshape(&{
        let mut s = vec![1];
        s.extend_from_slice(net.input_shape());
        s
    });
    let logits = net.forward(&t.unwrap()).unwrap();
    atlab::nn::softmax_cross_entropy(&logits, &[label]).0[0]
}

fn assert_feasible(x: &Tensor<f64>, adv: &Tensor<f64>, eps: f64) {
    assert_eq!(x.shape(), adv.shape());
    for i in 0..x.batch_len() {
        let d: Vec<f64> = adv.item(i).iter().zip(x.item(i)).map(|(a, b)| a - b).collect();
        let r = atlab::scalar::l2_norm(&d);
        assert!(r <= eps + 1e-9, "item {i}: {r} > {eps}");
    }
    assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

fn all_specs(eps: f64) -> Vec<AttackSpec> {
    let mut v = Vec::new();
    for obj in [Objective::NonTargeted, Objective::Targeted] {
        v.push(AttackSpec::fgm(eps, obj));
        v.push(AttackSpec::pgd(eps, obj));
        v.push(AttackSpec::mim(eps, obj));
    }
    v
}

#[test]
fn zero_radius_is_the_identity() {
    let net = small_conv(1);
    let x = uniform(&[12, 1, 8, 8], 0.0, 1.0, 2);
    let y: Vec<usize> = (0..12).map(|i| i % 10).collect();
    for spec in all_specs(0.0) {
        assert_eq!(attack::attack(&net, &x, &y, &spec).unwrap(), x, "{spec:?}");
    }
    let t = vec![y.iter().map(|l| (l + 1) % 10).collect::<Vec<_>>(); 2];
    assert_eq!(n_targeted(&[&net, &net], &x, &t, &AttackSpec::n_targeted(0.0)).unwrap(), x);
}

#[test]
fn fgm_beats_random_directions_on_a_linear_model() {
    let (dim, classes) = (20, 5);
    let net = linear(dim, classes, 3);
    let eps = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..10 {
        let x = uniform(&[1, dim], 0.3, 0.7, 100 + trial);
        let y = vec![trial as usize % classes];
        let adv = fgm(&net, &x, &y, &AttackSpec::fgm(eps, Objective::NonTargeted)).unwrap();
        let best = item_loss(&net, adv.item(0), y[0]);
        for _ in 0..100 {
            let mut d: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let r = atlab::scalar::l2_norm(&d);
            d.iter_mut().for_each(|v| *v *= eps / r);
            let p: Vec<f64> = x.item(0).iter().zip(&d).map(|(a, b)| a + b).collect();
            assert!(best >= item_loss(&net, &p, y[0]));
        }
        // No clipping at this margin: the perturbation uses the full budget.
        let d: Vec<f64> = adv.item(0).iter().zip(x.item(0)).map(|(a, b)| a - b).collect();
        assert!((atlab::scalar::l2_norm(&d) - eps).abs() < 1e-12);
    }
}

#[test]
fn clipping_keeps_boundary_points_feasible() {
    let net = small_conv(5);
    let x = uniform(&[16, 1, 8, 8], 0.0, 1.0, 6).map(|v| if v < 0.5 { 0.0 } else { 1.0 });
    let y: Vec<usize> = (0..16).map(|i| i % 10).collect();
    for spec in all_specs(3.0) {
        let adv = attack::attack(&net, &x, &y, &spec).unwrap();
        assert_feasible(&x, &adv, 3.0);
    }
}

#[test]
fn pgd_projection_matches_closed_form() {
    let (dim, classes) = (30, 4);
    let net = linear(dim, classes, 7);
    let x = uniform(&[1, dim], 0.4, 0.6, 8);
    let y = vec![2];
    let eps = 0.05;
    let spec = AttackSpec::pgd(eps, Objective::NonTargeted).with_steps(1, 3.0 * eps);
    let adv = pgd(&net, &x, &y, &spec).unwrap();
    let (_, g) = net.input_gradient(&x, &y).unwrap();
    let gn = atlab::scalar::l2_norm(g.data());
    let z: Vec<f64> = x.data().iter().zip(g.data()).map(|(a, b)| a + 3.0 * eps * b / gn).collect();
    let dz: Vec<f64> = z.iter().zip(x.data()).map(|(a, b)| a - b).collect();
    let dzn = atlab::scalar::l2_norm(&dz);
    let expected: Vec<f64> = x.data().iter().zip(&dz).map(|(a, d)| a + eps * d / dzn).collect();
    for (a, e) in adv.data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-12);
    }
    let d: Vec<f64> = adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    assert!((atlab::scalar::l2_norm(&d) - eps).abs() < 1e-9);
}

#[test]
fn reduction_identities_are_bitwise() {
    let net = small_conv(9);
    let x = uniform(&[70, 1, 8, 8], 0.0, 1.0, 10);
    let y: Vec<usize> = (0..70).map(|i| i % 10).collect();
    let t = sample_target_classes(&y, 10, 11).unwrap();
    for eps in [0.3, 1.0, 2.5] {
        for (obj, labels) in [(Objective::NonTargeted, &y), (Objective::Targeted, &t)] {
            let f = fgm(&net, &x, labels, &AttackSpec::fgm(eps, obj)).unwrap();
            let p1 = pgd(&net, &x, labels, &AttackSpec::pgd(eps, obj).with_steps(1, eps)).unwrap();
            assert_eq!(f, p1);

            let p = pgd(&net, &x, labels, &AttackSpec::pgd(eps, obj)).unwrap();
            let mut m0 = AttackSpec::mim(eps, obj);
            m0.momentum_decay = 0.0;
            assert_eq!(mim(&net, &x, labels, &m0).unwrap(), p);
        }
        let spec = AttackSpec::pgd(eps, Objective::Targeted).with_steps(7, 0.1);
        let p = pgd(&net, &x, &t, &spec).unwrap();
        let nt = AttackSpec { objective: Objective::NTargeted, ..spec.clone() };
        assert_eq!(n_targeted(&[&net], &x, &[t.clone()], &nt).unwrap(), p);
        assert_eq!(ensemble_targeted(&[&net], &x, &t, &nt).unwrap(), p);
    }
}

/// Minimal quadratic `L(x) = ½ (x−c)ᵀ A (x−c)` with gradient `A (x−c)`.
fn quad_grad(x: &Tensor<f64>) -> atlab::Result<Tensor<f64>> {
    let (a, c) = ([[3.0, 1.0], [1.0, 0.5]], [0.2, 0.9]);
    let d = [x.data()[0] - c[0], x.data()[1] - c[1]];
    Tensor::new(
        vec![1, 2],
        vec![a[0][0] * d[0] + a[0][1] * d[1], a[1][0] * d[0] + a[1][1] * d[1]],
    )
}

#[test]
fn mim_accumulates_direction_on_a_quadratic() {
    let x0 = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let alpha = 0.05;
    let base = AttackSpec::pgd(1.0, Objective::Targeted).with_steps(2, alpha);
    let mim_spec = AttackSpec { family: Family::Mim, momentum_decay: 1.0, ..base.clone() };

    // By hand: x1 = x0 − α g0/‖g0‖; PGD then steps along g1, MIM along
    // g0/‖g0‖₁ + g1/‖g1‖₁.
    let g0 = quad_grad(&x0).unwrap();
    let g0 = g0.data();
    let n2 = |v: &[f64]| (v[0] * v[0] + v[1] * v[1]).sqrt();
    let n1 = |v: &[f64]| v[0].abs() + v[1].abs();
    let x1 = [0.5 - alpha * g0[0] / n2(g0), 0.5 - alpha * g0[1] / n2(g0)];
    let g1 = quad_grad(&Tensor::new(vec![1, 2], x1.to_vec()).unwrap()).unwrap();
    let g1 = g1.data();
    let m = [g0[0] / n1(g0) + g1[0] / n1(g1), g0[1] / n1(g0) + g1[1] / n1(g1)];
    let pgd_expect = [x1[0] - alpha * g1[0] / n2(g1), x1[1] - alpha * g1[1] / n2(g1)];
    let mim_expect = [x1[0] - alpha * m[0] / n2(&m), x1[1] - alpha * m[1] / n2(&m)];

    let p = iterate(&x0, &base, false, quad_grad).unwrap();
    let q = iterate(&x0, &mim_spec, false, quad_grad).unwrap();
    for i in 0..2 {
        assert!((p.data()[i] - pgd_expect[i]).abs() < 1e-14);
        assert!((q.data()[i] - mim_expect[i]).abs() < 1e-14);
    }
    // g0 and g1 are not parallel, so the second steps differ.
    assert!((g0[0] * g1[1] - g0[1] * g1[0]).abs() > 1e-6);
    assert!((p.data()[0] - q.data()[0]).abs() > 1e-6);
}

#[test]
fn zero_gradient_leaves_inputs_unchanged() {
    let mut net = small_conv(12);
    let last = net.params_mut().iter_mut().rev().find_map(|p| p.as_mut()).unwrap();
    last.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
    let x = uniform(&[5, 1, 8, 8], 0.0, 1.0, 13);
    let y = vec![0, 1, 2, 3, 4];
    for spec in all_specs(1.0) {
        let adv = attack::attack(&net, &x, &y, &spec).unwrap();
        assert_eq!(adv, x);
    }
}

#[test]
fn target_sampler_is_uniform_and_deterministic() {
    let truth = vec![3usize; 100_000];
    let t = sample_target_classes(&truth, 10, 42).unwrap();
    assert_eq!(t, sample_target_classes(&truth, 10, 42).unwrap());
    assert_ne!(t, sample_target_classes(&truth, 10, 43).unwrap());
    let mut counts = [0usize; 10];
    t.iter().for_each(|&c| counts[c] += 1);
    assert_eq!(counts[3], 0);
    let n = truth.len() as f64;
    let p = 1.0 / 9.0;
    let stderr = (p * (1.0 - p) / n).sqrt();
    let mut chi2 = 0.0;
    for (c, &k) in counts.iter().enumerate().filter(|(c, _)| *c != 3) {
        let f = k as f64 / n;
        assert!((f - p).abs() < 3.0 * stderr, "class {c}: {f}");
        chi2 += (k as f64 - n * p).powi(2) / (n * p);
    }
    // 99.9% quantile of chi-square with 8 degrees of freedom.
    assert!(chi2 < 26.12, "{chi2}");
}

#[test]
fn input_errors_are_reported() {
    let net = small_conv(1);
    let x = uniform(&[2, 1, 8, 8], 0.0, 1.0, 2);
    assert!(pgd(&net, &x, &[0], &AttackSpec::pgd(1.0, Objective::NonTargeted)).is_err());
    assert!(fgm(&net, &x, &[0, 1], &AttackSpec::pgd(1.0, Objective::NonTargeted)).is_err());
    let wrong = uniform(&[2, 1, 6, 6], 0.0, 1.0, 2);
    assert!(pgd(&net, &wrong, &[0, 1], &AttackSpec::pgd(1.0, Objective::NonTargeted)).is_err());
    let other = Network::build("dense(36,10)", &[1, 6, 6], 10, 0).unwrap();
    let spec = AttackSpec::n_targeted(1.0);
    assert!(n_targeted(&[&net, &other], &x, &[vec![1, 2], vec![1, 2]], &spec).is_err());
    assert!(n_targeted::<f64>(&[], &x, &[], &spec).is_err());
    let out_of_box = x.map(|v| v + 1.0);
    assert!(pgd(&net, &out_of_box, &[0, 1], &AttackSpec::pgd(1.0, Objective::NonTargeted)).is_err());
    assert!(attack::check_targets(&[1, 2], &[2, 2]).is_err());
}

struct Trained {
    model: Network<f64>,
    test: Dataset<f64>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = SyntheticSpec {
            train_count: 2000,
            test_count: 600,
            ..SyntheticSpec::small()
        };
        let (train, test) = generate_synthetic::<f64>(&spec).unwrap();
        let mut model = Network::build("FC-2", &[1, 12, 12], 10, 0).unwrap();
        let cfg = OptimizerConfig {
            epochs: 8,
            lr_decay_epochs: vec![],
            ..OptimizerConfig::default()
        };
        fit(&mut model, &train, &cfg, None).unwrap();
        Trained { model, test }
    })
}

#[test]
fn pgd_fools_at_least_as_often_as_fgm() {
    let t = trained();
    let pred = t.model.predict(t.test.images()).unwrap();
    let idx: Vec<usize> = (0..t.test.len()).filter(|&i| pred[i] == t.test.labels()[i]).collect();
    let d = t.test.subset(&idx);
    for eps in [0.5, 1.0] {
        let fooled = |adv: &Tensor<f64>| {
            let p = t.model.predict(adv).unwrap();
            p.iter().zip(d.labels()).filter(|(a, b)| a != b).count() as f64 / d.len() as f64
        };
        let f = fooled(&fgm(&t.model, d.images(), d.labels(), &AttackSpec::fgm(eps, Objective::NonTargeted)).unwrap());
        let p = fooled(&pgd(&t.model, d.images(), d.labels(), &AttackSpec::pgd(eps, Objective::NonTargeted)).unwrap());
        assert!(p >= f - 0.01, "eps {eps}: pgd {p} < fgm {f}");
    }
}

#[test]
fn conflicting_targets_on_one_model_still_reduce_the_summed_loss() {
    let t = trained();
    let d = t.test.take(300);
    let y1 = sample_target_classes(d.labels(), 10, 1).unwrap();
    let y2: Vec<usize> = y1
        .iter()
        .zip(d.labels())
        .map(|(&a, &y)| (1..10).map(|k| (a + k) % 10).find(|&c| c != y).unwrap())
        .collect();
    let m = &t.model;
    let adv = n_targeted(&[m, m], d.images(), &[y1.clone(), y2.clone()], &AttackSpec::n_targeted(2.0)).unwrap();
    let pred = m.predict(&adv).unwrap();
    assert!((0..d.len()).all(|i| !(pred[i] == y1[i] && pred[i] == y2[i])));
    let sum_loss = |x: &Tensor<f64>| {
        let l1 = m.input_gradient(x, &y1).unwrap().0;
        let l2 = m.input_gradient(x, &y2).unwrap().0;
        l1.iter().zip(&l2).map(|(a, b)| a + b).collect::<Vec<_>>()
    };
    let (before, after) = (sum_loss(d.images()), sum_loss(&adv));
    let decreased = before.iter().zip(&after).filter(|(b, a)| a < b).count();
    assert!(decreased as f64 >= 0.8 * d.len() as f64, "{decreased}/{}", d.len());
}

#[test]
fn adversarial_batch_round_trips_and_rejects_tampering() {
    let t = trained();
    let d = t.test.take(20);
    let y1 = sample_target_classes(d.labels(), 10, 5).unwrap();
    let spec = AttackSpec::pgd(1.0, Objective::Targeted);
    let adv = pgd(&t.model, d.images(), &y1, &spec).unwrap();
    let batch = AdversarialBatch::new(
        &[("fc", &t.model)],
        d.images().clone(),
        adv,
        d.labels().to_vec(),
        vec![y1],
        spec,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = batch.save(dir.path(), "b").unwrap();
    assert_eq!(files.len(), 3);
    let back = AdversarialBatch::<f64>::load(dir.path(), "b").unwrap();
    assert_eq!(back, batch);

    let mut bad = batch.clone();
    bad.adversarials.data_mut()[0] = if bad.originals.data()[0] > 0.5 { 0.0 } else { 1.0 };
    bad.adversarials.data_mut()[1] = if bad.originals.data()[1] > 0.5 { 0.0 } else { 1.0 };
    bad.spec.epsilon = 0.1;
    bad.save(dir.path(), "bad").unwrap();
    assert!(AdversarialBatch::<f64>::load(dir.path(), "bad").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Prefix runs reproduce the trajectory, so checking every step count
    /// checks every intermediate iterate.
    #[test]
    fn every_iterate_is_feasible(seed in 0u64..1000, eps in 0.01f64..4.0, fam in 0usize..3, targeted in proptest::bool::ANY) {
        let net = small_conv(seed);
        let x = uniform(&[6, 1, 8, 8], 0.0, 1.0, seed + 1);
        let y: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 10).collect();
        let obj = if targeted { Objective::Targeted } else { Objective::NonTargeted };
        let labels = if targeted { sample_target_classes(&y, 10, seed).unwrap() } else { y };
        let base = match fam {
            0 => AttackSpec::fgm(eps, obj),
            1 => AttackSpec::pgd(eps, obj),
            _ => AttackSpec::mim(eps, obj),
        };
        let max_steps = if fam == 0 { 1 } else { 6 };
        for steps in 1..=max_steps {
            let spec = AttackSpec { steps, ..base.clone() };
            let adv = attack::attack(&net, &x, &labels, &spec).unwrap();
            assert_feasible(&x, &adv, eps);
            prop_assert!(adv.all_finite());
        }
    }
}
