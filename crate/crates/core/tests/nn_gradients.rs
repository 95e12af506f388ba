//! Backprop against central finite differences, plus forward-pass oracles.

use atlab::nn::{Architecture, LayerSpec, Mode, Network, Param, Wrt};
use atlab::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Mean cross-entropy recomputed from scratch through the public forward.
fn loss_of(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let logits = net.forward(x).unwrap();
    let (l, _) = atlab::nn::softmax_cross_entropy(&logits, labels);
    l.iter().sum::<f64>() / labels.len() as f64
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn check_input_gradient(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (_, g) = net.loss_and_grads(x, labels, Wrt::Input).unwrap();
    let g = g.input.unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (loss_of(net, &xp, labels) - loss_of(net, &xm, labels)) / (2.0 * h);
        // Relative error is meaningless for entries that agree to 1e-7 absolutely.
        if (fd - g.data()[i]).abs() > 1e-7 {
            worst = worst.max(rel_err(fd, g.data()[i]));
        }
    }
    worst
}

fn check_param_gradient(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize], samples: usize, seed: u64) -> f64 {
    let (_, g) = net.loss_and_grads(x, labels, Wrt::Params).unwrap();
    let g = g.params.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let layers: Vec<usize> = (0..g.len()).filter(|&i| g[i].is_some()).collect();
    for _ in 0..samples {
        let li = layers[rng.gen_range(0..layers.len())];
        let bias = rng.gen_bool(0.3);
        let pick = |p: &Param<f64>| if bias { p.bias.len() } else { p.weight.len() };
        let k = rng.gen_range(0..pick(g[li].as_ref().unwrap()));
        let perturb = |delta: f64| {
            let mut m = net.clone();
            let p = m.params_mut()[li].as_mut().unwrap();
            let t = if bias { &mut p.bias } else { &mut p.weight };
            t.data_mut()[k] += delta;
            loss_of(&m, x, labels)
        };
        let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
        let gp = g[li].as_ref().unwrap();
        let an = if bias { gp.bias.data()[k] } else { gp.weight.data()[k] };
        if (fd - an).abs() > 1e-7 {
            worst = worst.max(rel_err(fd, an));
        }
    }
    worst
}

#[test]
fn dense_stack_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = Network::<f64>::build("dense(6,5);relu;dense(5,4);relu;dense(4,3)", &[6], 3, 5).unwrap();
    let x = random_input(&[4, 6], &mut rng);
    let labels = [0, 2, 1, 2];
    assert!(check_input_gradient(&net, &x, &labels) < 1e-4);
    assert!(check_param_gradient(&net, &x, &labels, 40, 1) < 1e-4);
}

#[test]
fn conv_pool_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = Network::<f64>::build(
        "conv2d(2,3,3,1);relu;conv2d(3,4,2,2);relu;maxpool2x2;flatten;dense(4,3)",
        &[2, 7, 7],
        3,
        9,
    )
    .unwrap();
    let x = random_input(&[2, 2, 7, 7], &mut rng);
    let labels = [1, 0];
    assert!(check_input_gradient(&net, &x, &labels) < 1e-4);
    assert!(check_param_gradient(&net, &x, &labels, 60, 2) < 1e-4);
}

#[test]
fn both_matches_separate_requests() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Network::<f64>::build("Conv-2", &[1, 8, 8], 4, 1).unwrap();
    let x = random_input(&[3, 1, 8, 8], &mut rng);
    let y = [0, 3, 1];
    let (l1, both) = net.loss_and_grads(&x, &y, Wrt::Both).unwrap();
    let (l2, inp) = net.loss_and_grads(&x, &y, Wrt::Input).unwrap();
    let (_, par) = net.loss_and_grads(&x, &y, Wrt::Params).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(both.input, inp.input);
    assert_eq!(both.params.unwrap(), par.params.unwrap());
    assert!(inp.params.is_none() && par.input.is_none());
}

#[test]
fn input_gradient_is_per_item_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Network::<f64>::build("FC-2", &[1, 4, 4], 5, 2).unwrap();
    let x = random_input(&[3, 1, 4, 4], &mut rng);
    let y = [4, 0, 2];
    let (losses, g) = net.input_gradient(&x, &y).unwrap();
    let (mean, gm) = net.loss_and_grads(&x, &y, Wrt::Input).unwrap();
    assert!((losses.iter().sum::<f64>() / 3.0 - mean).abs() < 1e-12);
    for (a, b) in g.data().iter().zip(gm.input.unwrap().data()) {
        assert!((a / 3.0 - b).abs() < 1e-15);
    }
}

#[test]
fn zero_final_layer_gives_zero_logits() {
    let mut net = Network::<f64>::build("FC-2", &[1, 3, 3], 4, 0).unwrap();
    let last = net.params_mut()[2].as_mut().unwrap();
    last.weight.data_mut().fill(0.0);
    last.bias.data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = net.forward(&random_input(&[2, 1, 3, 3], &mut rng)).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_dense_layer_passes_input_through() {
    let arch = Architecture::new(vec![LayerSpec::Dense { inputs: 2, outputs: 2 }], &[2], 2).unwrap();
    let net = Network::from_params(
        arch,
        vec![Some(Param {
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        })],
    )
    .unwrap();
    let logits = net.forward(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
    assert_eq!(logits.data(), &[1.0, 2.0]);
}

#[test]
fn two_layer_forward_matches_hand_rolled_matmul() {
    let net = Network::<f64>::build("dense(5,4);relu;dense(4,3)", &[5], 3, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_input(&[2, 5], &mut rng);
    let logits = net.forward(&x).unwrap();
    let p0 = net.params()[0].as_ref().unwrap();
    let p2 = net.params()[2].as_ref().unwrap();
    for b in 0..2 {
        let xb = x.item(b);
        let hidden: Vec<f64> = (0..4)
            .map(|o| {
                let z: f64 = (0..5).map(|i| p0.weight.data()[o * 5 + i] * xb[i]).sum::<f64>() + p0.bias.data()[o];
                z.max(0.0)
            })
            .collect();
        for o in 0..3 {
            let z: f64 = (0..4).map(|i| p2.weight.data()[o * 4 + i] * hidden[i]).sum::<f64>() + p2.bias.data()[o];
            assert!((z - logits.item(b)[o]).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_forward_matches_direct_convolution() {
    let net = Network::<f64>::build("conv2d(2,3,3,2);flatten;dense(12,2)", &[2, 5, 6], 2, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_input(&[1, 2, 5, 6], &mut rng);
    // Output of the conv alone, recovered by making the dense layer an identity read-out
    // is awkward; instead recompute the full network by hand.
    let c = net.params()[0].as_ref().unwrap();
    let d = net.params()[2].as_ref().unwrap();
    let (oh, ow) = (2, 2);
    let mut feat = vec![0.0; 3 * oh * ow];
    for o in 0..3 {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = c.bias.data()[o];
                for ci in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            acc += c.weight.data()[((o * 2 + ci) * 3 + ki) * 3 + kj]
                                * x.data()[(ci * 5 + y * 2 + ki) * 6 + xx * 2 + kj];
                        }
                    }
                }
                feat[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    let logits = net.forward(&x).unwrap();
    for o in 0..2 {
        let z: f64 = (0..12).map(|i| d.weight.data()[o * 12 + i] * feat[i]).sum::<f64>() + d.bias.data()[o];
        assert!((z - logits.data()[o]).abs() < 1e-12);
    }
}

#[test]
fn dropout_is_identity_in_eval_and_unbiased_in_train() {
    let net = Network::<f64>::build("dropout(0.5);dense(3,2)", &[3], 2, 0).unwrap();
    let x = Tensor::new(vec![1, 3], vec![0.2, 0.7, 1.0]).unwrap();
    let eval = net.forward(&x).unwrap();
    assert_eq!(eval, net.forward(&x).unwrap());
    // Identity check through a copy whose dense layer reads out the input.
    let mut probe = Network::<f64>::build("dropout(0.5);dense(3,3)", &[3], 3, 0).unwrap();
    let p = probe.params_mut()[1].as_mut().unwrap();
    p.weight = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    p.bias = Tensor::zeros(&[3]);
    assert_eq!(probe.forward(&x).unwrap().data(), x.data());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 20_000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for _ in 0..trials {
        let y = probe.forward_mode(&x, Mode::Train, &mut rng).unwrap();
        for j in 0..3 {
            sum[j] += y.data()[j];
            sq[j] += y.data()[j] * y.data()[j];
        }
    }
    for j in 0..3 {
        let mean = sum[j] / trials as f64;
        let var = sq[j] / trials as f64 - mean * mean;
        let se = (var / trials as f64).sqrt();
        assert!((mean - x.data()[j]).abs() < 3.0 * se, "coord {j}: {mean} vs {}", x.data()[j]);
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = Network::<f64>::build("FC-2", &[1, 28, 28], 10, 7).unwrap();
    let b = Network::<f64>::build("FC-2", &[1, 28, 28], 10, 7).unwrap();
    assert_eq!(a, b);
    let c = Network::<f64>::build("FC-2", &[1, 28, 28], 10, 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn shape_and_label_errors() {
    let net = Network::<f64>::build("FC-2", &[1, 4, 4], 3, 0).unwrap();
    assert!(net.forward(&Tensor::zeros(&[2, 1, 4, 5])).is_err());
    assert!(net.forward(&Tensor::zeros(&[2, 16])).is_err());
    let x = Tensor::zeros(&[1, 1, 4, 4]);
    assert!(matches!(
        net.loss_and_grads(&x, &[3], Wrt::Input),
        Err(atlab::LabError::InvalidLabel { label: 3, .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_small_models_have_exact_gradients(seed in 0u64..1000, hidden in 2usize..6, conv in proptest::bool::ANY) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (spec, shape) = if conv {
            (format!("conv2d(1,{hidden},3,1);relu;maxpool2x2;dense({},3)", hidden * 4), vec![1, 6, 6])
        } else {
            (format!("dense(5,{hidden});relu;dense({hidden},3)"), vec![5])
        };
        let net = Network::<f64>::build(&spec, &shape, 3, seed).unwrap();
        let mut xs = vec![2];
        xs.extend_from_slice(&shape);
        let x = random_input(&xs, &mut rng);
        let labels = [rng.gen_range(0..3), rng.gen_range(0..3)];
        prop_assert!(check_input_gradient(&net, &x, &labels) < 1e-4);
        prop_assert!(check_param_gradient(&net, &x, &labels, 20, seed) < 1e-4);
    }
}
