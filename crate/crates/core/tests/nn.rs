use std::cell::RefCell;
use std::ops::ControlFlow;

use lcz_core::nn::activation::{dropout_forward, relu_backward, relu_forward};
use lcz_core::nn::batchnorm::BatchNormLayer;
use lcz_core::nn::conv::ConvLayer;
use lcz_core::nn::dense::DenseLayer;
use lcz_core::nn::gradcheck::{gradient_check, tiny_architecture, Component};
use lcz_core::nn::loss::softmax_cross_entropy;
use lcz_core::nn::pool::{maxpool2_backward, maxpool2_forward};
use lcz_core::nn::{
    adam_step, batch_tensor, decode_model, encode_model, fit, AdamConfig, AdamState, Architecture, DropoutMask,
    EarlyStopper, Mode, ModelKind, MscnnModel, StopDecision, Tensor4, TrainConfig,
};
use lcz_core::raster::Patch;
use lcz_core::rng;
use lcz_core::sampling::SampleSet;
use lcz_core::transfer::attach_heads;
use lcz_core::LczClass;
use rand::Rng;

fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor4<f64> {
    Tensor4::new(shape, data).unwrap()
}

fn random(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut r = rng::rng(seed);
    let n = shape.iter().product();
    t(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

#[test]
fn gradient_checks_pass_in_f64() {
    for (c, tol) in [
        (Component::Conv, 1e-6),
        (Component::Batchnorm, 1e-6),
        (Component::Dense, 1e-6),
        (Component::Pool, 1e-5),
        (Component::Relu, 1e-5),
        (Component::Softmax, 1e-5),
        (Component::Model, 1e-5),
    ] {
        for seed in [0, 1] {
            let err = gradient_check(c, seed).unwrap();
            assert!(err < tol, "{c}: {err:e}");
        }
    }
}

#[test]
fn conv_examples() {
    let mut id = ConvLayer::<f64>::zeros(2, 2, 1).unwrap();
    id.weight = vec![1.0, 0.0, 0.0, 1.0];
    let x = random([2, 2, 4, 4], 3);
    assert_eq!(id.forward(&x).unwrap(), x);

    let mut ones = ConvLayer::<f64>::zeros(1, 1, 3).unwrap();
    ones.weight = vec![1.0; 9];
    let y = ones.forward(&t([1, 1, 5, 5], vec![1.0; 25])).unwrap();
    assert_eq!((y.at(0, 0, 2, 2), y.at(0, 0, 0, 0), y.at(0, 0, 0, 2)), (9.0, 4.0, 6.0));

    let mut bias = ConvLayer::<f64>::zeros(3, 2, 5).unwrap();
    bias.bias = vec![0.5, -2.0];
    let y = bias.forward(&random([1, 3, 6, 6], 4)).unwrap();
    assert!(y.sample(0)[..36].iter().all(|&v| v == 0.5));
    assert!(y.sample(0)[36..].iter().all(|&v| v == -2.0));

    let layer = ConvLayer::<f64>::he_init(3, 2, 3, &mut rng::rng(5)).unwrap();
    let x = random([2, 3, 6, 6], 6);
    let g = random([2, 2, 6, 6], 7);
    let (_, grads) = layer.backward(&x, &g, true).unwrap();
    for o in 0..2 {
        let sum: f64 = (0..2).map(|b| g.sample(b)[o * 36..(o + 1) * 36].iter().sum::<f64>()).sum();
        assert!((grads.bias[o] - sum).abs() < 1e-12);
    }
    let (gx, grads) = layer.backward(&x, &Tensor4::zeros([2, 2, 6, 6]), true).unwrap();
    assert!(gx.unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.weight.iter().chain(&grads.bias).all(|&v| v == 0.0));
    assert!(layer.forward(&random([1, 2, 6, 6], 1)).is_err());
}

#[test]
fn pool_examples() {
    let (y, arg) = maxpool2_forward(&t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
    assert_eq!(y.data(), &[4.0]);
    let g = maxpool2_backward(&t([1, 1, 1, 1], vec![1.0]), &arg, [1, 1, 2, 2]).unwrap();
    assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
    let (_, arg) = maxpool2_forward(&t([1, 1, 2, 2], vec![5.0; 4])).unwrap();
    let g = maxpool2_backward(&t([1, 1, 1, 1], vec![1.0]), &arg, [1, 1, 2, 2]).unwrap();
    assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    assert!(maxpool2_forward(&t([1, 1, 3, 2], vec![0.0; 6])).is_err());
}

#[test]
fn batchnorm_examples() {
    let mut bn = BatchNormLayer::<f64>::new(2);
    bn.beta = vec![0.3, -0.7];
    let (y, _) = bn.forward_train(&t([3, 2, 2, 2], vec![4.0; 24])).unwrap();
    for b in 0..3 {
        assert!(y.sample(b)[..4].iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(y.sample(b)[4..].iter().all(|&v| (v + 0.7).abs() < 1e-12));
    }

    let mut bn = BatchNormLayer::<f64>::new(3);
    let x = random([5, 3, 4, 4], 8);
    let (y, _) = bn.forward_train(&x).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..5).flat_map(|b| y.sample(b)[c * 16..(c + 1) * 16].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
    assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    assert!(bn.forward_train(&random([1, 3, 4, 4], 9)).is_err());
}

#[test]
fn relu_dense_dropout_examples() {
    let x = t([1, 1, 1, 3], vec![-1.0, 2.0, 0.0]);
    let y = relu_forward(&x);
    assert_eq!(y.data(), &[0.0, 2.0, 0.0]);
    assert_eq!(relu_backward(&y, &t([1, 1, 1, 3], vec![1.0; 3])).data(), &[0.0, 1.0, 0.0]);

    let mut d = DenseLayer::<f64>::zeros(3, 3);
    d.weight = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let x = Tensor4::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, -6.0]).unwrap();
    assert_eq!(d.forward(&x).unwrap().data(), x.data());
    let g = Tensor4::matrix(2, 3, vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]).unwrap();
    let (_, grads) = d.backward(&x, &g, false).unwrap();
    assert_eq!(grads.bias, vec![2.5, 3.5, 4.5]);

    let mut r = rng::rng(1);
    let x = random([2, 3, 4, 4], 2);
    assert_eq!(dropout_forward(&x, 0.25, Mode::Eval, &mut r).unwrap().0, x);
    assert_eq!(dropout_forward(&x, 0.0, Mode::Train, &mut r).unwrap().0, x);
    assert!(dropout_forward(&x, 1.0, Mode::Train, &mut r).is_err());
    let ones = Tensor4::<f64>::matrix(1, 1_000_000, vec![1.0; 1_000_000]).unwrap();
    let (y, mask) = dropout_forward(&ones, 0.25, Mode::Train, &mut rng::rng(77)).unwrap();
    let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
    assert!((kept - 0.75).abs() < 0.005, "{kept}");
    assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    assert_eq!(mask.unwrap().len(), 1_000_000);
}

#[test]
fn softmax_examples() {
    let (loss, grad) = softmax_cross_entropy(&[0.3f64; 34], &[4, 16], 17).unwrap();
    assert!((loss - 17f64.ln()).abs() < 1e-12);
    assert!((loss - 2.833213).abs() < 1e-6);
    for row in grad.chunks(17) {
        assert!(row.iter().sum::<f64>().abs() < 1e-7);
    }
    let mut logits = vec![0.0f64; 17];
    logits[2] = 1000.0;
    assert!(softmax_cross_entropy(&logits, &[2], 17).unwrap().0 < 1e-6);
    assert!(softmax_cross_entropy(&logits, &[17], 17).is_err());
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig::default();
    let mut theta = [0.0f64];
    let mut state = AdamState::new(&[1]);
    adam_step(&mut [&mut theta[..]], &[&[1.0][..]], &mut state, &cfg).unwrap();
    assert!((state.m[0][0] - 0.1).abs() < 1e-15);
    assert!((state.v[0][0] - 0.001).abs() < 1e-15);
    assert!((theta[0] + 0.00199203).abs() < 1e-8, "{}", theta[0]);

    let mut theta = vec![0.7f64, -0.2];
    let mut state = AdamState::new(&[2]);
    adam_step(&mut [&mut theta[..]], &[&[0.0, 0.0][..]], &mut state, &cfg).unwrap();
    assert_eq!(theta, vec![0.7, -0.2]);

    let mut a = [0.5f64, 0.5];
    let mut state = AdamState::new(&[2]);
    for g in [0.3, -1.2, 0.8] {
        adam_step(&mut [&mut a[..]], &[&[g, g][..]], &mut state, &cfg).unwrap();
    }
    assert_eq!(a[0], a[1]);
    assert!(adam_step(&mut [&mut a[..]], &[&[1.0][..]], &mut state, &cfg).is_err());
}

#[test]
fn default_architecture_shapes() {
    let arch = Architecture::default();
    assert_eq!(arch.concat_channels(), 96);
    assert_eq!(arch.flatten_dim(), 256);
    let model = MscnnModel::<f32>::new(arch, 0).unwrap();
    let x = Tensor4::<f32>::new([2, 10, 32, 32], (0..2 * 10 * 1024).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap();
    let logits = model.forward_eval(&x).unwrap();
    assert_eq!(logits.len(), 2 * 17);
    assert_eq!(model.forward_eval(&x).unwrap(), logits);
    assert!(model.forward_eval(&Tensor4::zeros([1, 10, 16, 16])).is_err());
}

/// Patches whose class is encoded in a per-class stripe pattern.
fn tiny_set(n: usize, seed: u64) -> SampleSet {
    let arch = tiny_architecture();
    let size = arch.patch_size;
    let mut r = rng::rng(seed);
    let mut set = SampleSet::new(size, arch.in_channels);
    for i in 0..n {
        let class = LczClass::ALL[i % 3];
        let data = (0..arch.in_channels * size * size)
            .map(|k| {
                let (row, col) = ((k / size) % size, k % size);
                let on = match class.code() {
                    0 => row % 2 == 0,
                    1 => col % 2 == 0,
                    _ => (row + col) % 2 == 0,
                };
                (if on { 1.0 } else { -1.0 }) + r.random_range(-0.1..0.1)
            })
            .collect();
        set.push(Patch::new(size, arch.in_channels, data).unwrap(), class).unwrap();
    }
    set
}

fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: epochs,
        early_stopping: false,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn scripted_early_stopping_restores_best_weights() {
    let mut s = EarlyStopper::new(15);
    assert_eq!(s.observe(1, 1.0), StopDecision::Improved);
    for e in 2..=15 {
        assert_eq!(s.observe(e, 1.0), StopDecision::Continue, "equal loss is not an improvement");
    }
    assert_eq!(s.observe(16, 1.5), StopDecision::Stop);

    let train = tiny_set(24, 1);
    let mut model = MscnnModel::<f32>::new(tiny_architecture(), 2).unwrap();
    let script: Vec<f64> = std::iter::once(1.0).chain((0..30).map(|i| 1.0 + (i % 3) as f64 * 0.1)).collect();
    let calls = RefCell::new(0usize);
    let snapshots = RefCell::new(Vec::new());
    let cfg = TrainConfig {
        early_stopping: true,
        early_stop_patience: 15,
        max_epochs: 100,
        ..quick_cfg(100, 3)
    };
    let history = fit(
        &mut model,
        &train,
        &cfg,
        |_| {
            let mut c = calls.borrow_mut();
            *c += 1;
            Ok((script[*c - 1], 0.5))
        },
        |m, _| {
            snapshots.borrow_mut().push(m.clone());
            ControlFlow::Continue(())
        },
    )
    .unwrap();
    assert_eq!(history.epochs.len(), 16);
    assert!(history.stopped_early);
    assert_eq!(history.best_epoch, 1);
    let best = &snapshots.borrow()[0];
    assert_eq!(&model, best);
    assert_eq!(model.checksum(), best.checksum());
    assert_ne!(model.checksum(), snapshots.borrow()[15].checksum());
}

#[test]
fn training_is_deterministic() {
    let train = tiny_set(20, 4);
    let val = tiny_set(9, 5);
    let run = || {
        let mut m = MscnnModel::<f32>::new(tiny_architecture(), 6).unwrap();
        let h = lcz_core::nn::train_mscnn(&mut m, &train, &val, &quick_cfg(3, 7)).unwrap();
        (m, h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a.checksum(), b.checksum());
    assert!(ha.epochs.len() <= 3);
}

#[test]
fn zero_gradient_and_batch_permutation() {
    let arch = Architecture {
        dropout: 0.0,
        ..tiny_architecture()
    };
    let mut model = MscnnModel::<f64>::new(arch, 8).unwrap();
    let set = tiny_set(6, 9);
    let refs: Vec<&Patch> = set.patches.iter().collect();
    let x = batch_tensor::<f64>(&refs).unwrap();
    let mut r = rng::rng(0);
    let (logits, cache) = model.forward_train(&x, DropoutMask::Sample(&mut r)).unwrap();
    let zero = model.backward(&cache, &vec![0.0; logits.len()]).unwrap();
    assert!(zero.iter().flatten().all(|g| g.iter().all(|&v| v == 0.0)));

    let labels: Vec<usize> = set.labels.iter().map(|c| c.index()).collect();
    let grad_of = |model: &mut MscnnModel<f64>, order: &[usize]| {
        let refs: Vec<&Patch> = order.iter().map(|&i| &set.patches[i]).collect();
        let x = batch_tensor::<f64>(&refs).unwrap();
        let l: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let mut r = rng::rng(0);
        let (logits, cache) = model.forward_train(&x, DropoutMask::Sample(&mut r)).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &l, 17).unwrap();
        model.backward(&cache, &g).unwrap()
    };
    let snapshot = model.clone();
    let a = grad_of(&mut model, &[0, 1, 2, 3, 4, 5]);
    let mut model = snapshot;
    let b = grad_of(&mut model, &[5, 3, 1, 0, 4, 2]);
    for (ga, gb) in a.iter().zip(&b) {
        for (x, y) in ga.as_ref().unwrap().iter().zip(gb.as_ref().unwrap()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn model_bytes_round_trip() {
    let mut m = MscnnModel::<f32>::new(tiny_architecture(), 10).unwrap();
    fit(&mut m, &tiny_set(12, 1), &quick_cfg(1, 1), |_| Ok((1.0, 0.0)), |_, _| ControlFlow::Continue(())).unwrap();
    let bytes = encode_model(&m, ModelKind::Mscnn).unwrap();
    assert_eq!(&bytes[..5], b"LCZNN");
    let (back, kind) = decode_model::<f32>(&bytes).unwrap();
    assert_eq!((back, kind), (m.clone(), ModelKind::Mscnn));
    assert!(decode_model::<f32>(&bytes[..bytes.len() - 4]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_model::<f32>(&extra).is_err());
}

#[test]
fn frozen_backbone_is_bit_identical_after_training() {
    let backbone = MscnnModel::<f32>::new(tiny_architecture(), 11).unwrap();
    let nb = backbone.blocks.len() as i64;
    let mut t = attach_heads(&backbone, nb, 16, 12).unwrap();
    let before = t.clone();
    let frozen_before = t.frozen_checksum();
    lcz_core::transfer::train_transfer(&mut t, &tiny_set(24, 2), &tiny_set(9, 3), &quick_cfg(2, 4)).unwrap();
    assert_eq!(t.frozen_checksum(), frozen_before);
    assert_eq!(t.model.branches, before.model.branches);
    assert_eq!(t.model.blocks, before.model.blocks);
    assert_ne!(t.model.hidden, before.model.hidden);
    assert_ne!(t.model.output, before.model.output);

    let mut all = attach_heads(&backbone, -1, 16, 12).unwrap();
    let start = all.clone();
    lcz_core::transfer::train_transfer(&mut all, &tiny_set(24, 2), &tiny_set(9, 3), &quick_cfg(2, 4)).unwrap();
    let (p0, p1) = (start.model.params(), all.model.params());
    for (info, (a, b)) in start.model.param_info().iter().zip(p0.iter().zip(&p1)) {
        assert_ne!(a, b, "{} did not change under full fine-tuning", info.name);
    }
}

#[test]
fn fully_frozen_model_has_constant_loss() {
    let backbone = MscnnModel::<f32>::new(tiny_architecture(), 13).unwrap();
    let last = backbone.n_layers() as i64 - 1;
    let mut t = attach_heads(&backbone, last, 16, 1).unwrap();
    assert_eq!(t.n_trainable_params(), 0);
    let before = t.model.checksum();
    let h = lcz_core::transfer::train_transfer(&mut t, &tiny_set(24, 2), &tiny_set(9, 3), &quick_cfg(3, 4)).unwrap();
    assert_eq!(t.model.checksum(), before);
    let losses: Vec<f64> = h.epochs.iter().map(|e| e.val_loss).collect();
    assert!(losses.windows(2).all(|w| w[0] == w[1]), "{losses:?}");
}

#[test]
fn frozen_parameters_receive_no_update_despite_a_real_gradient() {
    let backbone = MscnnModel::<f64>::new(tiny_architecture(), 14).unwrap();
    let mut t = attach_heads(&backbone, 1, 16, 2).unwrap();
    let set = tiny_set(6, 5);
    let refs: Vec<&Patch> = set.patches.iter().collect();
    let x = batch_tensor::<f64>(&refs).unwrap();
    let labels: Vec<usize> = set.labels.iter().map(|c| c.index()).collect();
    let loss_at = |m: &MscnnModel<f64>| {
        let logits = m.forward_eval(&x).unwrap();
        softmax_cross_entropy(&logits, &labels, 17).unwrap().0
    };
    // perturbing a frozen branch weight changes the loss
    let base = loss_at(&t.model);
    let mut bumped = t.model.clone();
    bumped.branches[0].weight[0] += 1e-3;
    assert!((loss_at(&bumped) - base).abs() > 0.0);
    // but training leaves it untouched
    let w0 = t.model.branches[0].weight.clone();
    let b1 = t.model.blocks[0].clone();
    lcz_core::transfer::train_transfer(&mut t, &set, &tiny_set(6, 6), &quick_cfg(2, 1)).unwrap();
    assert_eq!(t.model.branches[0].weight, w0);
    assert_eq!(t.model.blocks[0], b1);
    assert_ne!(t.model.blocks[1], backbone.blocks[1]);
}
