mod common;

use common::{randn, rng};
use gigaslide_core::checkpoint::{decode, encode, load_store_into, save_store, StoredTensor};
use gigaslide_core::nn::{BatchNorm2d, Conv2d, Linear};
use gigaslide_core::optim::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind};
use gigaslide_core::{Graph, ParamStore, Tensor, TensorError};

fn sgd(momentum: f64, wd: f64) -> Optimizer<f64> {
    Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::sgd_nesterov(momentum),
        weight_decay: wd,
    })
}

fn adamw(wd: f64) -> Optimizer<f64> {
    Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::adamw(),
        weight_decay: wd,
    })
}

#[test]
fn sgd_single_step_example() {
    let mut store = ParamStore::new();
    let id = store.trainable("w", Tensor::scalar(1.0));
    store.get_mut(id).grad = Some(Tensor::scalar(1.0));
    sgd(0.0, 0.0).step(&mut store, 0.1).unwrap();
    assert!((store.value(id).item() - 0.9).abs() < 1e-15);
    assert!(store.get(id).grad.is_none());
}

#[test]
fn zero_gradient_is_identity() {
    for opt in [sgd(0.8, 0.0), adamw(0.0)] {
        let mut opt = opt;
        let mut store = ParamStore::new();
        let v = randn(&[3, 4], &mut rng(1));
        let id = store.trainable("w", v.clone());
        for _ in 0..5 {
            store.get_mut(id).grad = Some(Tensor::zeros(&[3, 4]));
            opt.step(&mut store, 0.01).unwrap();
        }
        assert_eq!(store.value(id), &v);
    }
}

#[test]
fn adamw_decay_is_decoupled_from_gradient() {
    // with zero gradient the Adam term vanishes and only lr·wd·w remains
    let mut store = ParamStore::new();
    let id = store.trainable("w", Tensor::scalar(2.0));
    store.get_mut(id).grad = Some(Tensor::scalar(0.0));
    adamw(0.1).step(&mut store, 0.5).unwrap();
    assert!((store.value(id).item() - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);

    // a huge gradient moves the weight by about lr regardless of scale
    let mut store = ParamStore::new();
    let id = store.trainable("w", Tensor::scalar(0.0));
    store.get_mut(id).grad = Some(Tensor::scalar(1e6));
    adamw(0.0).step(&mut store, 0.01).unwrap();
    assert!((store.value(id).item() + 0.01).abs() < 1e-9);
}

#[test]
fn nesterov_matches_hand_iteration() {
    let (mu, lr) = (0.8, 0.1);
    let mut store = ParamStore::new();
    let id = store.trainable("w", Tensor::scalar(1.0));
    let mut opt = sgd(mu, 0.0);
    let (mut w, mut buf) = (1.0f64, 0.0f64);
    for _ in 0..4 {
        let grad = 2.0 * w;
        store.get_mut(id).grad = Some(Tensor::scalar(grad));
        opt.step(&mut store, lr).unwrap();
        buf = mu * buf + grad;
        w -= lr * (grad + mu * buf);
        assert!((store.value(id).item() - w).abs() < 1e-12);
    }
}

#[test]
fn adamw_minimizes_quadratic_bowl() {
    let mut store = ParamStore::new();
    let id = store.trainable("w", Tensor::from_vec(&[3], vec![1.5, -2.0, 0.7]).unwrap());
    let mut opt = adamw(0.0);
    let mut steps = 0;
    let mut loss = f64::INFINITY;
    while steps < 500 {
        let mut g = Graph::<f64>::train();
        let w = g.param(&store, id);
        let sq = g.mul(w, w).unwrap();
        let l = g.sum_all(sq);
        loss = g.value(l).item();
        if loss < 1e-6 {
            break;
        }
        g.backward(l).unwrap().write_to_store(&g, &mut store);
        opt.step(&mut store, 0.05).unwrap();
        steps += 1;
    }
    assert!(loss < 1e-6, "loss {loss} after {steps} steps");
    assert!(steps <= 500);
}

#[test]
fn non_finite_gradient_rejects_step() {
    let mut store = ParamStore::new();
    let a = store.trainable("a", Tensor::scalar(1.0));
    let b = store.trainable("b", Tensor::scalar(1.0));
    store.get_mut(a).grad = Some(Tensor::scalar(1.0));
    store.get_mut(b).grad = Some(Tensor::scalar(f64::NAN));
    let err = adamw(0.0).step(&mut store, 0.1).unwrap_err();
    assert_eq!(err, TensorError::NonFiniteGradient { name: "b".into() });
    assert_eq!(store.value(a).item(), 1.0);
    assert!(adamw(0.0).step(&mut store, 0.0).is_err());
}

#[test]
fn buffers_are_never_optimized() {
    let mut store = ParamStore::new();
    let id = store.buffer("running", Tensor::scalar(3.0));
    store.get_mut(id).grad = Some(Tensor::scalar(1.0));
    sgd(0.0, 0.0).step(&mut store, 0.1).unwrap();
    assert_eq!(store.value(id).item(), 3.0);
}

#[test]
fn schedule_warmup_and_step_decay() {
    let s = LrSchedule {
        floor: 1e-6,
        peak: 1e-4,
        warmup_epochs: 5,
        decay_factor: 5.0,
        decay_every: 30,
    };
    s.validate().unwrap();
    assert_eq!(s.lr(0, 0, 10), 1e-6);
    assert!((s.lr(5, 0, 10) - 1e-4).abs() < 1e-18);
    assert!((s.lr(29, 9, 10) - 1e-4).abs() < 1e-18);
    assert!((s.lr(30, 0, 10) - 2e-5).abs() < 1e-18);
    assert!((s.lr(60, 0, 10) - 4e-6).abs() < 1e-18);
    let mut prev = 0.0;
    for e in 0..5 {
        for st in 0..10 {
            let lr = s.lr(e, st, 10);
            assert!(lr > prev);
            prev = lr;
        }
    }
    for e in 0..200 {
        assert!(s.lr(e, 3, 10) > 0.0);
    }
    assert_eq!(LrSchedule::constant(0.03).lr(17, 4, 9), 0.03);
    assert!(LrSchedule { floor: 0.0, ..s }.validate().is_err());
}

#[test]
fn bn_layer_updates_running_statistics() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 2);
    let mut g = Graph::train();
    let x = g.constant(Tensor::from_fn(&[2, 2, 1, 1], |i| [1.0, 10.0, 3.0, 20.0][i]));
    bn.forward(&mut g, &store, x).unwrap();
    g.apply_buffer_updates(&mut store);
    // batch mean (2, 15), population var (1, 25)
    let m = store.value(bn.running_mean).data();
    let v = store.value(bn.running_var).data();
    assert!((m[0] - 0.2).abs() < 1e-12 && (m[1] - 1.5).abs() < 1e-12);
    assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] - (0.9 + 2.5)).abs() < 1e-12);

    let mut g = Graph::eval();
    let x = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
    bn.forward(&mut g, &store, x).unwrap();
    g.apply_buffer_updates(&mut store);
    assert!((store.value(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
}

fn small_model(store: &mut ParamStore<f32>) {
    let mut r = rng(9);
    Conv2d::same(store, "conv", 3, 4, 3, &mut r);
    BatchNorm2d::new(store, "bn", 4);
    Linear::new(store, "fc", 4, 2, &mut r);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut store = ParamStore::<f32>::new();
    small_model(&mut store);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_store(&path, &store).unwrap();
    let mut fresh = ParamStore::<f32>::new();
    small_model(&mut fresh);
    for p in fresh.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    load_store_into(&path, &mut fresh).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(fresh.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
}

#[test]
fn checkpoint_layout_is_little_endian() {
    let t = Tensor::from_vec(&[2], vec![1.0f32, -2.0]).unwrap();
    let bytes = encode(&[("ab", &t)]);
    assert_eq!(&bytes[..8], b"GSLDTNSR");
    assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
    assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
    assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
    assert_eq!(&bytes[20..22], b"ab");
    assert_eq!(bytes[22], 0);
    assert_eq!(&bytes[23..27], &1u32.to_le_bytes());
    assert_eq!(&bytes[27..35], &2u64.to_le_bytes());
    assert_eq!(&bytes[35..39], &1.0f32.to_le_bytes());
    assert_eq!(&bytes[39..43], &(-2.0f32).to_le_bytes());
    assert_eq!(bytes.len(), 43);
    let back = decode(&bytes).unwrap();
    assert_eq!(back, vec![("ab".to_string(), StoredTensor::F32(t))]);
}

#[test]
fn checkpoint_rejects_corruption() {
    let t = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
    let bytes = encode(&[("x", &t)]);
    assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode(&bad).is_err());
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(decode(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(decode(&extra).is_err());

    let mut store = ParamStore::<f32>::new();
    small_model(&mut store);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_store(&path, &store).unwrap();
    let mut other = ParamStore::<f32>::new();
    Conv2d::same(&mut other, "conv", 3, 5, 3, &mut rng(0));
    assert!(load_store_into(&path, &mut other).is_err());
}
