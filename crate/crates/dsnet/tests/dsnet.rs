use gigaslide_core::gradcheck::{check_inputs_training, check_params};
use gigaslide_core::nn::Linear;
use gigaslide_core::sparse::mask_downsample;
use gigaslide_core::{Graph, ParamStore, Tensor, TensorError};
use gigaslide_dsnet::blocks::{Aggregation, ConcurrentBottleneck, MultiScaleBlock};
use gigaslide_dsnet::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn as_tensor_err(e: DsnetError) -> TensorError {
    TensorError::Invalid {
        op: "dsnet",
        detail: e.to_string(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_input<T: gigaslide_core::Real>(b: usize, levels: usize, c: usize, h: usize, w: usize, observed: f64, seed: u64) -> DsnetInput<T> {
    let mut r = rng(seed);
    let embedding_mask = Tensor::from_fn(&[b, 1, h, w], |_| if r.gen_bool(observed) { T::one() } else { T::zero() });
    let embedding = Tensor::from_fn(&[b, c, h, w], |i| {
        let (bi, hw) = (i / (c * h * w), i % (h * w));
        embedding_mask.data()[bi * h * w + hw] * T::lit(r.gen_range(0.01..0.99))
    });
    DsnetInput {
        thumbnail: Tensor::from_fn(&[b, 3 * levels, 2 * h, 2 * w], |_| T::lit(r.gen_range(0.0..1.0))),
        thumbnail_mask: Tensor::ones(&[b, 1, 2 * h, 2 * w]),
        embedding,
        embedding_mask,
    }
}

#[test]
fn channel_split_rule() {
    assert_eq!(split_channels(144, 3), vec![48, 48, 48]);
    assert_eq!(split_channels(64, 3), vec![22, 21, 21]);
    assert_eq!(split_channels(320, 3), vec![108, 106, 106]);
}

#[test]
fn multi_scale_block_shapes() {
    let mut store = ParamStore::<f32>::new();
    assert!(MultiScaleBlock::new(&mut store, "bad", 4, 2, &[3, 5, 7], 1, &mut rng(0)).is_err());
    let blk = MultiScaleBlock::new(&mut store, "ms", 8, 10, &[3, 5, 7], 1, &mut rng(0)).unwrap();
    let widths: Vec<usize> = blk.paths.iter().map(|p| p.cout).collect();
    assert_eq!(widths, vec![4, 3, 3]);
    let mut g = Graph::train();
    let x = g.constant(Tensor::from_fn(&[2, 8, 9, 11], |i| (i as f32 * 0.37).sin()));
    let y = blk.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[2, 10, 9, 11]);
    let s2 = MultiScaleBlock::new(&mut store, "ms2", 8, 6, &[3, 5, 7], 2, &mut rng(0)).unwrap();
    let y = s2.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[2, 6, 5, 6]);
}

#[test]
fn block_table_matches_reference_rows() {
    let mut store = ParamStore::<f32>::new();
    let model = Dsnet::new(&mut store, DsnetConfig::default(), &mut rng(1)).unwrap();
    let rows: Vec<(&str, &str, usize, usize, Vec<usize>, usize)> = model
        .blocks()
        .into_iter()
        .map(|b| (b.stream, b.block, b.cin, b.cout, b.kernels, b.stride))
        .collect();
    let ms = vec![3, 5, 7];
    let expected = vec![
        ("thumbnail", "Conv", 9, 32, vec![7], 2),
        ("thumbnail", "MS", 32, 64, ms.clone(), 1),
        ("thumbnail", "MS", 64, 144, ms.clone(), 2),
        ("thumbnail", "MS", 144, 256, ms.clone(), 2),
        ("thumbnail", "MS", 256, 320, ms, 1),
        ("embedding", "CB", 128, 144, vec![5], 2),
        ("embedding", "CB", 144, 224, vec![5], 1),
        ("embedding", "CB", 224, 256, vec![5], 2),
        ("embedding", "CB", 256, 320, vec![5], 1),
    ];
    assert_eq!(rows, expected);
}

/// Parameter count derived from layer shapes alone.
fn expected_params() -> usize {
    let bn = |c: usize| 2 * c;
    let sep = |cin: usize, cout: usize, k: usize| cin * k * k + cin * cout;
    let mut total = 9 * 32 * 49 + bn(32);
    let mut cin = 32;
    for cout in [64, 144, 256, 320] {
        let third = cout / 3;
        let widths = [cout - 2 * third, third, third];
        total += [3, 5, 7].iter().zip(widths).map(|(&k, w)| sep(cin, w, k)).sum::<usize>() + bn(cout);
        cin = cout;
    }
    let mut cin = 128;
    for cout in [144, 224, 256, 320] {
        let mid = cin / 4;
        total += cin * mid + bn(mid) + 2 * (mid * mid * 25 + bn(mid)) + mid * cout + bn(cout);
        cin = cout;
    }
    total += 640 + 1 + (320 * 80 + 80) + (80 * 320 + 320);
    total += 320 * 640 + bn(640) + (1280 * 160 + 160) + (160 * 2 + 2);
    total
}

#[test]
fn parameter_budget() {
    let mut store = ParamStore::<f32>::new();
    let model = Dsnet::new(&mut store, DsnetConfig::default(), &mut rng(1)).unwrap();
    let total = count_params(&store);
    let breakdown = model.param_breakdown(&store);
    for (name, n) in &breakdown {
        println!("{name:>12} {n:>9}");
    }
    println!("{:>12} {total:>9}", "total");
    assert_eq!(breakdown.iter().map(|b| b.1).sum::<usize>(), total);
    assert_eq!(total, expected_params());
    assert!((900_000..=1_300_000).contains(&total), "{total}");
}

#[test]
fn single_linear_layer_count() {
    let mut store = ParamStore::<f32>::new();
    Linear::new(&mut store, "fc", 10, 2, &mut rng(0));
    assert_eq!(count_params(&store), 22);
}

#[test]
fn stream_extents_coincide() {
    let mut store = ParamStore::<f32>::new();
    let model = Dsnet::new(&mut store, DsnetConfig::default(), &mut rng(2)).unwrap();
    let input = random_input::<f32>(2, 3, 128, 16, 16, 0.6, 3);
    let mut g = Graph::eval();
    let out = model.forward(&mut g, &store, &input).unwrap();
    let last = |prefix: &str| out.trace.iter().filter(|t| t.0.starts_with(prefix)).last().unwrap().1;
    assert_eq!(last("thumb"), [4, 4]);
    assert_eq!(last("embed"), [4, 4]);
    assert_eq!(g.shape(out.head_features), &[2, 640, 4, 4]);
    assert_eq!(g.shape(out.logits), &[2, 2]);
    let s = out.stream_score.unwrap();
    assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn extent_mismatch_is_rejected() {
    let mut store = ParamStore::<f32>::new();
    let model = Dsnet::new(&mut store, DsnetConfig::default(), &mut rng(2)).unwrap();
    let mut input = random_input::<f32>(1, 3, 128, 16, 16, 1.0, 3);
    input.thumbnail = Tensor::zeros(&[1, 9, 30, 32]);
    input.thumbnail_mask = Tensor::ones(&[1, 1, 30, 32]);
    let mut g = Graph::eval();
    assert!(matches!(model.forward(&mut g, &store, &input), Err(DsnetError::Extent { .. })));
    let input = random_input::<f32>(1, 3, 128, 6, 6, 1.0, 3);
    assert!(model.forward(&mut g, &store, &input).is_err());
}

#[test]
fn batch_permutation_permutes_logits() {
    let mut store = ParamStore::<f32>::new();
    let model = Dsnet::new(&mut store, DsnetConfig::default(), &mut rng(4)).unwrap();
    let input = random_input::<f32>(3, 3, 128, 8, 8, 0.7, 5);
    let perm = [2usize, 0, 1];
    let pick = |t: &Tensor<f32>| {
        let items: Vec<Tensor<f32>> = perm.iter().map(|&i| t.batch_item(i).unwrap()).collect();
        Tensor::stack(&items.iter().collect::<Vec<_>>()).unwrap()
    };
    let permuted = DsnetInput {
        thumbnail: pick(&input.thumbnail),
        thumbnail_mask: pick(&input.thumbnail_mask),
        embedding: pick(&input.embedding),
        embedding_mask: pick(&input.embedding_mask),
    };
    let mut g = Graph::eval();
    let a = model.forward(&mut g, &store, &input).unwrap();
    let b = model.forward(&mut g, &store, &permuted).unwrap();
    let (la, lb) = (g.value(a.logits).data(), g.value(b.logits).data());
    for (j, &i) in perm.iter().enumerate() {
        for k in 0..2 {
            assert!((lb[j * 2 + k] - la[i * 2 + k]).abs() < 1e-5);
        }
    }
}

#[test]
fn bottleneck_starts_as_identity() {
    let mut store = ParamStore::<f64>::new();
    let cb = ConcurrentBottleneck::new(&mut store, "cb", 16, 16, 5, 4, 1, true, &mut rng(6)).unwrap();
    let x = Tensor::from_fn(&[2, 16, 8, 8], |i| 0.1 + (i % 7) as f64 * 0.1);
    let mut g = Graph::train();
    let v = g.sparse_input(&gigaslide_core::MaskedTensor::full(x.clone()).unwrap(), false);
    let y = cb.forward(&mut g, &store, &v).unwrap();
    assert!(g.value(y.features).max_abs_diff(&x).unwrap() < 1e-12);

    // widening pads the shortcut with zero channels
    let cb = ConcurrentBottleneck::new(&mut store, "wide", 16, 24, 5, 4, 1, true, &mut rng(6)).unwrap();
    let y = cb.forward(&mut g, &store, &v).unwrap();
    let out = g.value(y.features);
    assert_eq!(out.narrow_channels(0, 16).unwrap().max_abs_diff(&x).unwrap(), 0.0);
    assert_eq!(out.narrow_channels(16, 8).unwrap().max_abs(), 0.0);
}

#[test]
fn strided_bottleneck_halves_grid_and_mask() {
    let mut store = ParamStore::<f32>::new();
    let cb = ConcurrentBottleneck::new(&mut store, "cb", 8, 12, 5, 4, 2, true, &mut rng(7)).unwrap();
    let input = random_input::<f32>(2, 1, 8, 8, 12, 0.3, 8);
    let m = gigaslide_core::MaskedTensor::new(input.embedding.clone(), input.embedding_mask.clone()).unwrap();
    let mut g = Graph::train();
    let v = g.sparse_input(&m, false);
    let y = cb.forward(&mut g, &store, &v).unwrap();
    assert_eq!(g.shape(y.features), &[2, 12, 4, 6]);
    assert_eq!(y.mask, mask_downsample(&input.embedding_mask, 2, 2).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn pool_mask_tracks_embedding_grid(seed in 0u64..1000, observed in 0.05f64..0.6) {
        let config = DsnetConfig {
            components: Components { thumbnail_stream: false, ..Components::default() },
            embedding_channels: 16,
            embedding_widths: vec![16, 24, 24, 32],
            ..DsnetConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        // randomize the residual gates so every path carries signal
        let model = Dsnet::new(&mut store, config, &mut rng(seed)).unwrap();
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with("expand.bn.gamma")).map(|(id, _)| id).collect();
        for id in ids {
            store.get_mut(id).value = Tensor::ones(store.value(id).shape());
        }
        let input = random_input::<f32>(2, 3, 16, 16, 16, observed, seed);
        let mut g = Graph::train();
        let out = model.forward(&mut g, &store, &input).unwrap();
        let f = g.value(out.head_features);
        // the head is dense, so check the stream output via its recorded mask
        prop_assert_eq!(out.pool_mask.shape(), &[2, 1, 4, 4]);
        prop_assert_eq!(&out.pool_mask, &mask_downsample(&mask_downsample(&input.embedding_mask, 2, 2).unwrap(), 2, 2).unwrap());
        prop_assert!(f.is_finite());
    }
}

#[test]
fn mask_closure_at_every_block() {
    let mut store = ParamStore::<f64>::new();
    let widths = [12usize, 12, 16, 16];
    let strides = [2usize, 1, 2, 1];
    let mut blocks = Vec::new();
    let mut cin = 8;
    for (i, (&w, &s)) in widths.iter().zip(&strides).enumerate() {
        let b = ConcurrentBottleneck::new(&mut store, &format!("cb{i}"), cin, w, 5, 4, s, true, &mut rng(9)).unwrap();
        blocks.push(b);
        cin = w;
    }
    for id in store.iter().map(|(id, _)| id).collect::<Vec<_>>() {
        if store.get(id).name.ends_with("expand.bn.gamma") {
            store.get_mut(id).value = Tensor::ones(store.value(id).shape());
        }
    }
    for seed in 0..20 {
        let input = random_input::<f64>(2, 1, 8, 16, 16, 0.25, seed);
        let m = gigaslide_core::MaskedTensor::new(input.embedding, input.embedding_mask).unwrap();
        let mut g = Graph::train();
        let mut v = g.sparse_input(&m, false);
        for b in &blocks {
            v = b.forward(&mut g, &store, &v).unwrap();
            assert!(g.masked_value(&v).is_closed());
        }
    }
}

#[test]
fn stream_gate_saturated_ignores_thumbnail() {
    let mut store = ParamStore::<f64>::new();
    let model = Dsnet::new(&mut store, DsnetConfig::default(), &mut rng(10)).unwrap();
    let w = store.lookup("agg.stream.weight").unwrap();
    let b = store.lookup("agg.stream.bias").unwrap();
    store.get_mut(w).value = Tensor::zeros(store.value(w).shape());
    store.get_mut(b).value = Tensor::full(&[1], 1000.0);
    let a = random_input::<f64>(1, 3, 128, 8, 8, 0.5, 11);
    let mut other = a.clone();
    other.thumbnail = random_input::<f64>(1, 3, 128, 8, 8, 0.5, 12).thumbnail;
    let mut g = Graph::eval();
    let oa = model.forward(&mut g, &store, &a).unwrap();
    let ob = model.forward(&mut g, &store, &other).unwrap();
    assert_eq!(oa.stream_score.unwrap().data(), &[1.0]);
    assert_eq!(g.value(oa.logits), g.value(ob.logits));
}

#[test]
fn half_gate_and_open_channels_average_streams() {
    let mut store = ParamStore::<f64>::new();
    let agg = Aggregation::new(&mut store, "agg", 8, true, true, true, 4, &mut rng(13));
    let (fc, (_, ex)) = (agg.stream_fc.clone().unwrap(), agg.squeeze.clone().unwrap());
    store.get_mut(fc.weight).value = Tensor::zeros(&[1, 16]);
    store.get_mut(fc.bias).value = Tensor::zeros(&[1]);
    store.get_mut(ex.weight).value = Tensor::zeros(&[8, 2]);
    store.get_mut(ex.bias).value = Tensor::full(&[8], 1000.0);
    let mut r = rng(14);
    let t = Tensor::from_fn(&[2, 8, 3, 3], |_| r.gen_range(-1.0..1.0));
    let v = Tensor::from_fn(&[2, 8, 3, 3], |_| r.gen_range(0.1..1.0));
    let mut g = Graph::eval();
    let tv = g.constant(t.clone());
    let vv = g.sparse_input(&gigaslide_core::MaskedTensor::full(v.clone()).unwrap(), false);
    let fused = agg.forward(&mut g, &store, Some(tv), Some(&vv)).unwrap();
    let mean = t.zip_map(&v, |a, b| 0.5 * (a + b)).unwrap();
    assert!(g.value(fused.features).max_abs_diff(&mean).unwrap() < 1e-12);
    let s = fused.stream_score.unwrap();
    // stream weights s and 1 − s
    assert!(s.data().iter().all(|&x| x == 0.5 && x + (1.0 - x) == 1.0));
}

#[test]
fn full_mask_sparse_and_dense_agree() {
    let mut store = ParamStore::<f64>::new();
    let model = Dsnet::new(&mut store, DsnetConfig::default(), &mut rng(15)).unwrap();
    let mut dense = model.clone();
    dense.config.components.sparse = false;
    let input = random_input::<f64>(2, 3, 128, 8, 8, 1.0, 16);
    for training in [false, true] {
        let mut g = Graph::with_mode(training, false);
        let a = model.forward(&mut g, &store, &input).unwrap();
        let b = dense.forward(&mut g, &store, &input).unwrap();
        assert!(g.value(a.logits).max_abs_diff(g.value(b.logits)).unwrap() < 1e-4);
    }
    // with holes the two modes differ
    let holes = random_input::<f64>(2, 3, 128, 8, 8, 0.5, 16);
    let mut g = Graph::eval();
    let a = model.forward(&mut g, &store, &holes).unwrap();
    let b = dense.forward(&mut g, &store, &holes).unwrap();
    assert!(g.value(a.logits).max_abs_diff(g.value(b.logits)).unwrap() > 1e-6);
}

#[test]
fn every_ablation_row_constructs_and_runs() {
    for (name, components) in Components::ablation_rows() {
        let mut store = ParamStore::<f32>::new();
        let config = DsnetConfig {
            components,
            ..DsnetConfig::default()
        };
        let model = Dsnet::new(&mut store, config, &mut rng(17)).unwrap();
        let input = random_input::<f32>(2, 3, 128, 8, 8, 0.5, 18);
        let mut g = Graph::train();
        let out = model.forward(&mut g, &store, &input).unwrap();
        assert_eq!(g.shape(out.logits), &[2, 2], "{name}");
        assert!(g.value(out.logits).is_finite(), "{name}");
        println!("{name}: {} parameters", count_params(&store));
    }
    let bad = DsnetConfig {
        components: Components {
            thumbnail_stream: false,
            embedding_stream: false,
            ..Components::default()
        },
        ..DsnetConfig::default()
    };
    assert!(Dsnet::new(&mut ParamStore::<f32>::new(), bad, &mut rng(0)).is_err());
}

#[test]
fn tiny_network_gradients() {
    let mut store = ParamStore::<f64>::new();
    let model = Dsnet::new(&mut store, DsnetConfig::default(), &mut rng(19)).unwrap();
    // open the residual branches so the check covers them
    for id in store.iter().map(|(id, _)| id).collect::<Vec<_>>() {
        if store.get(id).name.ends_with("expand.bn.gamma") {
            store.get_mut(id).value = Tensor::full(store.value(id).shape(), 0.5);
        }
    }
    let input = random_input::<f64>(2, 3, 128, 8, 8, 0.7, 20);
    let labels = [0usize, 1];
    let (tm, em) = (input.thumbnail_mask.clone(), input.embedding_mask.clone());
    let report = check_inputs_training(&[input.thumbnail.clone(), input.embedding.clone()], Some(40), |g, v| {
        let out = model.forward_vars(g, &store, v[0], v[1], &tm, &em).map_err(as_tensor_err)?;
        g.softmax_cross_entropy(out.logits, &labels)
    })
    .unwrap();
    println!("{report:?}");
    assert!(report.passes(1e-4), "{report:?}");

    let names = [
        "thumb.stem.conv.weight",
        "thumb.ms2.path1.depthwise",
        "thumb.ms4.path2.pointwise",
        "embed.cb1.reduce.conv.weight",
        "embed.cb1.inner1.conv.weight",
        "embed.cb3.inner2.conv.weight",
        "embed.cb4.expand.bn.gamma",
        "agg.stream.weight",
        "agg.excite.weight",
        "head.conv.weight",
        "head.fc1.weight",
        "head.fc2.bias",
    ];
    let ids: Vec<_> = names.iter().map(|n| store.lookup(n).unwrap_or_else(|| panic!("{n}"))).collect();
    let input_ref = &input;
    let report = check_params(&mut store, &ids, Some(12), true, |g, s| {
        let out = model.forward(g, s, input_ref).map_err(as_tensor_err)?;
        g.softmax_cross_entropy(out.logits, &labels)
    })
    .unwrap();
    println!("{report:?}");
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn cam_combination_rules() {
    // uniform features and gradients give a constant (all-zero) map
    let f = Tensor::full(&[1, 3, 2, 2], 0.7f64);
    let g = Tensor::full(&[1, 3, 2, 2], 0.2);
    let m = cam_map(&f, &g, 4).unwrap();
    assert_eq!(m.shape(), &[8, 8]);
    assert!(m.data().iter().all(|&v| v == m.data()[0]));
    // all-negative evidence
    let m = cam_map(&f, &g.map(|v| -v), 2).unwrap();
    assert_eq!(m.max_abs(), 0.0);
    // a single hot cell
    let mut f = Tensor::zeros(&[1, 1, 2, 2]);
    f.set4(0, 0, 1, 0, 2.0);
    let m = cam_map(&f, &Tensor::full(&[1, 1, 2, 2], 1.0), 2).unwrap();
    assert_eq!(m.data(), &[0., 0., 0., 0., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0.]);
}

#[test]
fn cam_on_network_is_normalized() {
    let mut store = ParamStore::<f32>::new();
    let model = Dsnet::new(&mut store, DsnetConfig::default(), &mut rng(21)).unwrap();
    let input = random_input::<f32>(1, 3, 128, 8, 8, 0.5, 22);
    let m = grad_cam(&model, &store, &input, 1).unwrap();
    assert_eq!(m.shape(), &[16, 16]);
    assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let two = random_input::<f32>(2, 3, 128, 8, 8, 0.5, 22);
    assert!(grad_cam(&model, &store, &two, 1).is_err());
}
