use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zcswish_core::autodiff::kernels::{conv2d_forward, maxpool2_forward};
use zcswish_core::plainnet::{Depth, Mode, ParamCountReport, PlainNet, PlainNetConfig};
use zcswish_core::probes::{self, DEAD_THRESHOLD};
use zcswish_core::{ActivationKind, Error, Tape, Tensor};

/// Conv widths and pooled conv positions, written out per depth.
fn reference_layout(depth: Depth) -> (Vec<usize>, Vec<usize>) {
    match depth {
        Depth::D8 => (vec![64, 128, 256, 256, 512, 512], vec![0, 1, 3, 4, 5]),
        Depth::D16 => (
            vec![64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512],
            vec![1, 3, 6, 9, 12],
        ),
        Depth::D32 => (
            [64, 128, 256, 512, 512].iter().flat_map(|&c| [c; 6]).collect(),
            vec![5, 11, 17, 23, 29],
        ),
    }
}

fn closed_form_count(depth: Depth, act: ActivationKind, div: usize) -> (usize, usize) {
    let (widths, pools) = reference_layout(depth);
    let mut cin = 3;
    let mut total = 0;
    let mut act_params = 0;
    for &w in &widths {
        let cout = w / div;
        total += 9 * cin * cout + cout;
        if act == ActivationKind::ZcSwish {
            act_params += 3 * cout;
        }
        cin = cout;
    }
    let side = 32 >> pools.len();
    let flat = cin * side * side;
    let hidden = 512 / div;
    total += flat * hidden + hidden + hidden * 100 + 100;
    (total + act_params, act_params)
}

#[test]
fn table_totals() {
    let base = ParamCountReport::for_config(&PlainNetConfig::new(Depth::D16, ActivationKind::Relu)).unwrap();
    let zc = ParamCountReport::for_config(&PlainNetConfig::new(Depth::D16, ActivationKind::ZcSwish)).unwrap();
    assert_eq!(base.total, 15_028_644);
    assert_eq!(zc.total, 15_041_316);
    assert_eq!(zc.activation_params, 12_672);
    assert_eq!(format!("{:.3}", 100.0 * zc.overhead()), "0.084");
}

#[test]
fn counts_match_closed_form_everywhere() {
    for depth in [Depth::D8, Depth::D16, Depth::D32] {
        for div in [1, 2, 4, 8, 16, 32] {
            for act in ActivationKind::ALL {
                let cfg = PlainNetConfig::new(depth, act).with_width_divisor(div);
                let r = ParamCountReport::for_config(&cfg).unwrap();
                assert_eq!((r.total, r.activation_params), closed_form_count(depth, act, div), "{depth} {act} /{div}");
            }
        }
    }
}

#[test]
fn built_model_matches_plan() {
    for act in ActivationKind::ALL {
        let cfg = PlainNetConfig::new(Depth::D8, act).with_width_divisor(8);
        let model = PlainNet::<f32>::build(cfg.clone(), 0).unwrap();
        let allocated: usize = model.params().iter().map(|p| p.value.numel()).sum();
        assert_eq!(allocated, ParamCountReport::for_config(&cfg).unwrap().total);
    }
}

#[test]
fn architecture_has_no_normalization_or_skips() {
    for depth in [Depth::D8, Depth::D16, Depth::D32] {
        let convs = reference_layout(depth).0.len();
        let model = PlainNet::<f32>::build(PlainNetConfig::new(depth, ActivationKind::ZcSwish).with_width_divisor(32), 0).unwrap();
        let a = model.audit().unwrap();
        assert_eq!(a.convs, convs);
        assert_eq!(a.linears, 2);
        assert_eq!(a.pools, 5);
        assert_eq!(a.activation_sites, convs + 1);
        assert_eq!((a.normalization_layers, a.skip_junctions), (0, 0));
        let nominal = if depth == Depth::D16 { 15 } else { depth.layers() as usize };
        assert_eq!(convs + 2, nominal);
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PlainNetConfig::new(Depth::D8, ActivationKind::ZcSwish).with_width_divisor(16);
    let m32 = PlainNet::<f32>::build(cfg.clone(), 3).unwrap();
    m32.save(dir.path().join("a.ckpt")).unwrap();
    assert_eq!(PlainNet::<f32>::load(dir.path().join("a.ckpt")).unwrap(), m32);
    let m64 = PlainNet::<f64>::build(cfg, 3).unwrap();
    m64.save(dir.path().join("b.ckpt")).unwrap();
    assert_eq!(PlainNet::<f64>::load(dir.path().join("b.ckpt")).unwrap(), m64);
    // A 64-bit checkpoint loads into a 32-bit model by rounding each value.
    let narrowed = PlainNet::<f32>::load(dir.path().join("b.ckpt")).unwrap();
    for (a, b) in narrowed.params().iter().zip(m64.params()) {
        assert_eq!(a.value, b.value.cast::<f32>());
    }
    let bytes = std::fs::read(dir.path().join("a.ckpt")).unwrap();
    std::fs::write(dir.path().join("c.ckpt"), &bytes[..bytes.len() - 3]).unwrap();
    assert!(PlainNet::<f32>::load(dir.path().join("c.ckpt")).is_err());
}

#[test]
fn same_seed_same_weights() {
    let cfg = PlainNetConfig::new(Depth::D8, ActivationKind::Gelu).with_width_divisor(16);
    let a = PlainNet::<f32>::build(cfg.clone(), 5).unwrap();
    assert_eq!(a, PlainNet::<f32>::build(cfg.clone(), 5).unwrap());
    assert_ne!(a, PlainNet::<f32>::build(cfg, 6).unwrap());
}

#[test]
fn input_shape_error_names_input() {
    let model = PlainNet::<f32>::build(PlainNetConfig::new(Depth::D8, ActivationKind::Relu).with_width_divisor(16), 0).unwrap();
    let err = model.logits(&Tensor::zeros([1, 3, 16, 16])).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains("input"), "{err}");
}

fn random_images(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new([n, 3, 32, 32], (0..n * 3 * 1024).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Each sample's logits are independent of whatever else is in the batch.
    #[test]
    fn batch_independence(n in 1usize..5, seed in any::<u64>(), act in 0usize..4) {
        let kind = ActivationKind::ALL[act];
        let model = PlainNet::<f64>::build(PlainNetConfig::new(Depth::D8, kind).with_width_divisor(16), seed).unwrap();
        let images = random_images(n, seed);
        let batch = model.logits(&images).unwrap();
        for i in 0..n {
            let single = model.logits(&images.slice_outer(i, 1).unwrap()).unwrap();
            prop_assert_eq!(single.data(), &batch.data()[i * 100..(i + 1) * 100]);
        }
    }
}

/// Conv-block activations of a depth-16 Swish net, recomputed directly from
/// the kernels without the tape.
#[test]
fn layer_stats_match_direct_recomputation() {
    let cfg = PlainNetConfig::new(Depth::D16, ActivationKind::Swish).with_width_divisor(16);
    let model = PlainNet::<f64>::build(cfg, 42).unwrap();
    let images = random_images(2, 1);
    let stats = probes::layer_stats(&model, &images, &[0, 1], DEAD_THRESHOLD).unwrap();

    let (_, pools) = reference_layout(Depth::D16);
    let params = model.params();
    let mut x = images.clone();
    for i in 0..13 {
        let (w, b) = (&params[2 * i].value, &params[2 * i + 1].value);
        x = conv2d_forward(&x, w, b).unwrap().map(zcswish_core::activations::swish);
        let n = x.numel() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((stats[i].mean - mean).abs() <= 1e-12 * (1.0 + mean.abs()), "layer {i}");
        assert!((stats[i].std - var.sqrt()).abs() <= 1e-12, "layer {i}");
        if pools.contains(&i) {
            x = maxpool2_forward(&x).unwrap().0;
        }
    }
    assert_eq!(stats.len(), 14);
}

/// Probing a forward pass reads values only: logits are unchanged.
#[test]
fn probes_leave_logits_alone() {
    let model = PlainNet::<f32>::build(PlainNetConfig::new(Depth::D8, ActivationKind::ZcSwish).with_width_divisor(8), 7).unwrap();
    let images = random_images(3, 2).cast::<f32>();
    let before = model.logits(&images).unwrap();
    probes::layer_stats(&model, &images, &[1, 2, 3], DEAD_THRESHOLD).unwrap();
    probes::grad_flow(&model, &images, &[1, 2, 3]).unwrap();
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &images, Mode::Eval).unwrap();
    assert_eq!(tape.value(pass.logits), &before);
    assert_eq!(model.logits(&images).unwrap(), before);
}

#[test]
fn grad_flow_reports_every_weight_layer() {
    for depth in [Depth::D8, Depth::D16] {
        let model = PlainNet::<f32>::build(PlainNetConfig::new(depth, ActivationKind::Relu).with_width_divisor(16), 42).unwrap();
        let images = random_images(4, 3).cast::<f32>();
        let r = probes::grad_flow(&model, &images, &[0, 1, 2, 3]).unwrap();
        assert_eq!(r.layers.len(), reference_layout(depth).0.len() + 2);
        assert!(r.first_last_ratio.is_finite() && r.first_last_ratio > 0.0, "{depth}: {}", r.first_last_ratio);
    }
}

/// Weight-gradient norm of a single linear layer under cross-entropy,
/// against central differences of the loss.
#[test]
fn single_layer_grad_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::<f64>::new([4, 6], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w0: Vec<f64> = (0..5 * 6).map(|_| rng.random_range(-0.5..0.5)).collect();
    let b = Tensor::<f64>::new([5], vec![0.1, 0.0, -0.1, 0.2, 0.05]).unwrap();
    let labels = [0usize, 3, 4, 1];
    let loss_at = |w: &[f64]| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.param(Tensor::new([5, 6], w.to_vec()).unwrap());
        let bv = t.param(b.clone());
        let y = t.linear(xv, wv, bv).unwrap();
        let l = t.softmax_cross_entropy(y, &labels).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(l).item().unwrap(), g.wrt(wv))
    };
    let (_, grad) = loss_at(&w0);
    let h = 1e-6;
    let mut fd_sq = 0.0;
    for i in 0..w0.len() {
        let (mut wp, mut wm) = (w0.clone(), w0.clone());
        wp[i] += h;
        wm[i] -= h;
        let d = (loss_at(&wp).0 - loss_at(&wm).0) / (2.0 * h);
        fd_sq += d * d;
    }
    let analytic = grad.sq_norm().sqrt();
    assert!((analytic - fd_sq.sqrt()).abs() < 1e-4 * analytic, "{analytic} vs {}", fd_sq.sqrt());
}
