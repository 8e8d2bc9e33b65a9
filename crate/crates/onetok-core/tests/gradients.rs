//! Finite-difference validation of every hand-written backward, in f64:
//! the individual kernels, the low-rank delta path, and the full model
//! backward through attention, norms, rotary positions and the gated FFN.

use onetok_core::adapter::{LoraAdapter, LoraConfig, LoraGrads, Target};
use onetok_core::classmap::{preflight_classes, ClassKind, Preflight};
use onetok_core::gradcheck::{assert_grad_matches, finite_difference, max_relative_error};
use onetok_core::model::{ModelConfig, ModelWeights};
use onetok_core::tensor::{
    matmul, matmul_backward, rms_norm, rms_norm_backward, rope_apply, rope_backward, silu,
    silu_backward, softmax_backward, softmax_row, Tensor,
};
use onetok_core::tokenizer::Vocabulary;
use onetok_core::trainer::restricted_ce_loss_full_grad;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn pseudorandom(n: usize, seed: u64) -> Vec<f64> {
    // deterministic low-discrepancy filler, good enough for probes
    (0..n)
        .map(|i| {
            let v = ((i as u64 + 1).wrapping_mul(2654435761).wrapping_add(seed * 97)) % 1000;
            v as f64 / 500.0 - 1.0
        })
        .collect()
}

#[test]
fn matmul_backward_matches_finite_differences() {
    let (m, k, n) = (3usize, 4usize, 2usize);
    let a = Tensor::from_vec(&[m, k], pseudorandom(m * k, 1)).unwrap();
    let b = Tensor::from_vec(&[k, n], pseudorandom(k * n, 2)).unwrap();
    let w = Tensor::from_vec(&[m, n], pseudorandom(m * n, 3)).unwrap();
    // scalar loss: sum(w * (a . b))
    let (d_a, d_b) = matmul_backward(&a, &b, &w).unwrap();

    let (b2, w2) = (b.clone(), w.clone());
    let f_a = move |x: &[f64]| {
        let a_probe = Tensor::from_vec(&[m, k], x.to_vec()).unwrap();
        let c = matmul(&a_probe, &b2).unwrap();
        c.data().iter().zip(w2.data()).map(|(c, w)| c * w).sum()
    };
    assert_grad_matches(f_a, a.data(), d_a.data(), H, TOL, "matmul d_a");

    let (a2, w3) = (a.clone(), w.clone());
    let f_b = move |x: &[f64]| {
        let b_probe = Tensor::from_vec(&[k, n], x.to_vec()).unwrap();
        let c = matmul(&a2, &b_probe).unwrap();
        c.data().iter().zip(w3.data()).map(|(c, w)| c * w).sum()
    };
    assert_grad_matches(f_b, b.data(), d_b.data(), H, TOL, "matmul d_b");
}

#[test]
fn softmax_backward_matches_finite_differences() {
    let x = Tensor::from_vec(&[6], pseudorandom(6, 4)).unwrap();
    let w = Tensor::from_vec(&[6], pseudorandom(6, 5)).unwrap();
    let y = softmax_row(&x).unwrap();
    let d_x = softmax_backward(&y, &w).unwrap();

    let w2 = w.clone();
    let f = move |probe: &[f64]| {
        let y = softmax_row(&Tensor::from_vec(&[6], probe.to_vec()).unwrap()).unwrap();
        y.data().iter().zip(w2.data()).map(|(y, w)| y * w).sum()
    };
    assert_grad_matches(f, x.data(), d_x.data(), H, TOL, "softmax d_x");
}

#[test]
fn rms_norm_backward_matches_finite_differences() {
    let n = 5usize;
    let x = Tensor::from_vec(&[n], pseudorandom(n, 6)).unwrap();
    let gain = Tensor::from_vec(&[n], pseudorandom(n, 7)).unwrap();
    let w = Tensor::from_vec(&[n], pseudorandom(n, 8)).unwrap();
    let eps = 1e-5;
    let (d_x, d_gain) = rms_norm_backward(&x, &gain, eps, &w).unwrap();

    let (gain2, w2) = (gain.clone(), w.clone());
    let f_x = move |probe: &[f64]| {
        let y = rms_norm(&Tensor::from_vec(&[n], probe.to_vec()).unwrap(), &gain2, eps).unwrap();
        y.data().iter().zip(w2.data()).map(|(y, w)| y * w).sum()
    };
    assert_grad_matches(f_x, x.data(), d_x.data(), H, TOL, "rms_norm d_x");

    let (x2, w3) = (x.clone(), w.clone());
    let f_gain = move |probe: &[f64]| {
        let y = rms_norm(&x2, &Tensor::from_vec(&[n], probe.to_vec()).unwrap(), eps).unwrap();
        y.data().iter().zip(w3.data()).map(|(y, w)| y * w).sum()
    };
    assert_grad_matches(f_gain, gain.data(), d_gain.data(), H, TOL, "rms_norm d_gain");
}

#[test]
fn rope_backward_matches_finite_differences() {
    let shape = [2usize, 3, 4];
    let count = shape.iter().product();
    let theta = 100.0;
    let x = Tensor::from_vec(&shape, pseudorandom(count, 9)).unwrap();
    let w = Tensor::from_vec(&shape, pseudorandom(count, 10)).unwrap();
    let d_x = rope_backward(&w, theta).unwrap();

    let w2 = w.clone();
    let f = move |probe: &[f64]| {
        let y = rope_apply(&Tensor::from_vec(&shape, probe.to_vec()).unwrap(), theta).unwrap();
        y.data().iter().zip(w2.data()).map(|(y, w)| y * w).sum()
    };
    assert_grad_matches(f, x.data(), d_x.data(), H, TOL, "rope d_x");
}

#[test]
fn silu_backward_matches_finite_differences() {
    let xs = pseudorandom(9, 11);
    for &x in &xs {
        let analytic = silu_backward(x);
        let numeric = finite_difference(|p: &[f64]| silu(p[0]), &[x], H)[0];
        assert!(
            (analytic - numeric).abs() < TOL,
            "silu'({x}): {analytic} vs {numeric}"
        );
    }
}

#[test]
fn lora_delta_backward_matches_finite_differences() {
    // loss = sum(w * (x W + delta(x))) through backward_delta_rows
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_head: 2,
        d_ff: 4,
        max_context: 16,
        rope_theta: 10_000.0,
        seed: 2,
    };
    let mut adapter = LoraAdapter::<f64>::init("g", &cfg, LoraConfig::with_rank(2), 41).unwrap();
    // give B nonzero values so its gradient path is exercised
    for site in adapter.sites_mut() {
        let vals = pseudorandom(site.b.len(), 13);
        site.b.data_mut().copy_from_slice(&vals);
    }
    let rows = 3usize;
    let x = Tensor::from_vec(&[rows, 4], pseudorandom(rows * 4, 14)).unwrap();
    let w = Tensor::from_vec(&[rows, 4], pseudorandom(rows * 4, 15)).unwrap();

    let mut grads = LoraGrads::zeros_like(&adapter);
    let mut d_x = Tensor::zeros(&[rows, 4]);
    adapter.backward_delta_rows(0, Target::Query, &x, &w, &mut d_x, &mut grads);

    let site_idx = adapter.site_index(0, Target::Query).unwrap();
    let (d_a, d_b) = grads.site(site_idx);

    // probe A
    let (adapter_a, x_a, w_a) = (adapter.clone(), x.clone(), w.clone());
    let f_a = move |probe: &[f64]| {
        let mut ad = adapter_a.clone();
        ad.sites_mut()[site_idx].a.data_mut().copy_from_slice(probe);
        let mut out = Tensor::zeros(&[rows, 4]);
        ad.add_delta_rows(0, Target::Query, &x_a, &mut out);
        out.data().iter().zip(w_a.data()).map(|(o, w)| o * w).sum()
    };
    let a_point = adapter.sites()[site_idx].a.data().to_vec();
    assert_grad_matches(f_a, &a_point, d_a.data(), H, TOL, "lora d_a");

    // probe B
    let (adapter_b, x_b, w_b) = (adapter.clone(), x.clone(), w.clone());
    let f_b = move |probe: &[f64]| {
        let mut ad = adapter_b.clone();
        ad.sites_mut()[site_idx].b.data_mut().copy_from_slice(probe);
        let mut out = Tensor::zeros(&[rows, 4]);
        ad.add_delta_rows(0, Target::Query, &x_b, &mut out);
        out.data().iter().zip(w_b.data()).map(|(o, w)| o * w).sum()
    };
    let b_point = adapter.sites()[site_idx].b.data().to_vec();
    assert_grad_matches(f_b, &b_point, d_b.data(), H, TOL, "lora d_b");

    // probe x (input gradient)
    let (adapter_x, w_x) = (adapter.clone(), w.clone());
    let f_x = move |probe: &[f64]| {
        let xp = Tensor::from_vec(&[rows, 4], probe.to_vec()).unwrap();
        let mut out = Tensor::zeros(&[rows, 4]);
        adapter_x.add_delta_rows(0, Target::Query, &xp, &mut out);
        out.data().iter().zip(w_x.data()).map(|(o, w)| o * w).sum()
    };
    assert_grad_matches(f_x, x.data(), d_x.data(), H, TOL, "lora d_x");
}

/// End-to-end: gradient of the restricted cross-entropy loss with respect to
/// every adapter parameter, checked against finite differences through the
/// un-taped forward path.
#[test]
fn full_model_adapter_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        d_head: 2,
        d_ff: 4,
        max_context: 16,
        rope_theta: 10_000.0,
        seed: 31,
    };
    let weights = ModelWeights::<f64>::init_random(cfg).unwrap();
    let mut adapter = LoraAdapter::<f64>::init("g", &cfg, LoraConfig::with_rank(2), 71).unwrap();
    // nonzero B so every path carries signal
    for (i, site) in adapter.sites_mut().iter_mut().enumerate() {
        let vals: Vec<f64> = pseudorandom(site.b.len(), 100 + i as u64)
            .into_iter()
            .map(|v| v * 0.3)
            .collect();
        site.b.data_mut().copy_from_slice(&vals);
    }
    let tokens = [1u32, 7, 3, 9, 5];
    let class_ids = [2u32, 8];
    let label_idx = 0usize;

    // analytic gradients through the tape
    let tape = weights.forward_train(&tokens, &adapter).unwrap();
    let class_logits = weights.class_logits_from_tape(&tape, &class_ids);
    let (_, class_grad) =
        onetok_core::trainer::restricted_ce_from_class_logits(&class_logits, label_idx);
    let d_logits: Vec<(u32, f64)> = class_ids.iter().copied().zip(class_grad).collect();
    let mut grads = LoraGrads::zeros_like(&adapter);
    weights.backward(&tape, &adapter, &d_logits, &mut grads);

    // finite differences through the plain forward path, per site tensor
    let loss_for = |ad: &LoraAdapter<f64>| -> f64 {
        let logits = weights.forward(&tokens, Some(ad)).unwrap();
        let s0 = logits.as_slice()[class_ids[0] as usize];
        let s1 = logits.as_slice()[class_ids[1] as usize];
        let max = s0.max(s1);
        let z = (s0 - max).exp() + (s1 - max).exp();
        -((if label_idx == 0 { s0 } else { s1 } - max).exp() / z).ln()
    };

    for site_idx in 0..adapter.sites().len() {
        for which in 0..2 {
            let point: Vec<f64> = if which == 0 {
                adapter.sites()[site_idx].a.data().to_vec()
            } else {
                adapter.sites()[site_idx].b.data().to_vec()
            };
            let numeric = finite_difference(
                |probe: &[f64]| {
                    let mut ad = adapter.clone();
                    if which == 0 {
                        ad.sites_mut()[site_idx].a.data_mut().copy_from_slice(probe);
                    } else {
                        ad.sites_mut()[site_idx].b.data_mut().copy_from_slice(probe);
                    }
                    loss_for(&ad)
                },
                &point,
                H,
            );
            let (d_a, d_b) = grads.site(site_idx);
            let analytic = if which == 0 { d_a.data() } else { d_b.data() };
            let err = max_relative_error(analytic, &numeric);
            let site = &adapter.sites()[site_idx];
            assert!(
                err < TOL,
                "site layer {} target {} tensor {}: relative error {err:.2e}",
                site.layer,
                site.target.as_str(),
                if which == 0 { "A" } else { "B" }
            );
        }
    }
}

/// The restricted loss gradient over real model logits: exactly zero outside
/// the class tokens, finite-difference-accurate on them.
#[test]
fn restricted_loss_gradient_is_sparse_on_model_logits() {
    let vocab = Vocabulary::toy();
    let set = match preflight_classes(
        vocab,
        &["true".to_string(), "false".to_string()],
        ClassKind::Binary,
    )
    .unwrap()
    {
        Preflight::Ready(set) => set,
        other => panic!("{other:?}"),
    };
    let cfg = ModelConfig {
        vocab_size: 512,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_head: 2,
        d_ff: 4,
        max_context: 16,
        rope_theta: 10_000.0,
        seed: 3,
    };
    let weights = ModelWeights::<f64>::init_random(cfg).unwrap();
    let logits = weights.forward(&[5, 100, 200], None).unwrap();
    let (_, grad) = restricted_ce_loss_full_grad(logits.as_slice(), &set, "true").unwrap();
    let ids = set.token_ids();
    let mut nonzero = 0;
    for (i, g) in grad.iter().enumerate() {
        if ids.contains(&(i as u32)) {
            nonzero += 1;
        } else {
            assert_eq!(*g, 0.0, "logit {i} must carry exactly zero gradient");
        }
    }
    assert_eq!(nonzero, 2);
}
