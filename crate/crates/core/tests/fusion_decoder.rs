mod common;

use common::*;
use proptest::prelude::*;
use rfm_core::kernels;
use rfm_core::model::FeaturePyramid;
use rfm_core::nn::{conv_block, ConvBlockParams};
use rfm_core::owca::{cross_attention, AttentionConfig};
use rfm_core::rfa::{decode, rfa_step, rfa_top, Head, RfaParams, RfaStep, RfaTop};
use rfm_core::rif::{
    default_windows, dispatch_fusion, merge_reference_features, rif_s, rif_t, rif_t_with_weights, FusionParams,
    ReferenceBundle, RifSLevel, RifTLevel,
};
use rfm_core::{Mode, Tensor};

fn concat(parts: &[&Tensor]) -> Tensor {
    let mut data = Vec::new();
    let mut c = 0;
    for p in parts {
        data.extend_from_slice(p.data());
        c += p.dim(0);
    }
    Tensor::new(vec![c, parts[0].dim(1), parts[0].dim(2)], data).unwrap()
}

fn rif_s_level(c: usize, k: usize, seed: u64) -> RifSLevel {
    let mut p = RifSLevel::new(2, c, k, 2, seed).unwrap();
    perturb_block(&mut p.merge, seed + 1);
    perturb_block(&mut p.out, seed + 2);
    for (i, l) in [&mut p.attn.wq, &mut p.attn.wk, &mut p.attn.wv, &mut p.attn.wo]
        .into_iter()
        .enumerate()
    {
        l.bias = rand_tensor(&[c], seed + 3 + i as u64);
    }
    p.alpha.set(0.3);
    p
}

#[test]
fn merge_single_reference_is_its_pointwise_block() {
    let p = rif_s_level(4, 1, 1);
    let r = rand_tensor(&[4, 8, 8], 2);
    let got = merge_reference_features(std::slice::from_ref(&r), &p).unwrap();
    assert_eq!(got, conv_block(&r, &mut p.merge.clone(), Mode::Eval).unwrap());
}

#[test]
fn merge_matches_concat_projection_oracle() {
    let p = rif_s_level(4, 2, 3);
    let (a, b) = (rand_tensor(&[4, 8, 8], 4), rand_tensor(&[4, 8, 8], 5));
    let got = merge_reference_features(&[a.clone(), b.clone()], &p).unwrap();
    assert_close(&got, &naive_conv_block(&concat(&[&a, &b]), &p.merge), 1e-10);

    let p3 = RifSLevel::new(2, 16, 3, 4, 0).unwrap();
    assert_eq!(p3.merge.c_in(), 48);
    let refs: Vec<Tensor> = (0..3).map(|i| rand_tensor(&[16, 4, 4], i)).collect();
    assert_eq!(merge_reference_features(&refs, &p3).unwrap().shape(), &[16, 4, 4]);
    assert!(merge_reference_features(&[], &p3).is_err());
    assert!(merge_reference_features(&[refs[0].clone(), refs[1].clone(), rand_tensor(&[16, 2, 2], 9)], &p3).is_err());
}

#[test]
fn rif_s_at_zero_alpha_ignores_the_reference() {
    let mut p = rif_s_level(4, 1, 6);
    p.alpha.set(0.0);
    let fx = rand_tensor(&[4, 8, 8], 7);
    let want = conv_block(&fx, &mut p.out.clone(), Mode::Eval).unwrap();
    for seed in 0..3 {
        let fs = rand_tensor(&[4, 8, 8], 100 + seed).map(|v| 10.0 * v);
        assert_eq!(rif_s(&fx, &fs, 4, &p).unwrap(), want);
    }
}

#[test]
fn rif_s_single_window_matches_unwindowed_oracle() {
    for seed in 0..3 {
        let p = rif_s_level(4, 1, 10 + seed);
        let fx = rand_tensor(&[4, 8, 8], 20 + seed);
        let fs = rand_tensor(&[4, 8, 8], 30 + seed);
        let e = cross_attention(&fx, &fs, AttentionConfig::new(4, 2).unwrap(), &p.attn).unwrap();
        let a = p.alpha.get();
        let blended = Tensor::from_fn(&[4, 8, 8], |i| a * e.data()[i] + (1.0 - a) * fx.data()[i]);
        let got = rif_s(&fx, &fs, 8, &p).unwrap();
        assert_eq!(got.shape(), fx.shape());
        assert_close(&got, &naive_conv_block(&blended, &p.out), 1e-10);
    }
}

fn rif_t_level(c: usize, ct: usize, seed: u64) -> RifTLevel {
    let mut p = RifTLevel::new(3, c, ct, seed);
    p.text_proj.bias = rand_tensor(&[c], seed + 1);
    perturb_block(&mut p.fuse, seed + 2);
    p
}

/// Per-pixel softmax over sentences of `x · proj_n`, weighted sum of the
/// projected sentences, then the fuse block over `[x ; enhancement]`.
fn rif_t_oracle(fx: &Tensor, ft: &Tensor, p: &RifTLevel) -> Tensor {
    let (c, hw) = (fx.dim(0), fx.dim(1) * fx.dim(2));
    let proj: Vec<Vec<f64>> = ft
        .data()
        .chunks(ft.dim(1))
        .map(|t| naive_linear(t, &p.text_proj.weight, &p.text_proj.bias))
        .collect();
    let mut enh = vec![0.0; c * hw];
    for px in 0..hw {
        let s: Vec<f64> = proj
            .iter()
            .map(|pn| (0..c).map(|ch| fx.data()[ch * hw + px] * pn[ch]).sum())
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for (sn, pn) in s.iter().zip(&proj) {
            for ch in 0..c {
                enh[ch * hw + px] += sn.exp() / z * pn[ch];
            }
        }
    }
    let enh = Tensor::new(fx.shape().to_vec(), enh).unwrap();
    naive_conv_block(&concat(&[fx, &enh]), &p.fuse)
}

#[test]
fn rif_t_matches_per_pixel_oracle() {
    for seed in 0..3 {
        let p = rif_t_level(4, 6, seed);
        let fx = rand_tensor(&[4, 4, 4], 40 + seed);
        let ft = rand_tensor(&[4, 6], 50 + seed);
        let got = rif_t(&fx, &ft, &p).unwrap();
        assert_eq!(got.shape(), fx.shape());
        assert_close(&got, &rif_t_oracle(&fx, &ft, &p), 1e-10);
    }
}

#[test]
fn rif_t_single_sentence_broadcasts_its_projection() {
    let p = rif_t_level(4, 6, 60);
    let fx = rand_tensor(&[4, 4, 4], 61);
    let ft = rand_tensor(&[1, 6], 62);
    let (out, w) = rif_t_with_weights(&fx, &ft, &p).unwrap();
    assert!(w.data().iter().all(|&v| v == 1.0));
    let pn = naive_linear(ft.data(), &p.text_proj.weight, &p.text_proj.bias);
    let enh = Tensor::from_fn(&[4, 4, 4], |i| pn[i / 16]);
    assert_close(&out, &naive_conv_block(&concat(&[&fx, &enh]), &p.fuse), 1e-12);
    assert!(rif_t(&fx, &Tensor::zeros(&[0, 6]), &p).is_err());
}

fn pyramid(channels: [usize; 4], size: usize, seed: u64) -> FeaturePyramid {
    FeaturePyramid {
        levels: (0..4)
            .map(|i| rand_tensor(&[channels[i], size >> i, size >> i], seed + i as u64))
            .collect(),
    }
}

#[test]
fn dispatch_respects_the_layer_mask() {
    let ch = [4, 4, 8, 8];
    let x = pyramid(ch, 16, 1);
    let image = FusionParams::Image(
        (2..=4)
            .map(|l| RifSLevel::new(l, ch[l - 1], 2, 2, 3).unwrap())
            .collect(),
    );
    let text = FusionParams::Text((2..=4).map(|l| RifTLevel::new(l, ch[l - 1], 5, 3)).collect());
    let bundles = [
        ReferenceBundle::Image {
            pyramids: vec![pyramid(ch, 16, 10), pyramid(ch, 16, 20)],
        },
        ReferenceBundle::Text {
            embeddings: rand_tensor(&[3, 5], 30),
        },
    ];
    let windows = default_windows([8, 4, 2]);
    for (params, bundle) in [(&image, &bundles[0]), (&text, &bundles[1])] {
        let all = dispatch_fusion(&x, bundle, params, &[2, 3, 4], windows).unwrap();
        assert_eq!(all.levels[0].data(), x.levels[0].data());
        for i in 1..4 {
            assert_eq!(all.levels[i].shape(), x.levels[i].shape());
            assert_ne!(all.levels[i], x.levels[i]);
        }
        let only4 = dispatch_fusion(&x, bundle, params, &[4], windows).unwrap();
        assert_eq!(&only4.levels[..3], &x.levels[..3]);
        assert_eq!(only4.levels[3], all.levels[3]);
        assert_eq!(dispatch_fusion(&x, bundle, params, &[], windows).unwrap(), x);
        assert!(dispatch_fusion(&x, bundle, params, &[1], windows).is_err());
    }
    assert!(dispatch_fusion(&x, &bundles[1], &image, &[2], windows).is_err());
}

fn head_oracle(h: &Head, x: &Tensor) -> Tensor {
    let y = naive_conv_block(x, &h.conv);
    naive_conv(&y, &h.c1.kernel, h.c1.bias.data(), 1, 0)
}

fn triple_oracle(t: &[ConvBlockParams; 3], x: &Tensor) -> Tensor {
    t.iter().fold(x.clone(), |acc, b| naive_conv_block(&acc, b))
}

fn perturb_top(p: &mut RfaTop, seed: u64) {
    for (i, b) in p.triple_conv.iter_mut().chain([&mut p.head.conv]).enumerate() {
        perturb_block(b, seed + 10 * i as u64);
    }
    p.head.c1.bias = rand_tensor(&[1], seed + 99);
}

fn perturb_step(p: &mut RfaStep, seed: u64) {
    let blocks = [
        &mut p.pre_cat_conv,
        &mut p.gate_conv,
        &mut p.post_cat_conv,
        &mut p.head.conv,
    ];
    for (i, b) in blocks.into_iter().chain(p.triple_conv.iter_mut()).enumerate() {
        perturb_block(b, seed + 10 * i as u64);
    }
    p.head.c1.bias = rand_tensor(&[1], seed + 99);
}

fn upsample(x: &Tensor, h: usize, w: usize) -> Tensor {
    let d = kernels::bilinear_forward(x.data(), x.dim(0), x.dim(1), x.dim(2), h, w);
    Tensor::new(vec![x.dim(0), h, w], d).unwrap()
}

fn step_oracle(p: &RfaStep, fi: &Tensor, g_next: &Tensor, p_next: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = (fi.dim(1), fi.dim(2));
    let gu = upsample(g_next, h, w);
    let gate = upsample(p_next, h, w).map(kernels::sigmoid);
    let gated = Tensor::from_fn(gu.shape(), |i| gu.data()[i] * gate.data()[i % (h * w)]);
    let j = naive_conv_block(&gated, &p.gate_conv);
    let f = naive_conv_block(fi, &p.pre_cat_conv);
    let k = naive_conv_block(&concat(&[&f, &j]), &p.post_cat_conv);
    let g = triple_oracle(&p.triple_conv, &k);
    let pred = head_oracle(&p.head, &g);
    (g, pred)
}

#[test]
fn rfa_top_matches_composition() {
    let mut p = RfaTop::new(6, 5, 1);
    perturb_top(&mut p, 2);
    let f4 = rand_tensor(&[6, 4, 4], 3);
    let (g4, p4) = rfa_top(&f4, &p).unwrap();
    assert_eq!(g4.shape(), &[5, 4, 4]);
    assert_eq!(p4.shape(), &[1, 4, 4]);
    let want_g = triple_oracle(&p.triple_conv, &f4);
    assert_close(&g4, &want_g, 1e-12);
    assert_close(&p4, &head_oracle(&p.head, &want_g), 1e-12);
}

#[test]
fn rfa_step_matches_composition() {
    for seed in 0..3 {
        let mut p = RfaStep::new(2, 6, 5, seed);
        perturb_step(&mut p, seed + 7);
        let fi = rand_tensor(&[6, 8, 8], seed + 1);
        let gn = rand_tensor(&[5, 4, 4], seed + 2).map(f64::abs);
        let pn = rand_range(&[1, 4, 4], -3.0, 3.0, seed + 3);
        let (g, pr) = rfa_step(&fi, &gn, &pn, &p).unwrap();
        let (wg, wp) = step_oracle(&p, &fi, &gn, &pn);
        assert_eq!(pr.shape(), &[1, 8, 8]);
        assert_close(&g, &wg, 1e-12);
        assert_close(&pr, &wp, 1e-12);
    }
    let p = RfaStep::new(2, 6, 5, 0);
    assert!(rfa_step(
        &rand_tensor(&[6, 8, 8], 0),
        &rand_tensor(&[5, 3, 3], 1),
        &rand_tensor(&[1, 3, 3], 2),
        &p
    )
    .is_err());
}

#[test]
fn closed_gate_reduces_to_own_features() {
    // Freshly built blocks have zero bias and identity batch norm.
    let p = RfaStep::new(1, 6, 5, 4);
    let fi = rand_tensor(&[6, 8, 8], 5);
    let gn = rand_tensor(&[5, 4, 4], 6).map(|v| 3.0 * v.abs());
    let (g, pr) = rfa_step(&fi, &gn, &Tensor::full(&[1, 4, 4], -1e3), &p).unwrap();
    let (wg, wp) = step_oracle(&p, &fi, &Tensor::zeros(&[5, 4, 4]), &Tensor::zeros(&[1, 4, 4]));
    assert!(g.max_abs_diff(&wg) <= 1e-6);
    assert!(pr.max_abs_diff(&wp) <= 1e-6);
}

#[test]
fn decode_returns_four_single_channel_maps_deterministically() {
    let ch = [4, 6, 6, 8];
    let p = RfaParams::new(ch, 5, 9);
    let x = pyramid(ch, 16, 11);
    let before = x.clone();
    let a = decode(&x, &p).unwrap();
    assert_eq!(x, before);
    for (i, l) in a.logits.iter().enumerate() {
        assert_eq!(l.shape(), &[1, 16 >> i, 16 >> i]);
        let probs = a.probabilities(i);
        assert!(probs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(decode(&x, &p).unwrap(), a);
    let short = FeaturePyramid {
        levels: x.levels[..3].to_vec(),
    };
    assert!(decode(&short, &p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rif_t_weights_are_distributions(n in 1usize..6, scale in 0.1f64..10.0, seed in any::<u64>()) {
        let p = rif_t_level(4, 3, seed % 1000);
        let fx = rand_tensor(&[4, 4, 4], seed ^ 1).map(|v| v * scale);
        let ft = rand_tensor(&[n, 3], seed ^ 2).map(|v| v * scale);
        let (out, w) = rif_t_with_weights(&fx, &ft, &p).unwrap();
        prop_assert_eq!(out.shape(), fx.shape());
        for row in w.data().chunks(n) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn rif_s_zero_alpha_is_reference_independent(seed in any::<u64>()) {
        let mut p = rif_s_level(4, 1, seed % 1000);
        p.alpha.set(0.0);
        let fx = rand_tensor(&[4, 4, 4], seed ^ 3);
        let a = rif_s(&fx, &rand_tensor(&[4, 4, 4], seed ^ 4), 2, &p).unwrap();
        let b = rif_s(&fx, &rand_tensor(&[4, 4, 4], seed ^ 5), 4, &p).unwrap();
        prop_assert_eq!(a, b);
    }
}
