//! Network assembly, training loop, checkpoints and the on-disk dataset.

mod common;

use std::collections::HashSet;
use std::path::Path;

use common::*;
use rfm_core::config::{DataConfig, ModelConfig, TrainConfig};
use rfm_core::dataset::Split;
use rfm_core::experiment;
use rfm_core::graph::Mode;
use rfm_core::model::{checkpoint, encode, train, References, RfmNet};
use rfm_core::nn::{conv_block, Params};
use rfm_core::rif::FusionKind;
use rfm_core::synthdata::{self, gen_dataset, MANIFEST_FILE};
use rfm_core::Tensor;

fn small(kind: FusionKind) -> ModelConfig {
    let mut c = ModelConfig {
        stem_channels: 4,
        channels: [8, 8, 8, 8],
        decoder_width: 8,
        text_dim: synthdata::TEXT_DIM,
        ..ModelConfig::default()
    };
    c.fusion.kind = kind;
    c.fusion.heads = 2;
    c
}

fn tiny_data() -> DataConfig {
    DataConfig {
        categories: 2,
        train_per_category: 2,
        test_per_category: 2,
        refs_per_category: 3,
        sentences: 3,
        ..DataConfig::default()
    }
}

fn dataset(dir: &Path) -> (Split, Split) {
    gen_dataset(dir, &tiny_data(), 64, 5).unwrap();
    (Split::load(dir, "train").unwrap(), Split::load(dir, "test").unwrap())
}

fn refs_for(kind: FusionKind, k: usize, seed: u64) -> References {
    match kind {
        FusionKind::None => References::None,
        FusionKind::Image => References::Images(
            (0..k)
                .map(|i| rand_range(&[3, 64, 64], 0.0, 1.0, seed + i as u64))
                .collect(),
        ),
        FusionKind::Text => References::Text(synthdata::gen_text_embedding(1, 4, seed).unwrap()),
    }
}

fn bit_equal(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.shape() == y.shape() && x.data() == y.data())
}

#[test]
fn encoder_levels_follow_the_shape_contract() {
    let cfg = ModelConfig::default();
    let net = RfmNet::new(&cfg, 1).unwrap();
    let img = rand_range(&[3, 64, 64], 0.0, 1.0, 2);
    let p = encode(&img, &net.encoder).unwrap();
    for (i, f) in p.levels.iter().enumerate() {
        assert_eq!(f.shape(), &[[16, 32, 64, 128][i], 16 >> i, 16 >> i]);
    }
    assert_eq!(encode(&img, &net.encoder).unwrap(), p);
    assert!(encode(&rand_tensor(&[3, 48, 48], 3), &net.encoder).is_err());
    assert!(encode(&rand_tensor(&[1, 64, 64], 3), &net.encoder).is_err());
}

#[test]
fn encoder_is_the_composition_of_its_blocks() {
    let mut enc = RfmNet::new(&small(FusionKind::None), 4).unwrap().encoder;
    perturb_block(&mut enc.stem, 40);
    for (i, s) in enc.stages.iter_mut().enumerate() {
        perturb_block(&mut s[0], 41 + 2 * i as u64);
        perturb_block(&mut s[1], 42 + 2 * i as u64);
    }
    let img = rand_range(&[3, 64, 64], 0.0, 1.0, 5);
    let got = encode(&img, &enc).unwrap();
    let mut blocks = enc.clone();
    let mut h = conv_block(&img, &mut blocks.stem, Mode::Eval).unwrap();
    let mut naive = naive_conv_block(&img, &enc.stem);
    assert_close(&h, &naive, 1e-10);
    for (i, [down, conv]) in blocks.stages.iter_mut().enumerate() {
        let (d0, c0) = (down.clone(), conv.clone());
        h = conv_block(&conv_block(&h, down, Mode::Eval).unwrap(), conv, Mode::Eval).unwrap();
        assert_close(&got.levels[i], &h, 1e-12);
        naive = naive_conv_block(&naive_conv_block(&naive, &d0), &c0);
        assert_close(&got.levels[i], &naive, 1e-9);
    }
}

#[test]
fn module_forward_agrees_with_graph_prediction() {
    for kind in [FusionKind::None, FusionKind::Image, FusionKind::Text] {
        let net = RfmNet::new(&small(kind), 6).unwrap();
        let img = rand_range(&[3, 64, 64], 0.0, 1.0, 7);
        let refs = refs_for(kind, 3, 8);
        let via_graph = net.predict(&img, &refs).unwrap();
        let bundle = net.reference_bundle(&refs).unwrap();
        let via_modules = net.forward(&img, bundle.as_ref()).unwrap();
        for (a, b) in via_graph.logits.iter().zip(&via_modules.logits) {
            assert_close(a, b, 1e-12);
        }
        let shapes: Vec<_> = via_graph.logits.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![1, 16, 16], vec![1, 8, 8], vec![1, 4, 4], vec![1, 2, 2]]
        );
    }
}

#[test]
fn empty_referring_mask_reproduces_the_baseline() {
    let base = RfmNet::new(&small(FusionKind::None), 9).unwrap();
    let img = rand_range(&[3, 64, 64], 0.0, 1.0, 10);
    let want = base.predict(&img, &References::None).unwrap().logits;
    for kind in [FusionKind::Image, FusionKind::Text] {
        let mut cfg = small(kind);
        cfg.fusion.layers.clear();
        let net = RfmNet::new(&cfg, 9).unwrap();
        let refs = refs_for(kind, 3, 11);
        assert!(bit_equal(&net.predict(&img, &refs).unwrap().logits, &want));
        let bundle = net.reference_bundle(&refs).unwrap();
        assert!(bit_equal(&net.forward(&img, bundle.as_ref()).unwrap().logits, &want));
    }
    // With fusion active the outputs move.
    let net = RfmNet::new(&small(FusionKind::Image), 9).unwrap();
    assert!(!bit_equal(
        &net.predict(&img, &refs_for(FusionKind::Image, 3, 11)).unwrap().logits,
        &want
    ));
}

#[test]
fn reference_count_is_a_configuration_choice() {
    let img = rand_range(&[3, 64, 64], 0.0, 1.0, 12);
    for k in 1..=3 {
        let mut cfg = small(FusionKind::Image);
        cfg.fusion.num_refs = k;
        let net = RfmNet::new(&cfg, 13).unwrap();
        let out = net.predict(&img, &refs_for(FusionKind::Image, k, 14)).unwrap();
        assert_eq!(out.logits[0].shape(), &[1, 16, 16]);
        assert!(net.predict(&img, &refs_for(FusionKind::Image, k + 1, 14)).is_err());
    }
    let net = RfmNet::new(&small(FusionKind::Image), 13).unwrap();
    assert!(net.predict(&img, &References::None).is_err());
}

#[test]
fn prediction_is_pure() {
    let net = RfmNet::new(&small(FusionKind::Image), 15).unwrap();
    let before = checkpoint::to_bytes(&net);
    let img = rand_range(&[3, 64, 64], 0.0, 1.0, 16);
    let refs = refs_for(FusionKind::Image, 3, 17);
    let a = net.predict(&img, &refs).unwrap();
    let b = net.predict(&img, &refs).unwrap();
    assert!(bit_equal(&a.logits, &b.logits));
    assert_eq!(checkpoint::to_bytes(&net), before);
}

#[test]
fn checkpoints_round_trip_and_reject_damage() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [FusionKind::None, FusionKind::Image, FusionKind::Text] {
        let net = RfmNet::new(&small(kind), 18).unwrap();
        let path = dir.path().join(format!("{}.ckpt", kind.as_str()));
        checkpoint::save(&path, &net).unwrap();
        let back = checkpoint::load(&path).unwrap();
        assert_eq!(back.cfg, net.cfg);
        assert_eq!(checkpoint::to_bytes(&back), std::fs::read(&path).unwrap());
        let mut n = 0;
        back.visit(&mut |_, _, _| n += 1);
        assert!(n > 20);
    }
    let bytes = checkpoint::to_bytes(&RfmNet::new(&small(FusionKind::None), 18).unwrap());
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(checkpoint::from_bytes(b"RFMX0000").is_err());
    assert!(checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn training_is_deterministic_and_finite() {
    let dir = tempfile::tempdir().unwrap();
    let (train_split, _) = dataset(dir.path());
    assert_eq!(train_split.samples.len(), 4);
    let cfg = TrainConfig {
        steps: 2,
        batch_size: 2,
        lr_init: 1e-3,
        ..TrainConfig::default()
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut net = RfmNet::new(&small(FusionKind::Image), 19).unwrap();
        let mut seen = 0;
        let log = train::train(&mut net, &train_split, &cfg, 19, |_| seen += 1).unwrap();
        assert_eq!((log.len(), seen), (2, 2));
        assert!(log.iter().all(|s| s.terms.total.is_finite() && s.terms.total > 0.0));
        let path = dir.path().join(format!("run{}.ckpt", runs.len()));
        checkpoint::save(&path, &net).unwrap();
        runs.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    let untrained = checkpoint::to_bytes(&RfmNet::new(&small(FusionKind::Image), 19).unwrap());
    assert_ne!(runs[0], untrained);

    let mut net = RfmNet::new(&small(FusionKind::None), 19).unwrap();
    assert!(train::train(&mut net, &train_split.truncated(0), &cfg, 1, |_| {}).is_err());
}

#[test]
fn a_two_image_set_can_be_memorized() {
    let dir = tempfile::tempdir().unwrap();
    let (train_split, _) = dataset(dir.path());
    let two = train_split.truncated(2);
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 2,
        lr_init: 3e-3,
        ..TrainConfig::default()
    };
    let mut net = RfmNet::new(&ModelConfig::default(), 20).unwrap();
    let log = train::train(&mut net, &two, &cfg, 20, |_| {}).unwrap();
    let (first, last) = (log[0].terms.total, log[199].terms.total);
    eprintln!(
        "overfit: initial {first:.4}, final {last:.4}, ratio {:.4}",
        last / first
    );
    assert!(last < 0.1 * first, "loss went from {first} to {last}");
}

fn file_digests(dir: &Path, split: &str) -> Vec<Vec<u8>> {
    let mut out: Vec<_> = std::fs::read_dir(dir.join(split).join("images"))
        .unwrap()
        .map(|e| std::fs::read(e.unwrap().path()).unwrap())
        .collect();
    out.sort();
    out
}

#[test]
fn generated_datasets_are_counted_disjoint_and_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = tiny_data();
    let entries = gen_dataset(&a, &cfg, 64, 21).unwrap();
    gen_dataset(&b, &cfg, 64, 21).unwrap();
    assert_eq!(
        std::fs::read(a.join(MANIFEST_FILE)).unwrap(),
        std::fs::read(b.join(MANIFEST_FILE)).unwrap()
    );
    for split in ["train", "test"] {
        for sub in ["images", "masks", "refs", "text"] {
            for e in std::fs::read_dir(a.join(split).join(sub)).unwrap() {
                let p = e.unwrap().path();
                let q = b.join(p.strip_prefix(&a).unwrap());
                assert_eq!(
                    std::fs::read(&p).unwrap(),
                    std::fs::read(&q).unwrap(),
                    "{}",
                    p.display()
                );
            }
        }
    }

    let (train_split, test) = (Split::load(&a, "train").unwrap(), Split::load(&a, "test").unwrap());
    assert_eq!(train_split.samples.len(), 4);
    assert_eq!(test.samples.len(), 4);
    assert!(train_split.refs.iter().chain(&test.refs).all(|r| r.len() == 3));
    assert!(train_split.text.iter().all(|t| t.shape() == [3, synthdata::TEXT_DIM]));
    // Every file on disk is listed, and nothing else.
    let listed: HashSet<_> = entries.iter().map(|e| e.path.clone()).collect();
    let mut on_disk = 0;
    for split in ["train", "test"] {
        for sub in ["images", "masks", "refs", "text"] {
            on_disk += std::fs::read_dir(a.join(split).join(sub)).unwrap().count();
        }
    }
    assert_eq!(listed.len(), on_disk);
    assert!(entries.iter().all(|e| a.join(&e.path).exists()));

    let train_imgs: HashSet<_> = file_digests(&a, "train").into_iter().collect();
    assert!(file_digests(&a, "test").iter().all(|d| !train_imgs.contains(d)));

    let other = tmp.path().join("c");
    gen_dataset(&other, &cfg, 64, 22).unwrap();
    assert_ne!(
        std::fs::read(a.join(MANIFEST_FILE)).unwrap(),
        std::fs::read(other.join(MANIFEST_FILE)).unwrap()
    );
    assert!(
        gen_dataset(&a, &cfg, 64, 21).is_err(),
        "non-empty target must be refused"
    );
}

#[test]
fn evaluating_a_checkpoint_matches_in_memory_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = dataset(dir.path());
    let net = RfmNet::new(&small(FusionKind::Text), 23).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    checkpoint::save(&ckpt, &net).unwrap();
    let mem = experiment::evaluate_split(&net, &test).unwrap();
    let disk = experiment::evaluate_dataset(&ckpt, dir.path(), "test").unwrap();
    assert_eq!(mem.to_kv(), disk.to_kv());
    assert_eq!(disk.n_images, 4);
    for v in [disk.s_alpha, disk.adaptive_e, disk.weighted_f, disk.mae] {
        assert!((0.0..=1.0).contains(&v));
    }
}
