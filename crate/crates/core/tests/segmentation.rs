//! Superpixel invariants, scoring against brute force, mask algebra and the
//! composed segmentation on toy images.

mod common;

use common::{brute_force_scores, components_per_label, corpus, noise_image, toy_state};
use dhr::embedding::CoarseConfig;
use dhr::metrics::PyramidOracle;
use dhr::scenario::patched_target;
use dhr::segmentation::*;
use dhr::tensor::{DomainMask, Image};
use proptest::prelude::*;

fn check_partition(part: &SuperpixelPartition) {
    assert_eq!(part.labels().len(), part.height() * part.width());
    assert!(part.labels().iter().all(|&l| (l as usize) < part.count()));
    assert!(part.sizes().iter().all(|&s| s > 0));
    assert!(components_per_label(part).iter().all(|&c| c == 1));
}

#[test]
fn slic_invariants_hold_on_the_corpus() {
    let state = toy_state();
    for img in corpus(&state, 6) {
        for k in [1, 4, 25, 100] {
            let cfg = SlicConfig {
                k_target: k,
                ..SlicConfig::default()
            };
            check_partition(&slic_superpixels(&img, &cfg).unwrap());
        }
    }
}

#[test]
fn identical_images_give_a_zero_loss_map() {
    let img = noise_image(32, 32, 1);
    let m = loss_map(&img, &img, &PyramidOracle::default()).unwrap();
    assert!(m.is_normalized());
    assert!(m.values().iter().all(|&v| v == 0.0));
}

#[test]
fn loss_map_peaks_in_the_changed_quadrant() {
    let a = Image::filled(32, 32, 0.0);
    let mut b = a.clone();
    for c in 0..3 {
        for y in 16..32 {
            for x in 16..32 {
                b.set(c, y, x, 0.8);
            }
        }
    }
    let m = loss_map(&a, &b, &PyramidOracle::new(vec![1, 2])).unwrap();
    let (lo, hi) = (
        m.values().iter().cloned().fold(1.0, f64::min),
        m.values().iter().cloned().fold(0.0, f64::max),
    );
    assert_eq!((lo, hi), (0.0, 1.0));
    let argmax = m.values().iter().position(|&v| v == 1.0).unwrap();
    assert!(argmax / 32 >= 16 && argmax % 32 >= 16);
    assert!(m.at(2, 2) < 1e-6);
}

#[test]
fn fuse_examples() {
    let set = CategorySet::default();
    let (bg, skin) = (set.label_of("background").unwrap(), set.label_of("skin").unwrap());
    let parsing = ParsingMask::new(2, 2, vec![skin, bg, skin, skin], set.clone()).unwrap();
    let m_s = DomainMask::new(2, 2, vec![1, 1, 0, 1]).unwrap();
    assert_eq!(fuse(&m_s, &parsing).unwrap().data(), &[1, 0, 0, 1]);
    let all_in = ParsingMask::uniform(2, 2, skin, set).unwrap();
    assert_eq!(fuse(&m_s, &all_in).unwrap(), m_s);
    assert_eq!(fuse(&DomainMask::ones(2, 2), &parsing).unwrap(), parsing.domain_mask());
}

#[test]
fn segmentation_is_deterministic_and_replayable() {
    let state = toy_state();
    let t = patched_target(&state, 2, 0.2).unwrap();
    let cfg = SegmentConfig::default();
    let parser = UniformParser::skin(CategorySet::default());
    let (co, mo) = (PyramidOracle::default(), PyramidOracle::robust());
    let a = segment(&t.target, &state, &cfg, &co, &mo, &parser).unwrap();
    let b = segment(&t.target, &state, &cfg, &co, &mo, &parser).unwrap();
    assert_eq!(a.mask, b.mask);
    let (m_s, scores, m) = domain_mask(&a.loss_map, &a.partition, &a.parsing).unwrap();
    assert_eq!(
        (m_s, scores, m),
        (a.superpixel_mask.clone(), a.scores.clone(), a.mask.clone())
    );
    assert!(a.scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
    let reuse = segment_with_coarse(&t.target, a.coarse.clone(), &cfg.slic, &mo, &parser).unwrap();
    assert_eq!(reuse.mask, a.mask);
}

#[test]
fn clean_samples_are_mostly_in_domain() {
    let state = toy_state();
    let cfg = SegmentConfig {
        coarse: CoarseConfig::default(),
        ..SegmentConfig::default()
    };
    let parser = UniformParser::skin(CategorySet::default());
    let t = patched_target(&state, 1, 0.2).unwrap();
    let s = segment(
        &t.clean,
        &state,
        &cfg,
        &PyramidOracle::default(),
        &PyramidOracle::robust(),
        &parser,
    )
    .unwrap();
    assert!(s.mask.count_out() as f64 / 1024.0 <= 0.05);
}

fn random_partition(h: usize, w: usize, k: usize, seed: u64) -> SuperpixelPartition {
    let cfg = SlicConfig {
        k_target: k,
        ..SlicConfig::default()
    };
    slic_superpixels(&noise_image(h, w, seed), &cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn slic_covers_and_connects_random_images(seed in 0u64..1000, k in 1usize..60, side in 6usize..24) {
        check_partition(&random_partition(side, side, k.min(side * side), seed));
    }

    #[test]
    fn scores_match_brute_force(seed in 0u64..1000, k in 1usize..40, values in prop::collection::vec(0.0f64..5.0, 256)) {
        let part = random_partition(16, 16, k, seed);
        let lmap = LossMap::new(16, 16, values).unwrap().normalized();
        let fast = partition_scores(&lmap, &part).unwrap();
        let slow = brute_force_scores(&lmap, &part);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-6);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn fuse_is_monotone(
        ms in prop::collection::vec(0u8..2, 16),
        labels in prop::collection::vec(0u8..11, 16),
        flip in 0usize..16,
    ) {
        let set = CategorySet::default();
        let labels: Vec<u8> = labels.into_iter().map(|l| l % set.len() as u8).collect();
        let parsing = ParsingMask::new(4, 4, labels, set).unwrap();
        let m_s = DomainMask::new(4, 4, ms.clone()).unwrap();
        let base = fuse(&m_s, &parsing).unwrap();
        let mut lowered = ms;
        lowered[flip] = 0;
        let lower = fuse(&DomainMask::new(4, 4, lowered).unwrap(), &parsing).unwrap();
        for (a, b) in base.data().iter().zip(lower.data()) {
            prop_assert!(b <= a);
        }
    }

    #[test]
    fn binarize_follows_the_ge_rule(scores in prop::collection::vec(0.0f64..1.0, 6)) {
        let set = CategorySet::default();
        let skin = set.label_of("skin").unwrap();
        let part = SuperpixelPartition::new(1, 6, (0..6).collect()).unwrap();
        let parsing = ParsingMask::uniform(1, 6, skin, set.clone()).unwrap();
        let tau = set.get(skin).unwrap().tau;
        let m = binarize(&scores, &part, &parsing).unwrap();
        for (i, &s) in scores.iter().enumerate() {
            prop_assert_eq!(m.data()[i] == 0, s >= tau);
        }
    }
}
