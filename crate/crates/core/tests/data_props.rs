use dpdm_core::data::{
    augment, augment_with, generate_toy, load_idx, normalize_byte, read_idx_images, write_idx,
    ToyDomainSpec,
};
use dpdm_core::rng::{stream, Stream};
use dpdm_core::{AugmentationPolicy, Domain, LabeledImageSet, Split, Tensor};
use proptest::prelude::*;

fn byte_set(bytes: &[u8], labels: Vec<usize>, shape: [usize; 3], classes: usize) -> LabeledImageSet {
    let n = labels.len();
    let images = Tensor::new(
        vec![n, shape[0], shape[1], shape[2]],
        bytes.iter().map(|&b| normalize_byte(b)).collect(),
    )
    .unwrap();
    LabeledImageSet::new(images, labels, classes, Domain::Finetune, Split::Train).unwrap()
}

fn arb_set() -> impl Strategy<Value = LabeledImageSet> {
    (0usize..6, 1usize..7, 1usize..7, prop_oneof![Just(1usize), Just(3)]).prop_flat_map(|(n, h, w, c)| {
        (
            proptest::collection::vec(any::<u8>(), n * h * w * c),
            proptest::collection::vec(0usize..10, n),
        )
            .prop_map(move |(bytes, labels)| byte_set(&bytes, labels, [h, w, c], 10))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn idx_round_trip_is_exact(set in arb_set()) {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
        write_idx(&set, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        prop_assert_eq!(back.images.shape(), set.images.shape());
        prop_assert_eq!(back.images.data(), set.images.data());
        prop_assert_eq!(&back.labels, &set.labels);
    }

    #[test]
    fn augmentation_keeps_shape_and_range(
        seed in 0u64..10_000,
        flip in any::<bool>(),
        shift in 0usize..4,
        toy_seed in 0u64..50,
    ) {
        let img = generate_toy(&ToyDomainSpec::pretrain(toy_seed).with_size(8, 8, 3), 1).unwrap().image(0);
        let policy = AugmentationPolicy { flip, max_shift: shift, resample_timesteps: false };
        let out = augment(&img, &policy, &mut stream(seed, Stream::Augmentation));
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn shifts_undo_on_interior_support(dy in -2isize..=2, dx in -2isize..=2) {
        // Non-zero pixels only in the central 4x4 of an 8x8 image.
        let img = Tensor::from_fn(&[8, 8, 1], |i| {
            let (y, x) = (i / 8, i % 8);
            if (2..6).contains(&y) && (2..6).contains(&x) { (i as f32 / 64.0) - 0.5 } else { 0.0 }
        });
        let back = augment_with(&augment_with(&img, false, dy, dx), false, -dy, -dx);
        prop_assert_eq!(back.data(), img.data());
        let flipped_twice = augment_with(&augment_with(&img, true, 0, 0), true, 0, 0);
        prop_assert_eq!(flipped_twice.data(), img.data());
    }
}

#[test]
fn empty_set_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let set = byte_set(&[], vec![], [5, 4, 1], 3);
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&set, &ip, &lp).unwrap();
    assert_eq!(std::fs::read(&ip).unwrap().len(), 16);
    assert_eq!(std::fs::read(&lp).unwrap().len(), 8);
    let back = load_idx(&ip, &lp).unwrap();
    assert_eq!(back.len(), 0);
    assert_eq!(back.image_shape(), [5, 4, 1]);
}

#[test]
fn header_layout_is_big_endian() {
    let dir = tempfile::tempdir().unwrap();
    let set = byte_set(&[0, 127, 255, 1, 2, 3], vec![2, 0], [1, 3, 1], 3);
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&set, &ip, &lp).unwrap();
    let img = std::fs::read(&ip).unwrap();
    assert_eq!(&img[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 3]);
    assert_eq!(&img[16..], &[0, 127, 255, 1, 2, 3]);
    assert_eq!(std::fs::read(&lp).unwrap(), vec![0, 0, 8, 1, 0, 0, 0, 2, 2, 0]);
    let parsed = read_idx_images(&img).unwrap();
    assert_eq!(parsed.data()[2], 1.0);
    assert_eq!(parsed.data()[0], -1.0);
}

#[test]
fn truncated_and_mismatched_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let set = byte_set(&[9; 8], vec![0, 1], [2, 2, 1], 2);
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&set, &ip, &lp).unwrap();
    let mut bytes = std::fs::read(&ip).unwrap();
    bytes.pop();
    assert!(read_idx_images(&bytes).is_err());
    assert!(read_idx_images(&bytes[..10]).is_err());
    let one = byte_set(&[9; 4], vec![0], [2, 2, 1], 2);
    let lp1 = dir.path().join("l1");
    write_idx(&one, dir.path().join("i1"), &lp1).unwrap();
    assert!(load_idx(&ip, &lp1).is_err());
}

#[test]
fn toy_domains_are_pure_balanced_and_shifted() {
    let pre = ToyDomainSpec::pretrain(7);
    let a = generate_toy(&pre, 4000).unwrap();
    assert_eq!(a, generate_toy(&pre, 4000).unwrap());
    assert_eq!(a.class_histogram(), vec![1000; 4]);
    let fine = generate_toy(&ToyDomainSpec::finetune(7), 4000).unwrap();
    assert!((a.mean_pixel() - fine.mean_pixel()).abs() > 0.5);
    assert_ne!(a, generate_toy(&ToyDomainSpec::pretrain(8), 4000).unwrap());
}
