use proptest::prelude::*;
use rclstr::ndiff::{Array, Tape};
use rclstr::permute::{
    boundary_mask, divide, permute_blocks, shuffle_groups, shuffle_with, unshuffle_features, DivisionStrategy,
    PermutationRecord,
};
use rclstr::textgen::ImageBatch;

fn batch(count: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> ImageBatch {
    let mut data = Vec::with_capacity(count * height * width);
    for i in 0..count {
        for y in 0..height {
            for x in 0..width {
                data.push(f(i, y, x));
            }
        }
    }
    ImageBatch {
        count,
        height,
        width,
        data,
    }
}

/// Every pixel tagged by (image, column), unique across the batch.
fn tagged(count: usize, height: usize, width: usize) -> ImageBatch {
    batch(count, height, width, |i, y, x| (i * 10_000 + y * 1000 + x) as f32)
}

/// Height-1 batch viewed as `[B, 1, W]` sequence features.
fn as_features(b: &ImageBatch) -> Array<f64> {
    Array::new(&[b.count, 1, b.width], b.data.iter().map(|&v| v as f64).collect()).unwrap()
}

#[test]
fn divide_examples() {
    let b = tagged(2, 3, 64);
    let one = divide(&b, 1, DivisionStrategy::Direct).unwrap();
    assert_eq!(one.patch(1, 0), b.image(1));

    let two = divide(&b, 2, DivisionStrategy::Direct).unwrap();
    assert_eq!(two.patch_width, 32);
    for y in 0..3 {
        assert_eq!(&two.patch(0, 0)[y * 32..(y + 1) * 32], &b.image(0)[y * 64..y * 64 + 32]);
        assert_eq!(&two.patch(0, 1)[y * 32..(y + 1) * 32], &b.image(0)[y * 64 + 32..(y + 1) * 64]);
    }
    assert!(divide(&b, 3, DivisionStrategy::Direct).is_err());
}

#[test]
fn vertical_projection_cuts_at_blank_column() {
    let b = batch(1, 4, 64, |_, _, x| if x == 30 { 0.0 } else { 0.9 });
    let d = divide(&b, 2, DivisionStrategy::VerticalProjection).unwrap();
    assert_eq!(d.cuts, vec![vec![30]]);
    // a blank column outside the ±W/(4N) window is ignored
    let far = batch(1, 4, 64, |_, _, x| if x == 10 { 0.0 } else { 0.9 });
    let d = divide(&far, 2, DivisionStrategy::VerticalProjection).unwrap();
    assert_eq!(d.cuts, vec![vec![32]]);
}

#[test]
fn shuffle_examples() {
    // A = [A1|A2], B = [B1|B2] with constant patches
    let b = batch(2, 2, 4, |i, _, x| (10 * (i + 1) + x / 2 + 1) as f32);
    let d = divide(&b, 2, DivisionStrategy::Direct).unwrap();
    let (out, record) = shuffle_with(&d, 2, vec![vec![2, 0, 3, 1]]).unwrap();
    let (a1, a2, b1, b2) = (11.0, 12.0, 21.0, 22.0);
    assert_eq!(out.image(0), &[b1, b1, a1, a1, b1, b1, a1, a1]);
    assert_eq!(out.image(1), &[b2, b2, a2, a2, b2, b2, a2, a2]);
    assert_eq!(record.groups, vec![vec![2, 0, 3, 1]]);

    let (same, _) = shuffle_with(&d, 2, vec![vec![0, 1, 2, 3]]).unwrap();
    assert_eq!(same, b);
    assert!(shuffle_with(&d, 2, vec![vec![0, 0, 1, 2]]).is_err());
    assert!(shuffle_groups(&divide(&tagged(3, 1, 8), 2, DivisionStrategy::Direct).unwrap(), 2, 0).is_err());
}

#[test]
fn unshuffle_examples() {
    let tape = Tape::new();
    let feats = tape.constant(as_features(&tagged(2, 1, 8)));
    let id = PermutationRecord::identity(2, 2, 1);
    assert_eq!(unshuffle_features(&feats, &id).unwrap().value(), feats.value());

    let record = PermutationRecord::new(2, 2, vec![vec![2, 0, 3, 1]]).unwrap();
    let moved = permute_blocks(&feats, &record).unwrap();
    assert_ne!(moved.value(), feats.value());
    assert_eq!(unshuffle_features(&moved, &record).unwrap().value(), feats.value());
}

#[test]
fn drop_boundary_mask() {
    let mask = boundary_mask(DivisionStrategy::DropBoundary, 2, 16);
    let dropped: Vec<usize> = (0..16).filter(|&t| !mask[t]).collect();
    assert_eq!(dropped, vec![7, 8]);
    assert!(boundary_mask(DivisionStrategy::Direct, 2, 16).iter().all(|&k| k));
    let four = boundary_mask(DivisionStrategy::DropBoundary, 4, 16);
    assert_eq!((0..16).filter(|&t| !four[t]).collect::<Vec<_>>(), vec![3, 4, 7, 8, 11, 12]);
}

fn sorted_patches(d: &rclstr::permute::Division, count: usize) -> Vec<Vec<u32>> {
    let mut v: Vec<Vec<u32>> = (0..count)
        .flat_map(|i| (0..d.n).map(move |k| (i, k)))
        .map(|(i, k)| d.patch(i, k).iter().map(|p| p.to_bits()).collect())
        .collect();
    v.sort();
    v
}

proptest! {
    #[test]
    fn shuffle_then_unshuffle_is_identity(
        n in prop::sample::select(vec![1usize, 2, 4]),
        m in prop::sample::select(vec![1usize, 2, 4]),
        groups in 1usize..3,
        seed in any::<u64>(),
    ) {
        let count = m * groups;
        let images = tagged(count, 1, 16);
        let d = divide(&images, n, DivisionStrategy::Direct).unwrap();
        let (shuffled, record) = shuffle_groups(&d, m, seed).unwrap();
        let back = divide(&shuffled, n, DivisionStrategy::Direct).unwrap();
        prop_assert_eq!(sorted_patches(&d, count), sorted_patches(&back, count));

        let tape = Tape::new();
        let restored = unshuffle_features(&tape.constant(as_features(&shuffled)), &record).unwrap();
        prop_assert_eq!(restored.value(), as_features(&images));
    }

    #[test]
    fn record_groups_are_bijections(n in 1usize..5, m in 1usize..5, seed in any::<u64>()) {
        let d = divide(&tagged(m, 1, 4 * n), n, DivisionStrategy::Direct).unwrap();
        let (_, record) = shuffle_groups(&d, m, seed).unwrap();
        for pi in &record.groups {
            let mut s = pi.clone();
            s.sort_unstable();
            prop_assert_eq!(s, (0..n * m).collect::<Vec<_>>());
        }
    }
}
