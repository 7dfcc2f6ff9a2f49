use std::time::Instant;

use dragflow::conditions::{
    build_pyramid, drop_conditions, encode_image_condition, encode_trajectory_condition, pad_tokens, pad_trajectory, ConditionSet, ConvEncoder, DropRatios,
    TextEncoder, Vocabulary, PAD,
};
use dragflow::sprites::caption_vocabulary;
use dragflow::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sample_set(frames: usize, h: usize, w: usize, r: &mut ChaCha8Rng) -> ConditionSet {
    ConditionSet::new(vec![3, 1, 4], Tensor::randn(&[3, h, w], 1.0, r), Tensor::randn(&[frames - 1, 2, h, w], 1.0, r)).unwrap()
}

#[test]
fn each_control_drops_at_its_ratio() {
    let start = Instant::now();
    let mut r = rng(1);
    let base = sample_set(4, 4, 4, &mut r);
    let n = 10_000;
    let (mut t, mut i, mut g, mut all) = (0, 0, 0, 0);
    for _ in 0..n {
        let d = drop_conditions(&base, DropRatios::default(), &mut r).unwrap();
        t += d.dropped.text as usize;
        i += d.dropped.image as usize;
        g += d.dropped.trajectory as usize;
        all += (d.dropped.text && d.dropped.image) as usize;
    }
    for (name, c) in [("text", t), ("image", i), ("trajectory", g)] {
        let rate = c as f64 / n as f64;
        println!("{name} drop rate {rate:.4}");
        assert!((rate - 0.1).abs() <= 0.01, "{name} drop rate {rate}");
    }
    // Independent draws: joint rate near 0.01.
    assert!((all as f64 / n as f64 - 0.01).abs() < 0.005);
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn ratio_one_gives_the_exact_null_set() {
    let mut r = rng(2);
    let base = sample_set(5, 6, 8, &mut r);
    let d = drop_conditions(&base, DropRatios::ALL, &mut r).unwrap();
    assert_eq!(d, ConditionSet::null(5, 6, 8));
    let keep = drop_conditions(&base, DropRatios::NONE, &mut r).unwrap();
    assert_eq!(keep, base);
    assert!(drop_conditions(&base, DropRatios::uniform(1.5), &mut r).is_err());
}

#[test]
fn dropping_consumes_three_draws_whatever_the_ratio() {
    let base = sample_set(3, 2, 2, &mut rng(0));
    let mut a = rng(7);
    let mut b = rng(7);
    drop_conditions(&base, DropRatios::ALL, &mut a).unwrap();
    drop_conditions(&base, DropRatios::NONE, &mut b).unwrap();
    use rand::Rng;
    assert_eq!(a.random::<u64>(), b.random::<u64>());
}

#[test]
fn shape_errors_are_reported() {
    assert!(ConditionSet::new(vec![], Tensor::zeros(&[1, 4, 4]), Tensor::zeros(&[2, 2, 4, 4])).is_err());
    assert!(ConditionSet::new(vec![], Tensor::zeros(&[3, 4, 4]), Tensor::zeros(&[2, 2, 4, 5])).is_err());
    let c = ConditionSet::new(vec![], Tensor::zeros(&[3, 4, 6]), Tensor::zeros(&[2, 2, 4, 6])).unwrap();
    assert_eq!((c.frames(), c.height(), c.width()), (3, 4, 6));
    assert_eq!(c.mask, vec![1.0, 0.0, 0.0]);
}

fn block_mean(t: &Tensor, f: usize) -> Tensor {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2] / f, s[3] / f);
    Tensor::from_fn(&[n, c, h, w], |i| {
        let (x, y, nc) = (i % w, (i / w) % h, i / (w * h));
        let mut acc = 0.0;
        for dy in 0..f {
            for dx in 0..f {
                acc += t.data()[(nc * s[2] + y * f + dy) * s[3] + x * f + dx];
            }
        }
        acc / (f * f) as f64
    })
}

#[test]
fn pyramid_levels_are_block_means() {
    let mut r = rng(3);
    let s = Tensor::randn(&[4, 3, 16, 8], 1.0, &mut r);
    let g = Tensor::randn(&[4, 2, 16, 8], 1.0, &mut r);
    let m = vec![1.0, 0.0, 0.0, 0.0];
    let p = build_pyramid(&s, &g, &m, 3).unwrap();
    assert_eq!(p.levels.len(), 3);
    for (l, level) in p.levels.iter().enumerate() {
        let f = 1 << l;
        assert!(level.s.max_abs_diff(&block_mean(&s, f)) <= 1e-12);
        assert!(level.g.max_abs_diff(&block_mean(&g, f)) <= 1e-12);
        assert_eq!(level.m, m);
        assert!((level.s.mean() - s.mean()).abs() <= 1e-12);
    }
    assert!(build_pyramid(&s, &g, &m, 5).is_err());
    assert!(build_pyramid(&s, &g, &m[..3], 2).is_err());
}

#[test]
fn vocabulary_tokenizes_and_pads() {
    let v = caption_vocabulary();
    assert_eq!(v.words()[PAD], "<pad>");
    let ids = v.tokenize("Red circle moves LEFT").unwrap();
    assert_eq!(v.decode(&ids), "red circle moves left");
    assert!(v.tokenize("red blimp").is_err());
    let (ids, unknown) = v.tokenize_lossy("red blimp moves");
    assert_eq!(ids[1], PAD);
    assert_eq!(unknown, vec!["blimp".to_string()]);
    assert_eq!(pad_tokens(&[5, 6], 4), vec![5, 6, PAD, PAD]);
    assert_eq!(pad_tokens(&[5, 6, 7], 2), vec![5, 6]);
    let back = Vocabulary::from_text(&v.to_text()).unwrap();
    assert_eq!(back, v);
    assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
}

#[test]
fn repeated_first_frame_encoding_matches_per_frame_encoding() {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let enc = ConvEncoder::new(&mut store, "img", 3, 5, 0, &mut r).unwrap();
    let img = Tensor::randn(&[3, 8, 8], 1.0, &mut r);
    let all = encode_image_condition(&img, 4, &enc, &store).unwrap();
    assert_eq!(all.shape(), &[4, 5, 8, 8]);
    let one = encode_image_condition(&img, 1, &enc, &store).unwrap();
    for l in 0..4 {
        assert_eq!(all.index_axis0(l).unwrap(), one.index_axis0(0).unwrap());
    }
}

#[test]
fn trajectory_encoding_sees_a_zero_first_frame() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let enc = ConvEncoder::new(&mut store, "traj", 2, 4, 1, &mut r).unwrap();
    let map = Tensor::randn(&[3, 2, 8, 8], 1.0, &mut r);
    let padded = pad_trajectory(&map).unwrap();
    assert_eq!(padded.shape(), &[4, 2, 8, 8]);
    assert!(padded.index_axis0(0).unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(padded.index_axis0(2).unwrap(), map.index_axis0(1).unwrap());
    let e = encode_trajectory_condition(&map, &enc, &store).unwrap();
    assert_eq!(e.shape(), &[4, 4, 4, 4]);
    let zero = encode_trajectory_condition(&Tensor::zeros(&[1, 2, 8, 8]), &enc, &store).unwrap();
    assert_eq!(e.index_axis0(0).unwrap(), zero.index_axis0(0).unwrap());
}

#[test]
fn text_positions_distinguish_repeated_words() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let with = TextEncoder::new(&mut store, "a", 10, 6, 8, true, &mut r).unwrap();
    let without = TextEncoder::new(&mut store, "b", 10, 6, 8, false, &mut r).unwrap();
    let a = with.encode_text(&store, &[4, 4]).unwrap();
    let b = without.encode_text(&store, &[4, 4]).unwrap();
    assert_eq!(a.shape(), &[6, 8]);
    assert_eq!(b.index_axis0(0).unwrap(), b.index_axis0(1).unwrap());
    assert!(a.index_axis0(0).unwrap().max_abs_diff(&a.index_axis0(1).unwrap()) > 1e-3);
    let mut tape = Tape::inference();
    let out = with.forward(&mut tape, &store, &[vec![1, 2], vec![]]).unwrap();
    assert_eq!(tape.shape(out), &[2, 6, 8]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pooling_conserves_the_mean(seed in any::<u64>(), depth in 1usize..4) {
        let mut r = rng(seed);
        let s = Tensor::randn(&[2, 2, 8, 16], 1.0, &mut r);
        let g = Tensor::randn(&[2, 1, 8, 16], 1.0, &mut r);
        let p = build_pyramid(&s, &g, &[1.0, 0.0], depth).unwrap();
        for level in &p.levels {
            prop_assert!((level.s.mean() - s.mean()).abs() <= 1e-12);
            prop_assert!((level.g.mean() - g.mean()).abs() <= 1e-12);
        }
    }

    #[test]
    fn dropped_controls_hold_null_values(seed in any::<u64>(), ratio in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let base = sample_set(3, 4, 4, &mut r);
        let d = drop_conditions(&base, DropRatios::uniform(ratio), &mut r).unwrap();
        if d.dropped.text { prop_assert!(d.tokens.is_empty()); } else { prop_assert_eq!(&d.tokens, &base.tokens); }
        if d.dropped.image { prop_assert!(d.image.data().iter().all(|&v| v == 0.0)); } else { prop_assert_eq!(&d.image, &base.image); }
        if d.dropped.trajectory { prop_assert!(d.trajectory.data().iter().all(|&v| v == 0.0)); } else { prop_assert_eq!(&d.trajectory, &base.trajectory); }
    }
}
