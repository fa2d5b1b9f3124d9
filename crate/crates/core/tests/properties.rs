use std::sync::Arc;

use ageaudit::audit::{delta_binary, delta_general};
use ageaudit::avg::{average_color, average_image, range_image, sample_averaging_sets};
use ageaudit::dataset::{ImageSource, Item, LabeledDataset, SplitFractions};
use ageaudit::filters::{median_filter, project_constrained_slice, residual_transform};
use ageaudit::io::{load_image, read_float_raster, save_png, write_float_raster};
use ageaudit::learn::checkpoint::{decode_checkpoint, encode_checkpoint};
use ageaudit::learn::{
    fuse_predictions, FrontEnd, FusionRule, TinyNetArch, TrainConfig, TrainState,
};
use ageaudit::{Image, Rng};
use proptest::prelude::*;

fn image(min_side: usize, max_side: usize, channels: usize) -> impl Strategy<Value = Image> {
    (min_side..=max_side, min_side..=max_side).prop_flat_map(move |(h, w)| {
        prop::collection::vec(-300.0f64..300.0, h * w * channels)
            .prop_map(move |d| Image::new(h, w, channels, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn avgi_round_trips_f32_values(data in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 5 * 7 * 3)) {
        let img = Image::new(5, 7, 3, data.iter().map(|&v| v as f64).collect()).unwrap();
        let mut buf = Vec::new();
        write_float_raster(&img, &mut buf).unwrap();
        prop_assert_eq!(buf.len(), 16 + 4 * 5 * 7 * 3);
        prop_assert_eq!(read_float_raster(&buf[..]).unwrap(), img);
    }

    #[test]
    fn png_round_trips_integer_pixels(data in prop::collection::vec(0u8..=255, 4 * 6 * 3), gray in any::<bool>()) {
        let c = if gray { 1 } else { 3 };
        let img = Image::new(4, 6 * 3 / c, c, data.iter().map(|&v| v as f64).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_png(&img, &p).unwrap();
        prop_assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn projection_satisfies_and_preserves_the_constraint(
        w in prop::collection::vec(0.01f64..5.0, 25),
        size in prop::sample::select(vec![3usize, 5]),
    ) {
        let mut s = w[..size * size].to_vec();
        prop_assert!(project_constrained_slice(&mut s, size));
        let centre = size * size / 2;
        prop_assert_eq!(s[centre], -1.0);
        let off: f64 = s.iter().enumerate().filter(|&(i, _)| i != centre).map(|(_, v)| v).sum();
        prop_assert!((off - 1.0).abs() <= 1e-12);
        let again = {
            let mut t = s.clone();
            project_constrained_slice(&mut t, size);
            t
        };
        prop_assert_eq!(again, s);
    }

    #[test]
    fn median_stays_within_window_range(img in image(5, 12, 2), k in prop::sample::select(vec![3usize, 5])) {
        let m = median_filter(&img, k).unwrap();
        prop_assert_eq!(m.shape(), img.shape());
        prop_assert!(m.min() >= img.min() && m.max() <= img.max());
        let shifted = img.map(|v| v + 10.0).unwrap();
        let ms = median_filter(&shifted, k).unwrap();
        for (a, b) in m.data().iter().zip(ms.data()) {
            prop_assert!((a + 10.0 - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn median_rejects_bad_windows(img in image(1, 4, 1), k in prop::sample::select(vec![1usize, 2, 5, 6])) {
        prop_assert!(median_filter(&img, k).is_err());
    }

    #[test]
    fn residual_of_constant_is_zero(v in -500.0f64..500.0, h in 3usize..10, w in 3usize..10) {
        let r = residual_transform(&Image::filled(h, w, 3, v)).unwrap();
        prop_assert!(r.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn average_variants_behave(base in image(1, 8, 3), shift in -100.0f64..100.0) {
        let avg = average_image(std::slice::from_ref(&base)).unwrap();
        prop_assert_eq!(&avg, &base);
        let c = average_color(&avg);
        let cc = average_color(&c);
        for (a, b) in c.data().iter().zip(cc.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let r = range_image(&avg);
        prop_assert_eq!(r.min(), 0.0);
        let rs = range_image(&avg.map(|v| v + shift).unwrap());
        for (a, b) in r.data().iter().zip(rs.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn delta_never_exceeds_delta_gen(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..10),
    ) {
        let (s, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let d = delta_binary(&s, &a, 2).unwrap();
        let g = delta_general(&s, &a).unwrap();
        prop_assert!(d <= g + 1e-12);
        if a.iter().all(|&x| x >= 0.5) {
            prop_assert!((d - g).abs() <= 1e-12);
        }
    }

    #[test]
    fn split_allocation_is_complete(n in 3usize..500, t in 0.1f64..0.9) {
        let rest = 1.0 - t;
        let f = SplitFractions { train: t, validation: rest / 2.0, test: rest / 2.0 };
        let c = f.allocate(n).unwrap();
        prop_assert_eq!(c.iter().sum::<usize>(), n);
        prop_assert!(c.iter().all(|&x| x >= 1));
    }

    #[test]
    fn averaging_sets_are_balanced(sizes in prop::collection::vec(2usize..30, 2..4), frac in 0.1f64..=1.0, seed in any::<u64>()) {
        let mut items = Vec::new();
        for (k, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                items.push(Item::new(ImageSource::Memory(Arc::new(Image::zeros(1, 1, 1))), k));
            }
        }
        let ds = LabeledDataset::new(items, sizes.len()).unwrap();
        let smallest = *sizes.iter().min().unwrap();
        let want = (frac * smallest as f64 + 1e-9).floor() as usize;
        match sample_averaging_sets(&ds, 3, frac, &Rng::new(seed)) {
            Ok(sets) => {
                prop_assert_eq!(sets.len(), 3 * sizes.len());
                for s in &sets {
                    prop_assert_eq!(s.member_ids.len(), want);
                    prop_assert!(s.member_ids.windows(2).all(|w| w[0] < w[1]));
                    prop_assert!(s.member_ids.iter().all(|&i| ds.label(i) == s.class_label));
                }
            }
            Err(_) => prop_assert_eq!(want, 0),
        }
    }

    #[test]
    fn fusion_ignores_member_order(
        scores in prop::collection::vec(prop::collection::vec((0u8..8).prop_map(|v| v as f64 / 8.0), 3), 1..6),
        rot in 0usize..6,
    ) {
        // Dyadic scores keep the sums exact, so only the order could matter.
        let mut rotated = scores.clone();
        let len = rotated.len();
        rotated.rotate_left(rot % len);
        for rule in [FusionRule::ScoreSum, FusionRule::Majority] {
            prop_assert_eq!(fuse_predictions(&scores, rule).unwrap(), fuse_predictions(&rotated, rule).unwrap());
        }
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), kernels in 1usize..4) {
        let arch = TinyNetArch::new(1, 2, FrontEnd::Constrained { kernels, size: 3 });
        let state = TrainState::new(arch, TrainConfig { seed, ..Default::default() }).unwrap();
        let bytes = encode_checkpoint(&state).unwrap();
        prop_assert_eq!(decode_checkpoint(&bytes).unwrap(), state);
    }

    #[test]
    fn derived_streams_depend_only_on_seed_tag_index(seed in any::<u64>(), idx in any::<u64>()) {
        let mut a = Rng::new(seed);
        let _ = a.uniform();
        let x = a.derive("t", idx).uniform();
        let y = Rng::new(seed).derive("t", idx).uniform();
        prop_assert_eq!(x, y);
    }
}
