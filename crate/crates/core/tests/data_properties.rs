use domain_fusion::data::{
    balance_subsample, load_dfds, merge_domains, resize_image, save_dfds, synth_domain, DomainKind, LabeledImageSet,
    SynthDomainSpec,
};
use proptest::prelude::*;

fn set_with(c: usize, h: usize, w: usize) -> impl Strategy<Value = LabeledImageSet> {
    (1usize..5, 1usize..12).prop_flat_map(move |(k, n)| {
        (
            prop::collection::vec(0..k as u16, n),
            prop::collection::vec(any::<u8>(), n * c * h * w),
        )
            .prop_map(move |(labels, pixels)| LabeledImageSet::new("random", c, h, w, k, labels, pixels).unwrap())
    })
}

fn image_set() -> impl Strategy<Value = LabeledImageSet> {
    (prop_oneof![Just(1usize), Just(3)], 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| set_with(c, h, w))
}

fn kind() -> impl Strategy<Value = DomainKind> {
    prop_oneof![Just(DomainKind::SolidShapes), Just(DomainKind::OutlineShapes), Just(DomainKind::StripedNoise)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dfds_round_trip(set in image_set()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.dfds");
        save_dfds(&set, &path).unwrap();
        let back = load_dfds(&path).unwrap();
        prop_assert_eq!(back.pixels(), set.pixels());
        prop_assert_eq!(back.labels(), set.labels());
        prop_assert_eq!(
            (back.channels(), back.height(), back.width(), back.num_classes()),
            (set.channels(), set.height(), set.width(), set.num_classes())
        );
        prop_assert_eq!(LabeledImageSet::decode(&set.encode().unwrap(), set.name()).unwrap(), set);
    }

    #[test]
    fn synth_counts_are_exact(kind in kind(), side in 8usize..20, n in 1usize..6, seed in any::<u64>()) {
        let set = synth_domain(&SynthDomainSpec::new(kind, side), n, seed).unwrap();
        prop_assert_eq!(set.len(), n * set.num_classes());
        prop_assert!(set.class_histogram().iter().all(|&c| c == n));
        prop_assert_eq!(set.pixels().len(), set.len() * set.image_len());
    }

    #[test]
    fn resize_never_overshoots(
        (c, h, w, px) in (1usize..3, 1usize..9, 1usize..9)
            .prop_flat_map(|(c, h, w)| (Just(c), Just(h), Just(w), prop::collection::vec(any::<u8>(), c * h * w))),
        nh in 1usize..17,
        nw in 1usize..17,
    ) {
        prop_assert_eq!(resize_image(&px, c, h, w, h, w), px.clone());
        let out = resize_image(&px, c, h, w, nh, nw);
        prop_assert_eq!(out.len(), c * nh * nw);
        let centre = |i: usize, from: usize, to: usize| ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        for ch in 0..c {
            let plane = &px[ch * h * w..(ch + 1) * h * w];
            for y in 0..nh {
                for x in 0..nw {
                    let (sy, sx) = (centre(y, h, nh), centre(x, w, nw));
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let taps = [
                        plane[y0 * w + x0],
                        plane[y0 * w + (x0 + 1).min(w - 1)],
                        plane[(y0 + 1).min(h - 1) * w + x0],
                        plane[(y0 + 1).min(h - 1) * w + (x0 + 1).min(w - 1)],
                    ];
                    let v = out[(ch * nh + y) * nw + x];
                    prop_assert!(v >= *taps.iter().min().unwrap() && v <= *taps.iter().max().unwrap());
                }
            }
        }
    }

    #[test]
    fn balance_subsample_counts_ignore_the_seed(per in 1usize..5, s1 in any::<u64>(), s2 in any::<u64>()) {
        let set = synth_domain(&SynthDomainSpec::new(DomainKind::SolidShapes, 8), 6, 9).unwrap();
        let k = set.num_classes();
        let a = balance_subsample(&set, per * k, s1).unwrap();
        let b = balance_subsample(&set, per * k, s2).unwrap();
        prop_assert_eq!(a.class_histogram(), vec![per; k]);
        prop_assert_eq!(a.class_histogram(), b.class_histogram());
    }

    #[test]
    fn merged_label_spaces_are_disjoint(
        (t, o) in image_set().prop_flat_map(|t| {
            let o = set_with(t.channels(), t.height(), t.width());
            (Just(t), o)
        }),
    ) {
        let pair = merge_domains(&t, &o, false).unwrap();
        prop_assert_eq!(pair.label_offset, t.num_classes());
        prop_assert!(pair.target.labels().iter().all(|&l| usize::from(l) < pair.label_offset));
        prop_assert!(pair.outer.labels().iter().all(|&l| usize::from(l) >= pair.label_offset));
        let shifted: Vec<u16> = o.labels().iter().map(|&l| l + t.num_classes() as u16).collect();
        prop_assert_eq!(pair.outer.labels(), &shifted[..]);
    }
}
