mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;
use xstars::data::{
    build_synth_corpus, iterate_pairs, resize_to_input, Degradation, PairManifest, SensorChip, SensorProfile, Split,
    SynthOptions,
};
use xstars::raster::Raster;

struct Corpus {
    _dir: tempfile::TempDir,
    manifest: PairManifest,
}

/// One corpus shared by the properties below; building it dominates runtime.
fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("base");
        common::write_base_scenes(&base, 6, 64, 1);
        let profiles = vec![
            SensorProfile::identity("hi"),
            SensorProfile::new(
                "lo",
                6.0,
                Degradation {
                    downscale: 4.0,
                    blur_sigma: 1.0,
                    noise_sigma: 0.01,
                    ..Degradation::identity()
                },
            )
            .unwrap(),
        ];
        let opts = SynthOptions {
            footprint_side: Some(32),
            train_fraction: 0.7,
            seed: 2,
            jitter: 0,
        };
        let manifest = build_synth_corpus(&base, &profiles, 23, &dir.path().join("corpus"), &opts).unwrap();
        Corpus { _dir: dir, manifest }
    })
}

fn chip(pixels: Raster) -> SensorChip {
    SensorChip {
        pixels,
        sensor_id: "s".into(),
        gsd: Some(10.0),
        footprint_id: "f".into(),
    }
}

#[test]
fn splits_are_disjoint_and_complete() {
    let m = &corpus().manifest;
    let train: BTreeSet<_> = m.records().iter().filter(|r| r.split == Split::Train).map(|r| &r.footprint_id).collect();
    let val: BTreeSet<_> = m.records().iter().filter(|r| r.split == Split::Val).map(|r| &r.footprint_id).collect();
    assert!(train.is_disjoint(&val));
    assert_eq!(train.len() + val.len(), 23);
    assert_eq!(train.len(), 16);
}

#[test]
fn manifest_round_trips_through_disk() {
    let m = &corpus().manifest;
    // Chip paths are relative, so the copy lives beside the original.
    let path = m.root().join("copy.jsonl");
    m.save(&path).unwrap();
    let back = PairManifest::load(&path).unwrap();
    assert_eq!(back.records(), m.records());
}

#[test]
fn missing_chip_names_the_footprint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::tiny_corpus(dir.path(), 3, &common::identity_profiles(&["a", "b"]));
    let victim = manifest.records()[1].clone();
    std::fs::write(manifest.chip_path(&victim, "b").unwrap(), b"not a png").unwrap();
    let err = iterate_pairs(&manifest, ("a", "b"), 1, 0)
        .unwrap()
        .find_map(|b| b.err())
        .expect("corrupt chip is reported");
    assert!(err.to_string().contains(&victim.footprint_id), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batches_pair_footprints_positionally(batch in 1usize..9, seed in any::<u64>()) {
        let m = &corpus().manifest;
        let stream = iterate_pairs(m, ("hi", "lo"), batch, seed).unwrap();
        let expected = stream.batch_count();
        let mut seen = Vec::new();
        let mut batches = 0;
        for b in stream {
            let b = b.unwrap();
            batches += 1;
            prop_assert!(b.len() <= batch);
            for s in &b {
                let hi = s.chip("hi").unwrap();
                let lo = s.chip("lo").unwrap();
                prop_assert_eq!(&hi.footprint_id, &lo.footprint_id);
                prop_assert_eq!(&hi.footprint_id, &s.footprint_id);
                prop_assert_eq!(hi.pixels.side(), Some(32));
                prop_assert_eq!(lo.pixels.side(), Some(8));
                seen.push(s.footprint_id.clone());
            }
        }
        prop_assert_eq!(batches, expected);
        prop_assert_eq!(seen.len(), 23);
        let unique: BTreeSet<_> = seen.iter().collect();
        prop_assert_eq!(unique.len(), 23);
    }

    #[test]
    fn same_seed_same_order(batch in 1usize..9, seed in any::<u64>()) {
        let m = &corpus().manifest;
        let ids = |s| -> Vec<String> {
            iterate_pairs(m, ("hi", "lo"), batch, s)
                .unwrap()
                .flat_map(|b| b.unwrap().into_iter().map(|x| x.footprint_id))
                .collect()
        };
        prop_assert_eq!(ids(seed), ids(seed));
    }

    #[test]
    fn resize_is_idempotent(side in 1usize..40, target in 1usize..40, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = xstars::seed::rng(&[seed]);
        let img = Raster::from_fn(side, side, |_, _| [rng.random(), rng.random(), rng.random()]);
        let once = resize_to_input(&chip(img), target).unwrap();
        let twice = resize_to_input(&once, target).unwrap();
        prop_assert_eq!(once.pixels.data(), twice.pixels.data());
        prop_assert!(once.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn larger_downscale_gives_the_rounded_smaller_side(base in 8usize..96, factor in 1.0f64..8.0) {
        let p = SensorProfile::new("p", 1.5 * factor, Degradation { downscale: factor, ..Degradation::identity() }).unwrap();
        let img = Raster::filled(base, base, [0.5, 0.25, 0.75]);
        let out = p.degrade(&img, 0).unwrap();
        let want = ((base as f64 / factor).round() as usize).max(1);
        prop_assert_eq!(out.side(), Some(want));
        prop_assert!(want <= base);
        // Rounding can hold the side for factors just above one.
        if base as f64 / factor < base as f64 - 0.5 {
            prop_assert!(want < base);
        }
    }
}
