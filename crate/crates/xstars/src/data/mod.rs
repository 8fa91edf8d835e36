//! Paired multi-sensor corpora: manifests, batched pair iteration, resizing
//! and a sensor simulator that fabricates footprint-aligned chips.

mod manifest;
pub mod scenes;
mod sensor;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

pub use manifest::{ManifestRecord, PairManifest, Split};
pub use sensor::{Degradation, SensorProfile, BASE_GSD};

use crate::raster::Raster;
use crate::seed;
use crate::{Error, Result};

/// One image of one footprint from one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorChip {
    pub pixels: Raster,
    pub sensor_id: String,
    /// Meters per pixel, when the producer knows it.
    pub gsd: Option<f64>,
    pub footprint_id: String,
}

/// Footprint-aligned chips from two or more sensors, in the order the
/// sensors were requested.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub footprint_id: String,
    pub chips: Vec<SensorChip>,
}

impl PairedSample {
    pub fn chip(&self, sensor: &str) -> Option<&SensorChip> {
        self.chips.iter().find(|c| c.sensor_id == sensor)
    }
}

/// Bilinear resize to `input_side x input_side`; values stay in `[0, 1]`.
pub fn resize_to_input(chip: &SensorChip, input_side: usize) -> Result<SensorChip> {
    if input_side == 0 {
        return Err(Error::Parameter("input side must be > 0".into()));
    }
    let mut pixels = chip.pixels.resize(input_side, input_side);
    pixels.clamp_unit();
    let gsd = chip
        .gsd
        .map(|g| g * chip.pixels.width() as f64 / input_side as f64);
    Ok(SensorChip {
        pixels,
        sensor_id: chip.sensor_id.clone(),
        gsd,
        footprint_id: chip.footprint_id.clone(),
    })
}

/// Options for [`iterate_groups`].
#[derive(Debug, Clone)]
pub struct PairStreamOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub split: Option<Split>,
    /// Drop a trailing batch of size one (needed when label smoothing is on).
    pub drop_singleton: bool,
    /// Known GSD per sensor, copied onto loaded chips.
    pub gsd: BTreeMap<String, f64>,
}

impl PairStreamOptions {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        Self {
            batch_size,
            seed,
            split: None,
            drop_singleton: false,
            gsd: BTreeMap::new(),
        }
    }
}

/// Lazily loading, shuffled stream of batches of footprint-aligned samples.
///
/// Within a batch, position `i` of every sensor refers to the same footprint;
/// this is what makes the diagonal of the MSAD target matrix correct.
pub struct PairBatches<'a> {
    manifest: &'a PairManifest,
    sensors: Vec<String>,
    order: Vec<usize>,
    cursor: usize,
    opts: PairStreamOptions,
}

impl PairBatches<'_> {
    pub fn footprint_count(&self) -> usize {
        self.order.len()
    }

    pub fn batch_count(&self) -> usize {
        let n = self.order.len();
        let b = self.opts.batch_size;
        let full = n / b;
        let rest = n % b;
        full + usize::from(rest > 1 || (rest == 1 && !self.opts.drop_singleton))
    }

    fn load(&self, idx: usize) -> Result<PairedSample> {
        let rec = &self.manifest.records()[idx];
        let chips = self
            .sensors
            .iter()
            .map(|s| {
                let path = self.manifest.chip_path(rec, s).expect("covering record");
                let pixels = Raster::load(&path).map_err(|e| Error::Chip {
                    footprint_id: rec.footprint_id.clone(),
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                Ok(SensorChip {
                    pixels,
                    sensor_id: s.clone(),
                    gsd: self.opts.gsd.get(s).copied(),
                    footprint_id: rec.footprint_id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairedSample {
            footprint_id: rec.footprint_id.clone(),
            chips,
        })
    }
}

impl Iterator for PairBatches<'_> {
    type Item = Result<Vec<PairedSample>>;

    fn next(&mut self) -> Option<Self::Item> {
        let remaining = self.order.len() - self.cursor;
        if remaining == 0 || (remaining == 1 && self.opts.drop_singleton) {
            return None;
        }
        let take = remaining.min(self.opts.batch_size);
        let idx: Vec<usize> = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        Some(idx.into_iter().map(|i| self.load(i)).collect())
    }
}

/// Shuffled batches over footprints that have a chip for every sensor in
/// `sensors`. A single sensor gives an ordinary single-sensor stream.
pub fn iterate_groups<'a>(
    manifest: &'a PairManifest,
    sensors: &[String],
    opts: PairStreamOptions,
) -> Result<PairBatches<'a>> {
    if opts.batch_size == 0 {
        return Err(Error::Parameter("batch size must be > 0".into()));
    }
    if sensors.is_empty() {
        return Err(Error::Config("no sensors requested".into()));
    }
    let present = manifest.sensors();
    if let Some(missing) = sensors.iter().find(|s| !present.contains(*s)) {
        return Err(Error::Config(format!(
            "sensor `{missing}` does not appear in the manifest (available: {})",
            present.iter().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut order = manifest.covering(sensors, opts.split);
    order.shuffle(&mut seed::rng(&[opts.seed, 0x5041_4952]));
    Ok(PairBatches {
        manifest,
        sensors: sensors.to_vec(),
        order,
        cursor: 0,
        opts,
    })
}

/// Two-sensor form of [`iterate_groups`].
pub fn iterate_pairs<'a>(
    manifest: &'a PairManifest,
    sensor_pair: (&str, &str),
    batch_size: usize,
    seed: u64,
) -> Result<PairBatches<'a>> {
    iterate_groups(
        manifest,
        &[sensor_pair.0.to_string(), sensor_pair.1.to_string()],
        PairStreamOptions::new(batch_size, seed),
    )
}

/// Degrades one base footprint through every profile.
pub fn synth_sensor_chips(
    base: &Raster,
    profiles: &[SensorProfile],
    footprint_id: &str,
    seed: u64,
) -> Result<PairedSample> {
    let side = base.side().ok_or_else(|| {
        Error::Shape(format!(
            "base footprint must be square, got {}x{}",
            base.height(),
            base.width()
        ))
    })?;
    let chips = profiles
        .iter()
        .map(|p| {
            p.validate()?;
            if p.chip_side(side) < 1 || (side as f64) < p.degradation.downscale {
                return Err(Error::Shape(format!(
                    "base side {side} is too small for sensor `{}`: need at least {}",
                    p.sensor_id,
                    p.degradation.downscale.ceil() as usize
                )));
            }
            Ok(SensorChip {
                pixels: p.degrade(base, seed::derive(&[seed, seed::hash_str(&p.sensor_id)]))?,
                sensor_id: p.sensor_id.clone(),
                gsd: Some(p.gsd),
                footprint_id: footprint_id.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedSample {
        footprint_id: footprint_id.to_string(),
        chips,
    })
}

/// Two-profile form of [`synth_sensor_chips`].
pub fn synth_sensor_pair(
    base: &Raster,
    profiles: (&SensorProfile, &SensorProfile),
    seed: u64,
) -> Result<PairedSample> {
    synth_sensor_chips(base, &[profiles.0.clone(), profiles.1.clone()], "footprint", seed)
}

/// Options for [`build_synth_corpus`].
#[derive(Debug, Clone)]
pub struct SynthOptions {
    /// Side of the square footprint cut from a base image; `None` takes the
    /// largest centered square.
    pub footprint_side: Option<usize>,
    /// Fraction of footprints tagged `train`; the rest are `val`.
    pub train_fraction: f64,
    pub seed: u64,
    /// Maximum per-sensor crop offset in base pixels, emulating
    /// non-simultaneous acquisitions. Zero disables it.
    pub jitter: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            footprint_side: None,
            train_fraction: 0.8,
            seed: 0,
            jitter: 0,
        }
    }
}

fn list_images(base_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = std::fs::read_dir(base_dir)
        .map_err(|e| Error::io(base_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect::<Vec<_>>();
    files.sort();
    Ok(files)
}

/// Writes `out_dir/<sensor>/<footprint>.png` for every footprint and sensor,
/// plus `out_dir/manifest.jsonl`.
///
/// Footprints cycle through the readable images of `base_dir` in sorted
/// order; each takes a seeded random crop. Unreadable files are skipped with
/// a warning.
pub fn build_synth_corpus(
    base_dir: &Path,
    profiles: &[SensorProfile],
    n_footprints: usize,
    out_dir: &Path,
    opts: &SynthOptions,
) -> Result<PairManifest> {
    if !(0.0..=1.0).contains(&opts.train_fraction) {
        return Err(Error::Parameter(format!(
            "train fraction must be in [0, 1], got {}",
            opts.train_fraction
        )));
    }
    if profiles.is_empty() {
        return Err(Error::Config("no sensor profiles given".into()));
    }
    let mut ids = std::collections::BTreeSet::new();
    for p in profiles {
        p.validate()?;
        if !ids.insert(p.sensor_id.clone()) {
            return Err(Error::Config(format!("sensor `{}` listed twice", p.sensor_id)));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if n_footprints == 0 {
        let m = PairManifest::new(out_dir, Vec::new());
        m.save(&out_dir.join("manifest.jsonl"))?;
        return Ok(m);
    }
    let mut bases = Vec::new();
    for path in list_images(base_dir)? {
        match Raster::load(&path) {
            Ok(r) => bases.push(r),
            Err(e) => log::warn!("skipping unreadable base image {}: {e}", path.display()),
        }
    }
    if bases.is_empty() {
        return Err(Error::Config(format!(
            "no readable base images in {}",
            base_dir.display()
        )));
    }

    let mut order: Vec<usize> = (0..n_footprints).collect();
    order.shuffle(&mut seed::rng(&[opts.seed, 0x5350_4C54]));
    let n_train = (opts.train_fraction * n_footprints as f64).round() as usize;
    let mut split = vec![Split::Val; n_footprints];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }

    let mut records = Vec::with_capacity(n_footprints);
    for (i, tag) in split.into_iter().enumerate() {
        let base = &bases[i % bases.len()];
        let min_side = base.height().min(base.width());
        let side = opts.footprint_side.unwrap_or(min_side);
        if side + 2 * opts.jitter > min_side {
            return Err(Error::Shape(format!(
                "base image of {}x{} is too small: footprint needs at least {} pixels per side",
                base.height(),
                base.width(),
                side + 2 * opts.jitter
            )));
        }
        let mut rng = seed::rng(&[opts.seed, i as u64]);
        let top = rng.random_range(opts.jitter..=base.height() - side - opts.jitter);
        let left = rng.random_range(opts.jitter..=base.width() - side - opts.jitter);
        let footprint_id = format!("fp{i:06}");
        let mut chips = BTreeMap::new();
        for p in profiles {
            let (dy, dx) = if opts.jitter > 0 {
                let j = opts.jitter as i64;
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            } else {
                (0, 0)
            };
            let crop = base.crop(
                (top as i64 + dy) as usize,
                (left as i64 + dx) as usize,
                side,
                side,
            )?;
            let sample = synth_sensor_chips(&crop, std::slice::from_ref(p), &footprint_id, seed::derive(&[opts.seed, i as u64, 1]))?;
            let rel = format!("{}/{footprint_id}.png", p.sensor_id);
            sample.chips[0].pixels.save_png(&out_dir.join(&rel))?;
            chips.insert(p.sensor_id.clone(), rel);
        }
        records.push(ManifestRecord {
            footprint_id,
            split: tag,
            chips,
            timestamp: None,
        });
    }
    let manifest = PairManifest::new(out_dir, records);
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(side: usize, phase: usize) -> Raster {
        Raster::from_fn(side, side, |y, x| {
            let v = (((x + phase) / 3 + y / 5) % 2) as f32;
            [v, 0.5 * v + 0.2, 1.0 - v]
        })
    }

    fn base_dir(n: usize, side: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..n {
            textured(side, i)
                .save_png(&dir.path().join(format!("base{i}.png")))
                .unwrap();
        }
        dir
    }

    #[test]
    fn resize_equalizes_sides_and_is_idempotent() {
        let hi = SensorChip {
            pixels: textured(200, 0),
            sensor_id: "s6".into(),
            gsd: Some(1.5),
            footprint_id: "a".into(),
        };
        let lo = SensorChip {
            pixels: textured(10, 0),
            sensor_id: "ls".into(),
            gsd: Some(30.0),
            footprint_id: "a".into(),
        };
        let a = resize_to_input(&hi, 32).unwrap();
        let b = resize_to_input(&lo, 32).unwrap();
        assert_eq!(a.pixels.side(), b.pixels.side());
        assert_eq!(resize_to_input(&a, 32).unwrap(), a);
        assert_eq!(resize_to_input(&hi, 200).unwrap().pixels, hi.pixels);
        assert!(resize_to_input(&hi, 0).is_err());
    }

    #[test]
    fn paper_chip_sides() {
        // 2000 px footprint at 1.5 m: SPOT-6 keeps 2000, Sentinel-2 gets 300
        let base = Raster::filled(2000, 2000, [0.3, 0.4, 0.5]);
        let pair = synth_sensor_pair(&base, (&SensorProfile::identity("s6"), &{
            let mut p = SensorProfile::identity("s2");
            p.degradation.downscale = 6.67;
            p
        }), 0)
        .unwrap();
        assert_eq!(pair.chips[0].pixels.side(), Some(2000));
        assert_eq!(pair.chips[1].pixels.side(), Some(300));
        let r0 = resize_to_input(&pair.chips[0], 224).unwrap();
        let r1 = resize_to_input(&pair.chips[1], 224).unwrap();
        assert_eq!(r0.pixels.side(), r1.pixels.side());
    }

    #[test]
    fn synth_pair_identity_and_seeding() {
        let base = textured(60, 1);
        let id = SensorProfile::identity("a");
        let pair = synth_sensor_pair(&base, (&id, &SensorProfile::sentinel2()), 4).unwrap();
        assert_eq!(pair.chips[0].pixels, base);
        assert_eq!(pair, synth_sensor_pair(&base, (&id, &SensorProfile::sentinel2()), 4).unwrap());
        let too_small = textured(5, 0);
        match synth_sensor_pair(&too_small, (&id, &SensorProfile::landsat8()), 0) {
            Err(Error::Shape(m)) => assert!(m.contains("at least 20"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corpus_counts_splits_and_pairing() {
        let bases = base_dir(3, 48);
        let out = tempfile::tempdir().unwrap();
        let profiles = vec![SensorProfile::spot6(), SensorProfile::sentinel2()];
        let opts = SynthOptions {
            footprint_side: Some(40),
            seed: 7,
            ..Default::default()
        };
        let m = build_synth_corpus(bases.path(), &profiles, 100, out.path(), &opts).unwrap();
        assert_eq!(m.len(), 100);
        let pngs = walk_pngs(out.path());
        assert_eq!(pngs, 200);
        let train = m.records().iter().filter(|r| r.split == Split::Train).count();
        assert_eq!(train, 80);
        let loaded = PairManifest::load(&out.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.records(), m.records());

        let sizes: Vec<usize> = iterate_pairs(&loaded, ("s6", "s2"), 32, 1)
            .unwrap()
            .map(|b| {
                let b = b.unwrap();
                for s in &b {
                    assert_eq!(s.chips[0].footprint_id, s.chips[1].footprint_id);
                    assert_eq!(s.chips[0].sensor_id, "s6");
                }
                b.len()
            })
            .collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
    }

    fn walk_pngs(dir: &Path) -> usize {
        let mut n = 0;
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                n += walk_pngs(&p);
            } else if p.extension().is_some_and(|x| x == "png") {
                n += 1;
            }
        }
        n
    }

    #[test]
    fn corpus_is_byte_identical_on_rerun() {
        let bases = base_dir(2, 40);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let profiles = vec![SensorProfile::spot6(), SensorProfile::landsat8()];
        let opts = SynthOptions {
            footprint_side: Some(32),
            jitter: 2,
            seed: 3,
            ..Default::default()
        };
        build_synth_corpus(bases.path(), &profiles, 6, a.path(), &opts).unwrap();
        build_synth_corpus(bases.path(), &profiles, 6, b.path(), &opts).unwrap();
        for rel in ["manifest.jsonl", "s6/fp000003.png", "ls/fp000005.png"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
    }

    #[test]
    fn corpus_edge_cases() {
        let bases = base_dir(1, 40);
        std::fs::write(bases.path().join("junk.png"), b"not an image").unwrap();
        let out = tempfile::tempdir().unwrap();
        let p = vec![SensorProfile::spot6(), SensorProfile::sentinel2()];
        let m = build_synth_corpus(bases.path(), &p, 0, out.path(), &SynthOptions::default()).unwrap();
        assert!(m.is_empty());
        // the junk file is skipped, the readable one used
        let m = build_synth_corpus(bases.path(), &p, 2, out.path(), &SynthOptions::default()).unwrap();
        assert_eq!(m.len(), 2);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_synth_corpus(empty.path(), &p, 2, out.path(), &SynthOptions::default()),
            Err(Error::Config(_))
        ));
        let opts = SynthOptions {
            footprint_side: Some(64),
            ..Default::default()
        };
        assert!(matches!(
            build_synth_corpus(bases.path(), &p, 2, out.path(), &opts),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn iteration_batches_and_errors() {
        let bases = base_dir(2, 40);
        let out = tempfile::tempdir().unwrap();
        let p = vec![SensorProfile::spot6(), SensorProfile::sentinel2()];
        let opts = SynthOptions {
            footprint_side: Some(32),
            ..Default::default()
        };
        let m = build_synth_corpus(bases.path(), &p, 10, out.path(), &opts).unwrap();
        let sizes: Vec<usize> = iterate_pairs(&m, ("s6", "s2"), 4, 0)
            .unwrap()
            .map(|b| b.unwrap().len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let ids = |seed| -> Vec<String> {
            iterate_pairs(&m, ("s6", "s2"), 4, seed)
                .unwrap()
                .flat_map(|b| b.unwrap().into_iter().map(|s| s.footprint_id))
                .collect()
        };
        assert_eq!(ids(5), ids(5));
        assert_ne!(ids(5), ids(6));

        let mut o = PairStreamOptions::new(3, 0);
        o.drop_singleton = true;
        let stream = iterate_groups(&m, &["s6".into(), "s2".into()], o).unwrap();
        assert_eq!(stream.batch_count(), 3);
        assert_eq!(stream.map(|b| b.unwrap().len()).collect::<Vec<_>>(), vec![3, 3, 3]);

        assert!(matches!(iterate_pairs(&m, ("s6", "ls"), 4, 0), Err(Error::Config(_))));

        std::fs::write(out.path().join("s2/fp000004.png"), b"corrupt").unwrap();
        let err = iterate_pairs(&m, ("s6", "s2"), 10, 0)
            .unwrap()
            .find_map(|b| b.err())
            .unwrap();
        assert!(err.to_string().contains("fp000004"), "{err}");
    }
}
