//! Synthetic streaming corpora with planted segment boundaries.
//!
//! Each gloss id owns a random unit prototype vector. A sentence is a gloss
//! sequence without immediate repeats; every gloss is rendered as a run of
//! noisy copies of its prototype. The text side is the gloss sequence put
//! through a fixed reordering rule and an injective gloss→word map.
//!
//! On disk a dataset is a directory holding `manifest.json`, and per split a
//! `<split>.jsonl` record file and a `<split>.bin` feature block. The
//! feature block is the magic `WKFEAT01`, a little-endian `u64` feature
//! width, then every frame of every sample as little-endian `f64`, in record
//! order. Records carry their offset (in frames) into that block.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 8] = b"WKFEAT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorder {
    Identity,
    /// Swap positions (1,2), (3,4), …; an odd last token stays.
    AdjacentSwap,
    LastToFront,
}

impl Reorder {
    /// Source position of each output position.
    pub fn permutation(&self, len: usize) -> Vec<usize> {
        match self {
            Reorder::Identity => (0..len).collect(),
            Reorder::AdjacentSwap => (0..len)
                .map(|i| if i % 2 == 0 { if i + 1 < len { i + 1 } else { i } } else { i - 1 })
                .collect(),
            Reorder::LastToFront => {
                if len == 0 {
                    Vec::new()
                } else {
                    std::iter::once(len - 1).chain(0..len - 1).collect()
                }
            }
        }
    }
}

impl FromStr for Reorder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Reorder::Identity),
            "adjacent_swap" => Ok(Reorder::AdjacentSwap),
            "last_to_front" => Ok(Reorder::LastToFront),
            other => Err(Error::Config(format!("unknown reordering rule {other:?}"))),
        }
    }
}

impl fmt::Display for Reorder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reorder::Identity => "identity",
            Reorder::AdjacentSwap => "adjacent_swap",
            Reorder::LastToFront => "last_to_front",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    pub gloss_vocab: usize,
    pub text_vocab: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    pub sentence_min: usize,
    pub sentence_max: usize,
    pub reorder: Reorder,
    pub noise: f64,
    pub seed: u64,
    /// No gloss sequence of one split reappears in a later split.
    pub disjoint_splits: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            feature_dim: 32,
            gloss_vocab: 20,
            text_vocab: 24,
            segment_min: 3,
            segment_max: 8,
            sentence_min: 3,
            sentence_max: 7,
            reorder: Reorder::AdjacentSwap,
            noise: 0.1,
            seed: 7,
            disjoint_splits: true,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 {
            return err("feature_dim must be positive".into());
        }
        if self.gloss_vocab < 4 || self.text_vocab < 4 {
            return err("vocabulary sizes must be at least 4".into());
        }
        if self.text_vocab < self.gloss_vocab {
            return err("text vocabulary must be at least as large as the gloss vocabulary".into());
        }
        if self.segment_min < 1 || self.segment_max < self.segment_min {
            return err(format!("bad segment range {}..={}", self.segment_min, self.segment_max));
        }
        if self.sentence_min < 1 || self.sentence_max < self.sentence_min {
            return err(format!("bad sentence range {}..={}", self.sentence_min, self.sentence_max));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return err(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        Ok(())
    }

    /// Unit prototype vector per gloss.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        (0..self.gloss_vocab)
            .map(|_| loop {
                let v: Vec<f64> = (0..self.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            })
            .collect()
    }

    /// Injective gloss → word map.
    pub fn word_map(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX - 1);
        let mut words: Vec<usize> = (0..self.text_vocab).collect();
        for i in (1..words.len()).rev() {
            let j = rng.random_range(0..=i);
            words.swap(i, j);
        }
        words.truncate(self.gloss_vocab);
        words
    }

    pub fn translate(&self, gloss: &[usize], map: &[usize]) -> Vec<usize> {
        self.reorder.permutation(gloss.len()).into_iter().map(|i| map[gloss[i]]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `frames × feature_dim`.
    pub features: Tensor,
    pub gloss: Vec<usize>,
    pub text: Vec<usize>,
    /// 1-based last frame of each gloss segment.
    pub boundaries: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            dev: 200,
            test: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    fn splits(&self) -> [(&'static str, &Vec<Sample>); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }

    pub fn stats(&self) -> CorpusStats {
        corpus_stats(self.splits().iter().flat_map(|(_, s)| s.iter()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub frames: usize,
    pub glosses: usize,
    pub mean_frames: f64,
    pub mean_sentence_length: f64,
    /// Mean frames per gloss; the static segmentation rate.
    pub frames_per_gloss: f64,
}

pub fn corpus_stats<'a>(samples: impl Iterator<Item = &'a Sample>) -> CorpusStats {
    let mut s = CorpusStats::default();
    for x in samples {
        s.samples += 1;
        s.frames += x.features.rows();
        s.glosses += x.gloss.len();
    }
    if s.samples > 0 {
        s.mean_frames = s.frames as f64 / s.samples as f64;
        s.mean_sentence_length = s.glosses as f64 / s.samples as f64;
        s.frames_per_gloss = s.frames as f64 / s.glosses as f64;
    }
    s
}

fn sample_rng(seed: u64, split: usize, index: usize, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 56) | ((attempt as u64) << 40) | index as u64);
    rng
}

fn draw_gloss(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.random_range(spec.sentence_min..=spec.sentence_max);
    let mut gloss: Vec<usize> = Vec::with_capacity(len);
    while gloss.len() < len {
        let g = rng.random_range(0..spec.gloss_vocab);
        if gloss.last() != Some(&g) {
            gloss.push(g);
        }
    }
    gloss
}

fn render(spec: &SyntheticSpec, id: u64, gloss: Vec<usize>, protos: &[Vec<f64>], map: &[usize], rng: &mut ChaCha8Rng) -> Sample {
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let d = spec.feature_dim;
    let mut data = Vec::new();
    let mut boundaries = Vec::with_capacity(gloss.len());
    let mut frames = 0;
    for &g in &gloss {
        let len = rng.random_range(spec.segment_min..=spec.segment_max);
        for _ in 0..len {
            data.extend(protos[g].iter().map(|p| p + noise.sample(rng)));
        }
        frames += len;
        boundaries.push(frames);
    }
    let text = spec.translate(&gloss, map);
    Sample {
        id,
        features: Tensor::matrix(frames, d, data).expect("at least one frame"),
        gloss,
        text,
        boundaries,
    }
}

/// Deterministic corpus for `spec`. Sample ids are unique across splits.
pub fn generate_corpus(spec: &SyntheticSpec, sizes: SplitSizes) -> Result<Dataset> {
    spec.validate()?;
    let protos = spec.prototypes();
    let map = spec.word_map();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out: Vec<Vec<Sample>> = Vec::new();
    let mut next_id = 0u64;
    for (split, count) in [sizes.train, sizes.dev, sizes.test].into_iter().enumerate() {
        let mut samples = Vec::with_capacity(count);
        let mut this_split = Vec::with_capacity(count);
        for index in 0..count {
            let mut attempt = 0;
            let (gloss, mut rng) = loop {
                let mut rng = sample_rng(spec.seed, split, index, attempt);
                let gloss = draw_gloss(spec, &mut rng);
                if !spec.disjoint_splits || !seen.contains(&gloss) {
                    break (gloss, rng);
                }
                attempt += 1;
                if attempt > 10_000 {
                    return Err(Error::Config(
                        "cannot draw disjoint splits: sentence space too small for requested sizes".into(),
                    ));
                }
            };
            this_split.push(gloss.clone());
            samples.push(render(spec, next_id, gloss, &protos, &map, &mut rng));
            next_id += 1;
        }
        seen.extend(this_split);
        out.push(samples);
    }
    let test = out.pop().expect("three splits");
    let dev = out.pop().expect("three splits");
    let train = out.pop().expect("three splits");
    Ok(Dataset {
        spec: spec.clone(),
        train,
        dev,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    spec: SyntheticSpec,
    splits: Vec<SplitEntry>,
}

#[derive(Serialize, Deserialize)]
struct SplitEntry {
    name: String,
    samples: usize,
    frames: usize,
    records: String,
    features: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    offset: usize,
    frames: usize,
    gloss: Vec<usize>,
    text: Vec<usize>,
    boundaries: Vec<usize>,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, samples) in dataset.splits() {
        let records = format!("{name}.jsonl");
        let features = format!("{name}.bin");
        let mut rec = BufWriter::new(std::fs::File::create(dir.join(&records))?);
        let mut bin = BufWriter::new(std::fs::File::create(dir.join(&features))?);
        bin.write_all(FEATURE_MAGIC)?;
        bin.write_all(&(dataset.spec.feature_dim as u64).to_le_bytes())?;
        let mut offset = 0;
        for s in samples.iter() {
            let r = Record {
                id: s.id,
                offset,
                frames: s.features.rows(),
                gloss: s.gloss.clone(),
                text: s.text.clone(),
                boundaries: s.boundaries.clone(),
            };
            serde_json::to_writer(&mut rec, &r)?;
            rec.write_all(b"\n")?;
            for v in s.features.data() {
                bin.write_all(&v.to_le_bytes())?;
            }
            offset += s.features.rows();
        }
        rec.flush()?;
        bin.flush()?;
        entries.push(SplitEntry {
            name: name.to_string(),
            samples: samples.len(),
            frames: offset,
            records,
            features,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        spec: dataset.spec.clone(),
        splits: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn schema(msg: String) -> Error {
    Error::Schema(msg)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| schema(format!("manifest is not JSON: {e}")))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(schema(format!("dataset schema version {version:?}, expected {SCHEMA_VERSION}")));
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| schema(format!("manifest: {e}")))?;
    manifest.spec.validate()?;
    let d = manifest.spec.feature_dim;
    let mut splits: Vec<Vec<Sample>> = Vec::new();
    for name in SPLITS {
        let entry = manifest
            .splits
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| schema(format!("manifest lacks split {name}")))?;
        let bytes = std::fs::read(dir.join(&entry.features))?;
        if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
            return Err(schema(format!("{}: bad feature header", entry.features)));
        }
        let width = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if width != d || bytes.len() != 16 + 8 * d * entry.frames {
            return Err(schema(format!("{}: size does not match manifest", entry.features)));
        }
        let values: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let reader = BufReader::new(std::fs::File::open(dir.join(&entry.records))?);
        let mut samples = Vec::with_capacity(entry.samples);
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line).map_err(|e| schema(format!("{}: {e}", entry.records)))?;
            let end = r.offset.checked_add(r.frames).filter(|&e| e <= entry.frames && r.frames > 0);
            let Some(end) = end else {
                return Err(schema(format!("{}: record {} out of range", entry.records, r.id)));
            };
            if r.boundaries.len() != r.gloss.len() || r.boundaries.last() != Some(&r.frames) {
                return Err(Error::Data(format!("record {} has inconsistent boundaries", r.id)));
            }
            samples.push(Sample {
                id: r.id,
                features: Tensor::matrix(r.frames, d, values[r.offset * d..end * d].to_vec())?,
                gloss: r.gloss,
                text: r.text,
                boundaries: r.boundaries,
            });
        }
        if samples.len() != entry.samples {
            return Err(schema(format!("{}: {} records, manifest says {}", entry.records, samples.len(), entry.samples)));
        }
        splits.push(samples);
    }
    let test = splits.pop().expect("three splits");
    let dev = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        spec: manifest.spec,
        train,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SplitSizes {
        SplitSizes { train: 30, dev: 10, test: 10 }
    }

    #[test]
    fn noiseless_single_frame_segments_are_prototypes() {
        let spec = SyntheticSpec {
            noise: 0.0,
            segment_min: 1,
            segment_max: 1,
            ..SyntheticSpec::default()
        };
        let ds = generate_corpus(&spec, small()).unwrap();
        let protos = spec.prototypes();
        for s in &ds.train {
            assert_eq!(s.features.rows(), s.gloss.len());
            for (i, &g) in s.gloss.iter().enumerate() {
                assert_eq!(s.features.row(i), protos[g].as_slice());
            }
        }
    }

    #[test]
    fn identity_rule_relabels_only() {
        let spec = SyntheticSpec { reorder: Reorder::Identity, ..SyntheticSpec::default() };
        let ds = generate_corpus(&spec, small()).unwrap();
        let map = spec.word_map();
        for s in &ds.dev {
            assert_eq!(s.text, s.gloss.iter().map(|&g| map[g]).collect::<Vec<_>>());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_corpus(&spec, small()).unwrap(), generate_corpus(&spec, small()).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_corpus(&spec, small()).unwrap(), generate_corpus(&other, small()).unwrap());
    }

    #[test]
    fn sample_invariants() {
        let ds = generate_corpus(&SyntheticSpec::default(), small()).unwrap();
        let map = ds.spec.word_map();
        let distinct: HashSet<_> = map.iter().collect();
        assert_eq!(distinct.len(), map.len());
        for s in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
            assert_eq!(s.boundaries.len(), s.gloss.len());
            assert_eq!(*s.boundaries.last().unwrap(), s.features.rows());
            assert!(s.gloss.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn reorder_rules_are_permutations() {
        for rule in [Reorder::Identity, Reorder::AdjacentSwap, Reorder::LastToFront] {
            for len in 0..9 {
                let mut p = rule.permutation(len);
                p.sort_unstable();
                assert_eq!(p, (0..len).collect::<Vec<_>>());
            }
        }
        assert_eq!(Reorder::AdjacentSwap.permutation(5), vec![1, 0, 3, 2, 4]);
        assert_eq!(Reorder::LastToFront.permutation(3), vec![2, 0, 1]);
    }

    #[test]
    fn disjoint_splits_share_no_sentence() {
        let spec = SyntheticSpec { sentence_min: 2, sentence_max: 2, gloss_vocab: 5, text_vocab: 5, ..SyntheticSpec::default() };
        let ds = generate_corpus(&spec, SplitSizes { train: 30, dev: 5, test: 5 }).unwrap();
        let train: HashSet<_> = ds.train.iter().map(|s| (s.gloss.clone(), s.text.clone())).collect();
        for s in ds.dev.iter().chain(&ds.test) {
            assert!(!train.contains(&(s.gloss.clone(), s.text.clone())));
        }
    }

    #[test]
    fn segment_statistics_match_spec() {
        let spec = SyntheticSpec::default();
        let ds = generate_corpus(&spec, SplitSizes { train: 1000, dev: 0, test: 0 }).unwrap();
        let stats = ds.stats();
        let expected = (spec.segment_min + spec.segment_max) as f64 / 2.0;
        assert!((stats.frames_per_gloss - expected).abs() / expected < 0.05);
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let ds = generate_corpus(&SyntheticSpec::default(), small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
        std::fs::write(dir.path().join("dev.bin"), b"XXXXXXXX").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Schema(_))));
        std::fs::write(dir.path().join("manifest.json"), b"{\"schema_version\": 0}").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Schema(_))));
    }
}
