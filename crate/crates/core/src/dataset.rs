//! Synthetic text-video pairs and their on-disk form.
//!
//! Every pair shares a latent concept vector `z`. Frames see all of `z` plus
//! distractor concepts and noise; the text keeps only the largest-magnitude
//! fraction of `z`, so a text under-describes its video.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::encoders::{RawText, RawVideo};
use crate::error::{ensure, Error, Result};
use crate::math::{normalize, SeededRng};

const POOL_STREAM: u64 = 0x504F_4F4C;
const PAIR_STREAM: u64 = 0x5041_4952;

/// Distractor pool size per concept dimension.
pub const POOL_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Training pairs (K).
    pub pairs: usize,
    pub test_pairs: usize,
    pub concepts: usize,
    /// Raw frames per video (T).
    pub frames: usize,
    /// Fraction ρ of concept coordinates the text keeps.
    pub coverage: f64,
    /// Frame noise σ.
    pub noise: f64,
    /// Distractor concepts added to each frame.
    pub distractors: usize,
    /// Scale of each distractor relative to the unit latent.
    pub distractor_weight: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            pairs: 512,
            test_pairs: 128,
            concepts: 16,
            frames: 12,
            coverage: 0.4,
            noise: 0.1,
            distractors: 2,
            distractor_weight: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.pairs >= 2, || format!("need at least 2 training pairs, got {}", self.pairs))?;
        ensure(self.concepts >= 2, || format!("need at least 2 concepts, got {}", self.concepts))?;
        ensure(self.frames >= 1, || "videos need at least one frame".into())?;
        ensure(self.coverage > 0.0 && self.coverage <= 1.0, || {
            format!("coverage must lie in (0, 1], got {}", self.coverage)
        })?;
        ensure(self.coverage * self.concepts as f64 >= 1.0, || {
            format!(
                "coverage {} keeps no coordinate of {} concepts",
                self.coverage, self.concepts
            )
        })?;
        ensure(self.noise >= 0.0 && self.noise.is_finite(), || "noise must be non-negative".into())?;
        ensure(self.distractor_weight >= 0.0 && self.distractor_weight.is_finite(), || {
            "distractor weight must be non-negative".into()
        })?;
        Ok(())
    }

    /// Number of coordinates a text keeps.
    pub fn kept(&self) -> usize {
        (self.coverage * self.concepts as f64).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::contract(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub pair_id: u64,
    pub text: RawText,
    pub video: RawVideo,
    pub split: Split,
}

/// Training pairs first (ids `0..K`), then test pairs.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<PairRecord>> {
    spec.validate()?;
    let c = spec.concepts;
    let mut pool_rng = SeededRng::keyed(spec.seed, &[POOL_STREAM]);
    let pool = (0..POOL_FACTOR * c)
        .map(|_| unit_gaussian(&mut pool_rng, c))
        .collect::<Result<Vec<_>>>()?;
    let kept = spec.kept();

    (0..spec.pairs + spec.test_pairs)
        .map(|k| {
            let id = k as u64;
            let mut rng = SeededRng::keyed(spec.seed, &[PAIR_STREAM, id]);
            let z = unit_gaussian(&mut rng, c)?;
            let mut frames = Vec::with_capacity(spec.frames);
            let mut noise = vec![0.0; c];
            for _ in 0..spec.frames {
                let mut frame = z.clone();
                for _ in 0..spec.distractors {
                    let extra = &pool[rng.below(pool.len())];
                    frame.iter_mut().zip(extra).for_each(|(f, e)| *f += spec.distractor_weight * e);
                }
                rng.fill_gaussian(&mut noise);
                frame.iter_mut().zip(&noise).for_each(|(f, n)| *f += spec.noise * n);
                frames.push(normalize(&frame)?);
            }
            Ok(PairRecord {
                pair_id: id,
                text: RawText {
                    id,
                    features: mask_top(&z, kept)?,
                },
                video: RawVideo { id, frames },
                split: if k < spec.pairs { Split::Train } else { Split::Test },
            })
        })
        .collect()
}

fn unit_gaussian(rng: &mut SeededRng, c: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; c];
    rng.fill_gaussian(&mut v);
    normalize(&v)
}

/// Keeps the `kept` largest-magnitude coordinates (lower index wins ties)
/// and renormalizes.
fn mask_top(z: &[f64], kept: usize) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].abs().total_cmp(&z[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; z.len()];
    for &i in &order[..kept] {
        out[i] = z[i];
    }
    normalize(&out)
}

/// Rounds every feature through single precision, matching what a reload
/// from the embedding files would produce.
pub fn quantize(records: &mut [PairRecord]) {
    let round = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = *x as f32 as f64);
    for r in records {
        round(&mut r.text.features);
        r.video.frames.iter_mut().for_each(round);
    }
}

pub fn split(records: &[PairRecord], which: Split) -> Vec<PairRecord> {
    records.iter().filter(|r| r.split == which).cloned().collect()
}

const EMBEDDING_MAGIC: &[u8; 4] = b"TMEB";
const EMBEDDING_VERSION: u32 = 1;
pub const EMBEDDING_HEADER_BYTES: u64 = 20;

/// A homogeneous list of items, each `rows_per_item × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows_per_item: usize,
    pub dim: usize,
    pub items: Vec<Vec<Vec<f64>>>,
}

impl EmbeddingTable {
    pub fn new(rows_per_item: usize, dim: usize, items: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        for (k, item) in items.iter().enumerate() {
            ensure(item.len() == rows_per_item && item.iter().all(|r| r.len() == dim), || {
                format!("item {k} is not {rows_per_item}×{dim}")
            })?;
        }
        Ok(Self {
            rows_per_item,
            dim,
            items,
        })
    }

    /// Byte offset of item `k` in the encoded file.
    pub fn item_offset(&self, k: usize) -> u64 {
        EMBEDDING_HEADER_BYTES + (k * self.rows_per_item * self.dim * 4) as u64
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let as_u32 = |n: usize, what: &str| {
            u32::try_from(n).map_err(|_| Error::contract(format!("{what} {n} does not fit in u32")))
        };
        let mut out = Vec::with_capacity(self.item_offset(self.items.len()) as usize);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&as_u32(self.items.len(), "item count")?.to_le_bytes());
        out.extend_from_slice(&as_u32(self.rows_per_item, "rows per item")?.to_le_bytes());
        out.extend_from_slice(&as_u32(self.dim, "dimension")?.to_le_bytes());
        for row in self.items.iter().flatten() {
            for &x in row {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let word = |offset: usize| -> Result<u32> {
            bytes
                .get(offset..offset + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| Error::format(bytes.len() as u64, "file ends inside the header"))
        };
        if bytes.get(..4) != Some(EMBEDDING_MAGIC.as_slice()) {
            return Err(Error::format(0, "bad magic, expected TMEB"));
        }
        let version = word(4)?;
        if version != EMBEDDING_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = word(8)? as usize;
        let rows = word(12)? as usize;
        let dim = word(16)? as usize;
        let header = EMBEDDING_HEADER_BYTES as usize;
        let expected = count
            .checked_mul(rows)
            .and_then(|n| n.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(header))
            .ok_or_else(|| Error::format(8, "declared size overflows"))?;
        if bytes.len() < expected {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated: expected {expected} bytes"),
            ));
        }
        if bytes.len() > expected {
            return Err(Error::format(expected as u64, "trailing bytes after data"));
        }
        let mut floats = bytes[header..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
        let items = (0..count)
            .map(|_| {
                (0..rows)
                    .map(|_| floats.by_ref().take(dim).collect())
                    .collect()
            })
            .collect();
        Ok(Self {
            rows_per_item: rows,
            dim,
            items,
        })
    }
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    fs::write(path, table.encode()?).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::decode(&bytes)
}

pub const TEXTS_FILE: &str = "texts.tmeb";
pub const VIDEOS_FILE: &str = "videos.tmeb";
pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "pair_id,split,text_file_offset,video_file_offset";

fn tables(records: &[PairRecord]) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let first = records.first();
    let c = first.map_or(0, |r| r.text.features.len());
    let frames = first.map_or(0, |r| r.video.frames.len());
    let texts = EmbeddingTable::new(1, c, records.iter().map(|r| vec![r.text.features.clone()]).collect())?;
    let videos = EmbeddingTable::new(frames, c, records.iter().map(|r| r.video.frames.clone()).collect())?;
    Ok((texts, videos))
}

/// Writes `texts.tmeb`, `videos.tmeb` and `manifest.csv` into `dir`.
pub fn write_dataset(dir: &Path, records: &[PairRecord]) -> Result<()> {
    let (texts, videos) = tables(records)?;
    write_embeddings(&dir.join(TEXTS_FILE), &texts)?;
    write_embeddings(&dir.join(VIDEOS_FILE), &videos)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (k, r) in records.iter().enumerate() {
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            r.pair_id,
            r.split,
            texts.item_offset(k),
            videos.item_offset(k)
        ));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<PairRecord>> {
    let texts = read_embeddings(&dir.join(TEXTS_FILE))?;
    let videos = read_embeddings(&dir.join(VIDEOS_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format(0, format!("{} has an unexpected header", path.display())));
    }
    let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
    if rows.len() != texts.items.len() || rows.len() != videos.items.len() {
        return Err(Error::format(
            0,
            format!(
                "manifest lists {} pairs, files hold {} texts and {} videos",
                rows.len(),
                texts.items.len(),
                videos.items.len()
            ),
        ));
    }
    rows.iter()
        .enumerate()
        .map(|(k, line)| {
            let bad = || Error::format(0, format!("manifest line {} is malformed: `{line}`", k + 2));
            let fields: Vec<&str> = line.split(',').collect();
            let [id, split, t_off, v_off] = fields[..] else {
                return Err(bad());
            };
            let id: u64 = id.parse().map_err(|_| bad())?;
            let split: Split = split.parse().map_err(|_| bad())?;
            if t_off.parse::<u64>().ok() != Some(texts.item_offset(k))
                || v_off.parse::<u64>().ok() != Some(videos.item_offset(k))
            {
                return Err(bad());
            }
            Ok(PairRecord {
                pair_id: id,
                text: RawText {
                    id,
                    features: texts.items[k][0].clone(),
                },
                video: RawVideo {
                    id,
                    frames: videos.items[k].clone(),
                },
                split,
            })
        })
        .collect()
}
