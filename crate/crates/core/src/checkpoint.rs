//! Versioned binary checkpoints.
//!
//! Layout, all little-endian: magic `TMCK`, u32 version, parameter table,
//! optimizer table, u32-length-prefixed config text, two u64 words of rng
//! position. A table is a u32 entry count followed by entries of
//! `u32 name length, utf-8 name, u32 rank, u32 dims…, f64 data…`.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelParameters, ParamName};
use crate::trainer::{OptimizerState, TrainState};

const MAGIC: &[u8; 4] = b"TMCK";
const VERSION: u32 = 1;
const TEXT_PROJECTION: &str = "encoder.text_projection";
const FRAME_PROJECTION: &str = "encoder.frame_projection";
const STEP_ENTRY: &str = "step";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

type Entry = (String, Vec<u32>, Vec<f64>);

fn dims(shape: &[usize]) -> Vec<u32> {
    shape.iter().map(|&d| d as u32).collect()
}

fn parameter_entries(params: &ModelParameters) -> Vec<Entry> {
    let mut out: Vec<Entry> = ParamName::ALL
        .into_iter()
        .map(|p| (p.as_str().to_string(), dims(&params.shape(p)), params.get(p).to_vec()))
        .collect();
    for (name, m) in [
        (TEXT_PROJECTION, &params.encoders.text_projection),
        (FRAME_PROJECTION, &params.encoders.frame_projection),
    ] {
        out.push((name.to_string(), dims(&[m.rows(), m.cols()]), m.as_slice().to_vec()));
    }
    out
}

fn optimizer_entries(state: &OptimizerState, params: &ModelParameters) -> Vec<Entry> {
    let mut out = vec![(STEP_ENTRY.to_string(), vec![], vec![state.step as f64])];
    for (prefix, table) in [("m", &state.first), ("v", &state.second)] {
        for (name, values) in table {
            out.push((format!("{prefix}.{name}"), dims(&params.shape(*name)), values.clone()));
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_table(out: &mut Vec<u8>, entries: &[Entry]) {
    put_u32(out, entries.len() as u32);
    for (name, shape, data) in entries {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, shape.len() as u32);
        shape.iter().for_each(|&d| put_u32(out, d));
        data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let params = &self.state.params;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_table(&mut out, &parameter_entries(params));
        put_table(&mut out, &optimizer_entries(&self.state.optimizer, params));
        let text = self.config.to_text();
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        let (lo, hi) = self.state.rng_position;
        out.extend_from_slice(&lo.to_le_bytes());
        out.extend_from_slice(&hi.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected TMCK"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let param_table = r.table()?;
        let opt_table = r.table()?;
        let text_len = r.u32()? as usize;
        let text_at = r.pos as u64;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::format(text_at, "config block is not utf-8"))?;
        let config = RunConfig::from_text(text)
            .map_err(|e| Error::format(text_at, format!("config block rejected: {e}")))?;
        let rng_position = (r.u64()?, r.u64()?);
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after checkpoint"));
        }

        let mut params = ModelParameters::init(&config.train.model_spec(config.mode), config.train.seed)
            .map_err(|e| Error::format(text_at, format!("config block describes no model: {e}")))?;
        let mut table = Lookup(param_table);
        for p in ParamName::ALL {
            table.fill(p.as_str(), params.get_mut(p))?;
        }
        table.fill(TEXT_PROJECTION, params.encoders.text_projection.as_mut_slice())?;
        table.fill(FRAME_PROJECTION, params.encoders.frame_projection.as_mut_slice())?;

        let mut optimizer = OptimizerState::new(&params);
        let mut table = Lookup(opt_table);
        let mut step = [0.0];
        table.fill(STEP_ENTRY, &mut step)?;
        optimizer.step = step[0] as u64;
        for (prefix, slots) in [("m", &mut optimizer.first), ("v", &mut optimizer.second)] {
            for (name, values) in slots.iter_mut() {
                table.fill(&format!("{prefix}.{name}"), values)?;
            }
        }
        Ok(Self {
            config,
            state: TrainState {
                params,
                optimizer,
                rng_position,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Decoded entries with the byte offset each started at.
struct Lookup(Vec<(u64, Entry)>);

impl Lookup {
    fn fill(&mut self, name: &str, dst: &mut [f64]) -> Result<()> {
        let (at, (_, _, data)) = self
            .0
            .iter()
            .find(|(_, (n, _, _))| n == name)
            .ok_or_else(|| Error::format(0, format!("checkpoint lacks entry `{name}`")))?;
        if data.len() != dst.len() {
            return Err(Error::format(
                *at,
                format!("entry `{name}` holds {} values, expected {}", data.len(), dst.len()),
            ));
        }
        dst.copy_from_slice(data);
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.bytes.len() as u64, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn table(&mut self) -> Result<Vec<(u64, Entry)>> {
        let count = self.u32()?;
        (0..count)
            .map(|_| {
                let at = self.pos as u64;
                let len = self.u32()? as usize;
                let name = std::str::from_utf8(self.take(len)?)
                    .map_err(|_| Error::format(at, "entry name is not utf-8"))?
                    .to_string();
                let rank = self.u32()?;
                let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
                let size = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
                let size = size
                    .filter(|&s| s.saturating_mul(8) <= self.bytes.len())
                    .ok_or_else(|| Error::format(at, format!("entry `{name}` has an impossible shape")))?;
                let data = self
                    .take(size * 8)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                Ok((at, (name, shape, data)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, split, Split};
    use crate::trainer::train;

    fn trained() -> Checkpoint {
        let mut config = RunConfig::default();
        config.data.pairs = 16;
        config.data.test_pairs = 0;
        config.data.concepts = 6;
        config.train.concepts = 6;
        config.train.dim = 8;
        config.train.frames = 4;
        config.train.batch_size = 8;
        config.train.epochs = 1;
        let records = generate(&config.data).unwrap();
        let (state, _) = train(&config.train, &split(&records, Split::Train), &[], config.mode).unwrap();
        Checkpoint { config, state }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = trained();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        assert_eq!(&bytes[..4], b"TMCK");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tmck");
        let ck = trained();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let missing = Checkpoint::load(&dir.path().join("nope.tmck")).unwrap_err();
        assert_eq!(missing.exit_code(), 2);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let bytes = trained().encode();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 4, .. })));
        let cut = bytes.len() - 3;
        assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(Checkpoint::decode(&longer), Err(Error::Format { .. })));
    }
}
