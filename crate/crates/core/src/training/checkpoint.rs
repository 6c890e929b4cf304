//! Binary checkpoints: magic `IMNAV`, a version byte, the configuration as
//! length-prefixed text, then named arrays. Every integer and float is
//! little-endian and 32 bits wide.
//!
//! ```text
//! "IMNAV" u8:version
//! u32:len  utf8 config ([agent] and [train] key = value sections)
//! u32:count  count × array            parameters
//! u32:count  count × array            optimizer moments, step counts,
//!                                     iteration and RNG state
//! array := u32:len name  u32:rank  rank × u32:dim  product(dims) × word
//! ```

use std::fs;
use std::path::Path;

use super::config::TrainConfig;
use crate::agent::{Agent, AgentConfig};
use crate::error::{Error, Result};
use crate::numcore::{Adam, Tensor};
use crate::rng::{self, StreamRng};
use crate::sections;

pub const MAGIC: &[u8; 5] = b"IMNAV";
pub const VERSION: u8 = 1;

/// Everything needed to resume training bit-for-bit.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub agent: Agent,
    pub train: TrainConfig,
    pub adam: Adam<f32>,
    pub iteration: usize,
    pub rng: StreamRng,
}

fn config_text(agent: &AgentConfig, train: &TrainConfig) -> String {
    let mut s = String::from("[agent]\n");
    for (k, v) in agent.to_kv() {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s.push_str("[train]\n");
    for (k, v) in train.to_kv() {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

fn parse_config(text: &str) -> Result<(AgentConfig, TrainConfig)> {
    let secs = sections::parse(text)?;
    let mut agent = AgentConfig::new(1, 1, 1, 1);
    let mut train = TrainConfig::default();
    for s in &secs {
        for (_, k, v) in sections::key_values(s)? {
            match s.name.as_str() {
                "agent" => agent.set(&k, &v)?,
                "train" => train.set(&k, &v)?,
                other => return Err(Error::Format(format!("unexpected checkpoint section [{other}]"))),
            }
        }
    }
    Ok((agent, train))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }

    fn array(&mut self, name: &str, rows: usize, cols: usize, words: impl Iterator<Item = u32>) {
        self.bytes(name.as_bytes());
        self.u32(2);
        self.u32(rows as u32);
        self.u32(cols as u32);
        for w in words {
            self.u32(w);
        }
    }
}

struct Array {
    name: String,
    dims: Vec<usize>,
    words: Vec<u32>,
}

impl Array {
    fn floats(&self) -> Vec<f32> {
        self.words.iter().map(|&w| f32::from_bits(w)).collect()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn bytes(&mut self) -> Result<&[u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn array(&mut self) -> Result<Array> {
        let name = String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("array {name:?} has implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("array too large".into()))?;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
        let words = raw.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Array { name, dims, words })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.push(VERSION);
        w.bytes(config_text(&self.agent.config, &self.train).as_bytes());
        let params = &self.agent.params;
        w.u32(params.len() as u32);
        for (_, p) in params.iter() {
            w.array(&p.name, p.value.rows(), p.value.cols(), p.value.data().iter().map(|x| x.to_bits()));
        }
        w.u32(2 * params.len() as u32 + 3);
        for ((_, p), m) in params.iter().zip(self.adam.first_moments()) {
            w.array(&format!("adam.m/{}", p.name), p.value.rows(), p.value.cols(), m.iter().map(|x| x.to_bits()));
        }
        for ((_, p), v) in params.iter().zip(self.adam.second_moments()) {
            w.array(&format!("adam.v/{}", p.name), p.value.rows(), p.value.cols(), v.iter().map(|x| x.to_bits()));
        }
        w.array("adam.t", 1, params.len(), self.adam.steps().iter().copied());
        let it = self.iteration as u64;
        w.array("iteration", 1, 2, [it as u32, (it >> 32) as u32].into_iter());
        let state = rng::save_state(&self.rng);
        w.array("rng", 1, state.len(), state.into_iter());
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 6 || &buf[..5] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if buf[5] != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", buf[5])));
        }
        let mut r = Reader { buf, pos: 6 };
        let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let (agent_cfg, train) = parse_config(text).map_err(|e| Error::Format(format!("config block: {e}")))?;
        let mut agent = Agent::new(agent_cfg, 0).map_err(|e| Error::Format(format!("config block: {e}")))?;

        let n = r.u32()? as usize;
        if n != agent.params.len() {
            return Err(Error::Format(format!("checkpoint holds {n} parameters, configuration implies {}", agent.params.len())));
        }
        for _ in 0..n {
            let a = r.array()?;
            let p = agent.params.by_name_mut(&a.name).ok_or_else(|| Error::Format(format!("unknown parameter {:?}", a.name)))?;
            if a.dims != [p.value.rows(), p.value.cols()] {
                return Err(Error::Format(format!("parameter {:?} has dims {:?}, expected {:?}", a.name, a.dims, p.value.shape())));
            }
            p.value = Tensor::new(a.dims[0], a.dims[1], a.floats())?;
        }

        let extra = r.u32()? as usize;
        let mut found = std::collections::HashMap::new();
        for _ in 0..extra {
            let a = r.array()?;
            found.insert(a.name.clone(), a);
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
        }
        let mut take = |name: &str| found.remove(name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name:?}")));
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (_, p) in agent.params.iter() {
            for (prefix, out) in [("adam.m/", &mut m), ("adam.v/", &mut v)] {
                let a = take(&format!("{prefix}{}", p.name))?;
                if a.words.len() != p.value.len() {
                    return Err(Error::Format(format!("moment {:?} has the wrong length", a.name)));
                }
                out.push(a.floats());
            }
        }
        let steps = take("adam.t")?.words;
        if steps.len() != n {
            return Err(Error::Format("adam.t has the wrong length".into()));
        }
        let it = take("iteration")?.words;
        if it.len() != 2 {
            return Err(Error::Format("iteration record must hold two words".into()));
        }
        let rng = rng::load_state(&take("rng")?.words).ok_or_else(|| Error::Format("rng record must hold 14 words".into()))?;
        Ok(Checkpoint {
            agent,
            train,
            adam: Adam::from_parts(m, v, steps),
            iteration: (it[0] as u64 | (it[1] as u64) << 32) as usize,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
