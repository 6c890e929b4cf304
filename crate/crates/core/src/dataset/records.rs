//! Line-record text format. One record per line: a type tag, then
//! whitespace-separated fields. Lines starting with `#` are comments (every
//! writer puts the producing command line and seed there).
//!
//! ```text
//! IMNAV-DATA 1
//! LIB     d_v classes background...
//! CLASS   id held_out(0|1) phrase_with_underscores prototype...
//! WORLD   id split k sigma_obs nodes
//! NODE    world node x y
//! EDGE    world node view neighbour
//! PLACE   world node view class
//! VIEW    world node view feature...
//! EPISODE id world mode target|- path...
//! INSTR   id episode mode token...
//! SEG     instruction start end class|-
//!
//! IMNAV-IMAG 1
//! IMAG    instruction sub_index true_class emitted_class feature...
//! ```
//!
//! World and library floats use the shortest representation that parses
//! back to the same `f64`. Imagination features are stored with nine
//! significant digits, which round-trips the `f32` values the agent reads.

use std::io::Write;
use std::str::{FromStr, SplitWhitespace};

use super::Dataset;
use crate::error::{Error, Result};
use crate::imagination::{Imagination, ImaginationSet};
use crate::instructions::Instruction;
use crate::world::{Episode, LandmarkClass, LandmarkLibrary, Mode, Split, World};

pub const HEADER_PREFIX: &str = "#";
const DATA_MAGIC: &str = "IMNAV-DATA";
const IMAG_MAGIC: &str = "IMNAV-IMAG";
const FORMAT_VERSION: &str = "1";

fn write_header<W: Write>(out: &mut W, magic: &str, header: &[String]) -> Result<()> {
    for h in header {
        writeln!(out, "{HEADER_PREFIX} {h}")?;
    }
    writeln!(out, "{magic} {FORMAT_VERSION}")?;
    Ok(())
}

fn floats(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "-".to_string(), |c| c.to_string())
}

pub fn write_dataset<W: Write>(out: &mut W, ds: &Dataset, header: &[String]) -> Result<()> {
    write_header(out, DATA_MAGIC, header)?;
    let lib = &ds.library;
    writeln!(out, "LIB {} {} {}", lib.d_v, lib.classes.len(), floats(&lib.background))?;
    for c in &lib.classes {
        writeln!(out, "CLASS {} {} {} {}", c.id, u8::from(c.held_out), c.phrase.join("_"), floats(&c.prototype))?;
    }
    for w in &ds.worlds {
        writeln!(out, "WORLD {} {} {} {} {}", w.id, w.split, w.k, w.sigma_obs, w.len())?;
        for (n, p) in w.positions.iter().enumerate() {
            writeln!(out, "NODE {} {n} {} {}", w.id, p[0], p[1])?;
        }
        for (n, vs) in w.views.iter().enumerate() {
            for &(v, m) in vs {
                writeln!(out, "EDGE {} {n} {v} {m}", w.id)?;
            }
        }
        for (n, ps) in w.placements.iter().enumerate() {
            for &(v, c) in ps {
                writeln!(out, "PLACE {} {n} {v} {c}", w.id)?;
            }
        }
        for (n, pano) in w.panoramas.iter().enumerate() {
            for (v, feat) in pano.chunks(w.d_v).enumerate() {
                writeln!(out, "VIEW {} {n} {v} {}", w.id, floats(feat))?;
            }
        }
    }
    for (e, ins) in ds.episodes.iter().zip(&ds.instructions) {
        let path = e.path.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(out, "EPISODE {} {} {} {} {path}", e.id, e.world, e.mode, opt(e.target))?;
        writeln!(out, "INSTR {} {} {} {}", ins.id, ins.episode, ins.mode, ins.tokens.join(" "))?;
        for (&(a, b), &c) in ins.gold_segments.iter().zip(&ins.gold_classes) {
            writeln!(out, "SEG {} {a} {b} {}", ins.id, opt(c))?;
        }
    }
    Ok(())
}

struct Fields<'a> {
    line: usize,
    it: SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, msg: msg.into() }
    }

    fn word(&mut self, what: &str) -> Result<&'a str> {
        let line = self.line;
        self.it.next().ok_or_else(|| Error::Parse { line, msg: format!("missing {what}") })
    }

    fn parse<T: FromStr>(&mut self, what: &str) -> Result<T> {
        let w = self.word(what)?;
        w.parse().map_err(|_| self.err(format!("bad {what} {w:?}")))
    }

    fn opt(&mut self, what: &str) -> Result<Option<usize>> {
        match self.word(what)? {
            "-" => Ok(None),
            w => w.parse().map(Some).map_err(|_| self.err(format!("bad {what} {w:?}"))),
        }
    }

    fn rest<T: FromStr>(&mut self, what: &str) -> Result<Vec<T>> {
        let line = self.line;
        self.it
            .by_ref()
            .map(|w| w.parse().map_err(|_| Error::Parse { line, msg: format!("bad {what} {w:?}") }))
            .collect()
    }

    fn exact<T: FromStr>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let v: Vec<T> = self.rest(what)?;
        if v.len() != n {
            return Err(self.err(format!("expected {n} {what} values, got {}", v.len())));
        }
        Ok(v)
    }

    fn end(&mut self) -> Result<()> {
        match self.it.next() {
            Some(w) => Err(self.err(format!("unexpected trailing field {w:?}"))),
            None => Ok(()),
        }
    }
}

/// Records after the magic line, as (line number, tag, fields).
fn records<'a>(text: &'a str, magic: &str) -> Result<Vec<(&'a str, Fields<'a>)>> {
    let mut out = Vec::new();
    let mut seen_magic = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with(HEADER_PREFIX) {
            continue;
        }
        let mut f = Fields { line: i + 1, it: line.split_whitespace() };
        let tag = f.word("tag")?;
        if !seen_magic {
            if tag != magic {
                return Err(Error::Format(format!("expected a {magic} file, found {tag:?}")));
            }
            let v = f.word("version")?;
            if v != FORMAT_VERSION {
                return Err(Error::Format(format!("unsupported {magic} version {v}")));
            }
            seen_magic = true;
            continue;
        }
        out.push((tag, f));
    }
    if !seen_magic {
        return Err(Error::Format(format!("missing {magic} line")));
    }
    Ok(out)
}

#[derive(Default)]
struct WorldParts {
    id: usize,
    split: Option<Split>,
    k: usize,
    sigma_obs: f64,
    positions: Vec<[f64; 2]>,
    views: Vec<Vec<(usize, usize)>>,
    placements: Vec<Vec<(usize, usize)>>,
    panoramas: Vec<Vec<f64>>,
}

pub fn read_dataset(text: &str) -> Result<Dataset> {
    let mut d_v = 0;
    let mut background = None;
    let mut n_classes = 0;
    let mut classes = Vec::new();
    let mut worlds: Vec<WorldParts> = Vec::new();
    let mut episodes = Vec::new();
    let mut instructions: Vec<Instruction> = Vec::new();

    fn world<'w>(worlds: &'w mut [WorldParts], f: &mut Fields<'_>) -> Result<(&'w mut WorldParts, usize)> {
        let w: usize = f.parse("world")?;
        let n: usize = f.parse("node")?;
        let line = f.line;
        let parts = worlds.get_mut(w).ok_or(Error::Parse { line, msg: format!("unknown world {w}") })?;
        if n >= parts.positions.len() {
            return Err(Error::Parse { line, msg: format!("node {n} out of range for world {w}") });
        }
        Ok((parts, n))
    }

    for (tag, mut f) in records(text, DATA_MAGIC)? {
        match tag {
            "LIB" => {
                d_v = f.parse("d_v")?;
                n_classes = f.parse("class count")?;
                background = Some(f.exact::<f64>(d_v, "background")?);
            }
            "CLASS" => {
                let id: usize = f.parse("class id")?;
                if id != classes.len() {
                    return Err(f.err(format!("class {id} out of order")));
                }
                let held_out = f.parse::<u8>("held_out")? != 0;
                let phrase = f.word("phrase")?.split('_').map(str::to_string).collect();
                let prototype = f.exact(d_v, "prototype")?;
                classes.push(LandmarkClass { id, phrase, prototype, held_out });
            }
            "WORLD" => {
                let id: usize = f.parse("world id")?;
                if id != worlds.len() {
                    return Err(f.err(format!("world {id} out of order")));
                }
                let split = f.parse("split")?;
                let k = f.parse("k")?;
                let sigma_obs = f.parse("sigma_obs")?;
                let n: usize = f.parse("node count")?;
                f.end()?;
                worlds.push(WorldParts {
                    id,
                    split: Some(split),
                    k,
                    sigma_obs,
                    positions: vec![[f64::NAN; 2]; n],
                    views: vec![Vec::new(); n],
                    placements: vec![Vec::new(); n],
                    panoramas: vec![vec![f64::NAN; k * d_v]; n],
                });
            }
            "NODE" => {
                let (w, n) = world(&mut worlds, &mut f)?;
                w.positions[n] = [f.parse("x")?, f.parse("y")?];
                f.end()?;
            }
            "EDGE" | "PLACE" => {
                let (w, n) = world(&mut worlds, &mut f)?;
                let pair = (f.parse("view")?, f.parse(if tag == "EDGE" { "neighbour" } else { "class" })?);
                f.end()?;
                if tag == "EDGE" { &mut w.views[n] } else { &mut w.placements[n] }.push(pair);
            }
            "VIEW" => {
                let (w, n) = world(&mut worlds, &mut f)?;
                let v: usize = f.parse("view")?;
                if v >= w.k {
                    return Err(f.err(format!("view {v} out of range")));
                }
                let feat: Vec<f64> = f.exact(d_v, "feature")?;
                w.panoramas[n][v * d_v..(v + 1) * d_v].copy_from_slice(&feat);
            }
            "EPISODE" => {
                let id = f.parse("episode id")?;
                let world = f.parse("world")?;
                let mode: Mode = f.parse("mode")?;
                let target = f.opt("target")?;
                let path: Vec<usize> = f.rest("path node")?;
                if path.len() < 2 {
                    return Err(f.err("episode path needs at least two nodes"));
                }
                episodes.push(Episode { id, world, start: path[0], goal: *path.last().expect("nonempty"), path, mode, target });
            }
            "INSTR" => {
                let id = f.parse("instruction id")?;
                let episode = f.parse("episode")?;
                let mode = f.parse("mode")?;
                let tokens = f.rest::<String>("token")?;
                instructions.push(Instruction { id, episode, tokens, gold_segments: Vec::new(), gold_classes: Vec::new(), mode });
            }
            "SEG" => {
                let id: usize = f.parse("instruction")?;
                let span = (f.parse("start")?, f.parse("end")?);
                let class = f.opt("class")?;
                f.end()?;
                let ins = instructions.last_mut().filter(|i| i.id == id).ok_or_else(|| f.err("SEG must follow its INSTR"))?;
                ins.gold_segments.push(span);
                ins.gold_classes.push(class);
            }
            other => return Err(f.err(format!("unknown record {other:?}"))),
        }
    }
    let background = background.ok_or_else(|| Error::Format("missing LIB record".into()))?;
    if classes.len() != n_classes {
        return Err(Error::Format(format!("LIB announces {n_classes} classes, found {}", classes.len())));
    }
    let library = LandmarkLibrary { d_v, classes, background };
    let worlds = worlds
        .into_iter()
        .map(|p| {
            if p.positions.iter().any(|q| q[0].is_nan()) || p.panoramas.iter().flatten().any(|x| x.is_nan()) {
                return Err(Error::Format(format!("world {} is missing node or view records", p.id)));
            }
            World::from_parts(p.id, p.split.expect("set"), p.k, p.sigma_obs, p.positions, p.views, p.placements, p.panoramas, &library)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_parts(library, worlds, episodes, instructions)
}

pub fn write_imaginations<W: Write>(out: &mut W, set: &ImaginationSet, header: &[String]) -> Result<()> {
    write_header(out, IMAG_MAGIC, header)?;
    for (id, list) in set {
        for im in list {
            let feat = im.feature.iter().map(|&x| format!("{:.8e}", x as f32)).collect::<Vec<_>>().join(" ");
            writeln!(out, "IMAG {id} {} {} {} {feat}", im.sub_index, im.true_class, im.emitted_class)?;
        }
    }
    Ok(())
}

pub fn read_imaginations(text: &str, d_v: usize) -> Result<ImaginationSet> {
    let mut set = ImaginationSet::new();
    for (tag, mut f) in records(text, IMAG_MAGIC)? {
        if tag != "IMAG" {
            return Err(f.err(format!("unknown record {tag:?}")));
        }
        let id: usize = f.parse("instruction")?;
        let sub_index = f.parse("sub index")?;
        let true_class = f.parse("true class")?;
        let emitted_class = f.parse("emitted class")?;
        let feature = f.exact(d_v, "feature")?;
        set.entry(id).or_default().push(Imagination { feature, sub_index, true_class, emitted_class });
    }
    Ok(set)
}
