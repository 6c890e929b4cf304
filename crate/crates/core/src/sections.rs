//! Line-oriented data files split into `[section]` blocks. `#` starts a
//! comment; blank lines are ignored.

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub name: String,
    /// (1-based line number, trimmed content)
    pub lines: Vec<(usize, String)>,
}

pub fn parse(text: &str) -> Result<Vec<Section>> {
    let mut out: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            out.push(Section { name: name.trim().to_string(), lines: Vec::new() });
            continue;
        }
        match out.last_mut() {
            Some(s) => s.lines.push((i + 1, line.to_string())),
            None => return Err(Error::Parse { line: i + 1, msg: "content before the first [section]".into() }),
        }
    }
    Ok(out)
}

/// Lines of every section called `name`, in file order.
pub fn lines<'a>(sections: &'a [Section], name: &'a str) -> impl Iterator<Item = &'a str> {
    sections.iter().filter(move |s| s.name == name).flat_map(|s| s.lines.iter().map(|(_, l)| l.as_str()))
}

/// Parses `key = value` lines of one section.
pub fn key_values(section: &Section) -> Result<Vec<(usize, String, String)>> {
    section
        .lines
        .iter()
        .map(|(n, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: *n, msg: format!("expected key = value, got {l:?}") })?;
            Ok((*n, k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}
