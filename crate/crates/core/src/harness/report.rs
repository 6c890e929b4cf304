use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::{format_table, MetricsRecord, TSV_COLUMNS};

/// One metrics row as written: rates in percent, lengths in world units.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub condition: String,
    pub split: String,
    pub policy: String,
    pub sr: f64,
    pub spl: f64,
    pub ne: f64,
    pub tl: f64,
    pub rgs: Option<f64>,
    pub rgspl: Option<f64>,
    pub n: usize,
    pub seed: u64,
}

impl MetricsRow {
    pub fn from_record(r: &MetricsRecord) -> Self {
        // Goes through the written cells so that reports over files and over
        // in-memory runs agree to the last digit.
        let cells = r.cells();
        Self::from_cells(&cells.iter().map(String::as_str).collect::<Vec<_>>(), 0).expect("own cells parse")
    }

    fn from_cells(c: &[&str], line: usize) -> Result<Self> {
        if c.len() != TSV_COLUMNS.len() {
            return Err(Error::Parse { line, msg: format!("expected {} columns, found {}", TSV_COLUMNS.len(), c.len()) });
        }
        let num = |i: usize| -> Result<f64> {
            c[i].parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Parse { line, msg: format!("bad {} value {:?}", TSV_COLUMNS[i], c[i]) })
        };
        let opt = |i: usize| -> Result<Option<f64>> { if c[i] == "-" { Ok(None) } else { num(i).map(Some) } };
        let int = |i: usize| -> Result<u64> {
            c[i].parse().map_err(|_| Error::Parse { line, msg: format!("bad {} value {:?}", TSV_COLUMNS[i], c[i]) })
        };
        if c[..3].iter().any(|s| s.is_empty()) {
            return Err(Error::Parse { line, msg: "empty label column".into() });
        }
        Ok(Self {
            condition: c[0].to_string(),
            split: c[1].to_string(),
            policy: c[2].to_string(),
            sr: num(3)?,
            spl: num(4)?,
            ne: num(5)?,
            tl: num(6)?,
            rgs: opt(7)?,
            rgspl: opt(8)?,
            n: int(9)? as usize,
            seed: int(10)?,
        })
    }
}

/// Parses a metrics file. Lines starting with `#` are comments; the column
/// header is required.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    let mut header = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if !header {
            if cells != TSV_COLUMNS {
                return Err(Error::Parse { line: n, msg: "missing metrics column header".into() });
            }
            header = true;
            continue;
        }
        rows.push(MetricsRow::from_cells(&cells, n)?);
    }
    if !header {
        return Err(Error::Parse { line: 0, msg: "no metrics column header".into() });
    }
    Ok(rows)
}

/// Mean and sample standard deviation (absent for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub sd: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.len() > 1).then(|| (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub condition: String,
    pub split: String,
    pub policy: String,
    pub runs: usize,
    pub sr: Stat,
    pub spl: Stat,
    pub ne: Stat,
    pub tl: Stat,
}

pub const SUMMARY_COLUMNS: [&str; 12] =
    ["condition", "split", "policy", "runs", "SR", "SR_sd", "SPL", "SPL_sd", "NE", "NE_sd", "TL", "TL_sd"];

impl SummaryRow {
    pub fn cells(&self) -> Vec<String> {
        let sd = |s: &Stat, p: usize| s.sd.map_or_else(|| "-".to_string(), |x| format!("{x:.p$}"));
        vec![
            self.condition.clone(),
            self.split.clone(),
            self.policy.clone(),
            self.runs.to_string(),
            format!("{:.2}", self.sr.mean),
            sd(&self.sr, 3),
            format!("{:.2}", self.spl.mean),
            sd(&self.spl, 3),
            format!("{:.3}", self.ne.mean),
            sd(&self.ne, 3),
            format!("{:.3}", self.tl.mean),
            sd(&self.tl, 3),
        ]
    }
}

/// Groups rows by (condition, split, policy), in order of first appearance.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, String, String), Vec<&MetricsRow>)> = Vec::new();
    for r in rows {
        let key = (r.condition.clone(), r.split.clone(), r.policy.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((condition, split, policy), g)| {
            let stat = |f: fn(&MetricsRow) -> f64| Stat::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                condition,
                split,
                policy,
                runs: g.len(),
                sr: stat(|r| r.sr),
                spl: stat(|r| r.spl),
                ne: stat(|r| r.ne),
                tl: stat(|r| r.tl),
            }
        })
        .collect()
}

pub fn write_summary_tsv(rows: &[SummaryRow]) -> String {
    let mut s = SUMMARY_COLUMNS.join("\t");
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.cells().join("\t"));
    }
    s
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    format_table(&SUMMARY_COLUMNS, &rows.iter().map(SummaryRow::cells).collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Test {
    /// lhs − rhs ≥ margin.
    AtLeast(f64),
    /// |lhs − rhs| ≤ tolerance.
    Within(f64),
}

/// A directional claim about mean SR between two conditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hypothesis {
    pub name: &'static str,
    pub lhs: &'static str,
    pub rhs: &'static str,
    /// Compare on the multi-landmark subset instead of the whole split.
    pub multi: bool,
    pub test: Test,
}

/// Suffix of condition labels for rows restricted to episodes with at least
/// two imaginations.
pub const MULTI_SUFFIX: &str = ":multi";

pub const HYPOTHESES: [Hypothesis; 12] = [
    Hypothesis { name: "imagine>baseline", lhs: "imagine", rhs: "baseline", multi: false, test: Test::AtLeast(5.0) },
    Hypothesis { name: "correct>=null", lhs: "imagine", rhs: "null_test", multi: false, test: Test::AtLeast(0.0) },
    Hypothesis { name: "correct>=wrong", lhs: "imagine", rhs: "wrong_test", multi: false, test: Test::AtLeast(0.0) },
    Hypothesis { name: "correct>wrong", lhs: "imagine", rhs: "wrong_test", multi: false, test: Test::AtLeast(3.0) },
    Hypothesis { name: "sequential>goal_only", lhs: "imagine", rhs: "goal_only", multi: true, test: Test::AtLeast(2.0) },
    Hypothesis { name: "goal_only>=baseline", lhs: "goal_only", rhs: "baseline", multi: false, test: Test::AtLeast(0.0) },
    Hypothesis { name: "cosine>=no_aux", lhs: "imagine", rhs: "no_aux", multi: false, test: Test::AtLeast(0.0) },
    Hypothesis { name: "infonce~cosine", lhs: "infonce", rhs: "imagine", multi: false, test: Test::Within(2.0) },
    Hypothesis { name: "imagine>=text_only", lhs: "imagine", rhs: "text_only", multi: false, test: Test::AtLeast(0.0) },
    Hypothesis {
        name: "mlp>=transformer_encoder",
        lhs: "imagine",
        rhs: "transformer_encoder",
        multi: false,
        test: Test::AtLeast(0.0),
    },
    Hypothesis { name: "text_concat>=visual_concat", lhs: "imagine", rhs: "visual_concat", multi: false, test: Test::AtLeast(0.0) },
    Hypothesis { name: "early>=late", lhs: "imagine", rhs: "late_fusion", multi: false, test: Test::AtLeast(0.0) },
];

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub hypothesis: Hypothesis,
    pub delta: f64,
    pub pass: bool,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "hypothesis {}: {} (Δ={:+.1} SR)",
            self.hypothesis.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.delta
        )
    }
}

/// Verdicts for every hypothesis whose two conditions have rows on `split`.
pub fn verdicts(summary: &[SummaryRow], split: &str) -> Vec<Verdict> {
    let mean = |condition: &str| summary.iter().find(|r| r.condition == condition && r.split == split).map(|r| r.sr.mean);
    HYPOTHESES
        .iter()
        .filter_map(|h| {
            let label = |c: &str| if h.multi { format!("{c}{MULTI_SUFFIX}") } else { c.to_string() };
            let delta = mean(&label(h.lhs))? - mean(&label(h.rhs))?;
            let pass = match h.test {
                Test::AtLeast(m) => delta >= m,
                Test::Within(t) => delta.abs() <= t,
            };
            Some(Verdict { hypothesis: *h, delta, pass })
        })
        .collect()
}
