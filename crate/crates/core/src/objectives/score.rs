use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::eer::{eer_from_scores, EerResult};
use crate::error::{Error, Result};
use crate::features::{Label, Manifest};

/// One scored trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    pub llr: f64,
    pub label: Label,
    pub conditions: BTreeMap<String, String>,
}

/// `log p(x|bona fide) − log p(x|spoof)` for each row of `[B, 2]` logits.
/// The log-softmax normalizers cancel, leaving the logit difference.
pub fn llr(logits: &[f64]) -> Vec<f64> {
    logits.chunks_exact(2).map(|r| r[0] - r[1]).collect()
}

pub fn eer(records: &[ScoreRecord]) -> Result<EerResult> {
    let (mut bona, mut spoof) = (Vec::new(), Vec::new());
    for r in records {
        match r.label {
            Label::Bonafide => bona.push(r.llr),
            Label::Spoof => spoof.push(r.llr),
        }
    }
    eer_from_scores(&bona, &spoof)
}

/// `utt_id<TAB>llr` lines with shortest round-trip float formatting.
pub fn format_scores(records: &[ScoreRecord]) -> String {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{}\t{}", r.utt_id, r.llr).unwrap();
    }
    out
}

/// Writes a score file; refuses to overwrite.
pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    crate::io::write_new(path, format_scores(records).as_bytes())
}

pub fn parse_scores(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(format!("score line {} has no tab", i + 1)))?;
        let llr: f64 = v
            .trim()
            .parse()
            .map_err(|e| Error::data(format!("score line {}: {e}", i + 1)))?;
        if !llr.is_finite() {
            return Err(Error::data(format!("score line {}: non-finite llr", i + 1)));
        }
        out.push((id.to_string(), llr));
    }
    Ok(out)
}

/// Reads a score file and attaches labels and conditions from a manifest.
pub fn read_scores(path: &Path, manifest: &Manifest) -> Result<Vec<ScoreRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index: BTreeMap<&str, _> = manifest.rows.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    parse_scores(&text)?
        .into_iter()
        .map(|(id, llr)| {
            let row = index
                .get(id.as_str())
                .ok_or_else(|| Error::data(format!("scored utterance {id:?} is not in the manifest")))?;
            Ok(ScoreRecord {
                utt_id: id,
                llr,
                label: row.label,
                conditions: row.conditions.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakdownCell {
    /// `None` when the cell lacks one of the classes.
    pub eer: Option<EerResult>,
    pub n_bona: usize,
    pub n_spoof: usize,
}

/// Per-condition EERs keyed by the tuple of tag values along `axes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Breakdown {
    pub axes: Vec<String>,
    pub cells: BTreeMap<Vec<String>, BreakdownCell>,
}

pub fn condition_breakdown<S: AsRef<str>>(records: &[ScoreRecord], axes: &[S]) -> Result<Breakdown> {
    let axes: Vec<String> = axes.iter().map(|a| a.as_ref().to_string()).collect();
    let mut groups: BTreeMap<Vec<String>, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in records {
        let key = axes
            .iter()
            .map(|a| {
                r.conditions.get(a).cloned().ok_or_else(|| {
                    Error::config(format!("condition key {a:?} missing on utterance {:?}", r.utt_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        groups.entry(key).or_default().push(r);
    }
    let cells = groups
        .into_iter()
        .map(|(key, rs)| {
            let bona: Vec<f64> = rs.iter().filter(|r| r.label == Label::Bonafide).map(|r| r.llr).collect();
            let spoof: Vec<f64> = rs.iter().filter(|r| r.label == Label::Spoof).map(|r| r.llr).collect();
            let eer = if bona.is_empty() || spoof.is_empty() {
                None
            } else {
                Some(eer_from_scores(&bona, &spoof)?)
            };
            Ok((
                key,
                BreakdownCell {
                    eer,
                    n_bona: bona.len(),
                    n_spoof: spoof.len(),
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(Breakdown { axes, cells })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn pct(cell: Option<&BreakdownCell>) -> String {
    match cell.and_then(|c| c.eer) {
        Some(e) => format!("{:.2}", 100.0 * e.eer),
        None => String::new(),
    }
}

impl Breakdown {
    /// Long format: one row per cell, `axis…,n_bonafide,n_spoof,eer_pct`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<String> = self.axes.iter().map(|a| csv_field(a)).collect();
        header.extend(["n_bonafide".into(), "n_spoof".into(), "eer_pct".into()]);
        out.push_str(&header.join(","));
        out.push('\n');
        for (key, cell) in &self.cells {
            let mut row: Vec<String> = key.iter().map(|k| csv_field(k)).collect();
            row.push(cell.n_bona.to_string());
            row.push(cell.n_spoof.to_string());
            row.push(pct(Some(cell)));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Grid format for a two-axis breakdown: row values down, column values
    /// across, EER% to two decimals, blank where a cell is empty or absent.
    pub fn to_grid_csv(&self) -> Result<String> {
        if self.axes.len() != 2 {
            return Err(Error::config(format!(
                "a grid needs exactly two axes, got {}",
                self.axes.len()
            )));
        }
        let rows: std::collections::BTreeSet<&String> = self.cells.keys().map(|k| &k[0]).collect();
        let cols: std::collections::BTreeSet<&String> = self.cells.keys().map(|k| &k[1]).collect();
        let mut out = format!("{}\\{}", csv_field(&self.axes[0]), csv_field(&self.axes[1]));
        for c in &cols {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        out.push('\n');
        for r in &rows {
            out.push_str(&csv_field(r));
            for c in &cols {
                out.push(',');
                out.push_str(&pct(self.cells.get(&vec![(*r).clone(), (*c).clone()])));
            }
            out.push('\n');
        }
        Ok(out)
    }
}
