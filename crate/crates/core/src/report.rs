//! Kernel-set ablation matrices and per-condition EER grids as CSV.

use std::fmt;
use std::str::FromStr;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::objectives::{condition_breakdown, ScoreRecord};
use crate::train::{evaluate, train, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Ce,
    CeCka,
}

impl LossMode {
    pub fn uses_cka(self) -> bool {
        self == LossMode::CeCka
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Ce => "ce",
            LossMode::CeCka => "ce+cka",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ce" => Ok(LossMode::Ce),
            "ce+cka" => Ok(LossMode::CeCka),
            other => Err(Error::config(format!("unknown loss mode {other:?} (expected ce or ce+cka)"))),
        }
    }
}

/// Parses `"3,7;11,15"` into `[[3, 7], [11, 15]]`.
pub fn parse_kernel_sets(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|set| {
            set.split(',')
                .map(|k| {
                    k.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::config(format!("kernel size {k:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

pub fn parse_modes(s: &str) -> Result<Vec<LossMode>> {
    s.split(',').map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellResult {
    /// Dev EER as a fraction.
    Eer(f64),
    Error(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub kernel_sets: Vec<Vec<usize>>,
    pub modes: Vec<LossMode>,
    /// `cells[row][col]` for kernel set `row` and mode `col`.
    pub cells: Vec<Vec<CellResult>>,
}

/// Trains and evaluates one cell with the base config's seed and data.
pub fn ablation_cell(base: &Config, kernels: &[usize], mode: LossMode, train_set: &Dataset, dev_set: &Dataset) -> Result<f64> {
    let mut cfg = base.clone();
    cfg.multiconv.kernels = kernels.to_vec();
    cfg.train.cka = mode.uses_cka();
    cfg.validate()?;
    let out = train(&cfg.model(), &cfg.train, train_set, dev_set, |_| {})?;
    Ok(evaluate(&out.best, dev_set, cfg.train.class_weights, false)?.eer.eer)
}

/// Runs every (kernel set, mode) cell. A failing cell is recorded and the
/// run continues.
pub fn ablation_run(
    base: &Config,
    kernel_sets: &[Vec<usize>],
    modes: &[LossMode],
    train_set: &Dataset,
    dev_set: &Dataset,
    mut on_cell: impl FnMut(&[usize], LossMode, &CellResult),
) -> AblationTable {
    let cells = kernel_sets
        .iter()
        .map(|ks| {
            modes
                .iter()
                .map(|&m| {
                    let r = match ablation_cell(base, ks, m, train_set, dev_set) {
                        Ok(e) => CellResult::Eer(e),
                        Err(e) => CellResult::Error(e.to_string()),
                    };
                    on_cell(ks, m, &r);
                    r
                })
                .collect()
        })
        .collect();
    AblationTable {
        kernel_sets: kernel_sets.to_vec(),
        modes: modes.to_vec(),
        cells,
    }
}

impl AblationTable {
    /// Rows are kernel sets, columns loss modes, cells dev EER% to two
    /// decimals or `ERROR`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kernels");
        for m in &self.modes {
            out.push(',');
            out.push_str(&m.to_string());
        }
        out.push('\n');
        for (ks, row) in self.kernel_sets.iter().zip(&self.cells) {
            let label: Vec<String> = ks.iter().map(|k| k.to_string()).collect();
            out.push_str(&format!("\"{}\"", label.join(",")));
            for c in row {
                out.push(',');
                match c {
                    CellResult::Eer(e) => out.push_str(&format!("{:.2}", 100.0 * e)),
                    CellResult::Error(_) => out.push_str("ERROR"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// EER% grid of `row_key` values × `col_key` values.
pub fn heatmap_csv(records: &[ScoreRecord], row_key: &str, col_key: &str) -> Result<String> {
    condition_breakdown(records, &[row_key, col_key])?.to_grid_csv()
}
