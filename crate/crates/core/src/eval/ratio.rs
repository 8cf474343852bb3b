use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Relation, Role};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioAxis {
    Relation,
    Role,
}

impl RatioAxis {
    pub fn columns(self) -> Vec<String> {
        match self {
            RatioAxis::Relation => Relation::ALL.iter().map(ToString::to_string).collect(),
            RatioAxis::Role => Role::ALL.iter().map(ToString::to_string).collect(),
        }
    }
}

/// Propaganda/benign counts per teacher class, with a totals column.
///
/// The totals count every labeled sentence, including those that carry no
/// class on this axis (the first sentence of an article has no preceding
/// sentence, hence no relation).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioTable {
    pub axis: RatioAxis,
    pub columns: Vec<String>,
    pub propaganda: Vec<u64>,
    pub benign: Vec<u64>,
    pub total_propaganda: u64,
    pub total_benign: u64,
}

fn cell(count: u64, column_total: u64) -> String {
    if column_total == 0 {
        format!("{count} (none)")
    } else {
        format!("{count} ({:.2})", 100.0 * count as f64 / column_total as f64)
    }
}

impl RatioTable {
    pub fn column_total(&self, col: usize) -> u64 {
        self.propaganda[col] + self.benign[col]
    }

    /// Share of `label` within a column; `None` for an empty column.
    pub fn ratio(&self, label: Label, col: usize) -> Option<f64> {
        let total = self.column_total(col);
        let count = match label {
            Label::Propaganda => self.propaganda[col],
            Label::Benign => self.benign[col],
        };
        (total > 0).then(|| count as f64 / total as f64)
    }

    pub fn overall_ratio(&self, label: Label) -> Option<f64> {
        let total = self.total_propaganda + self.total_benign;
        let count = match label {
            Label::Propaganda => self.total_propaganda,
            Label::Benign => self.total_benign,
        };
        (total > 0).then(|| count as f64 / total as f64)
    }

    /// Formatted cells of one row, totals last: `count (percent)` or
    /// `count (none)` for an empty column.
    pub fn row_cells(&self, label: Label) -> Vec<String> {
        let counts = match label {
            Label::Propaganda => &self.propaganda,
            Label::Benign => &self.benign,
        };
        let mut cells: Vec<String> = counts
            .iter()
            .enumerate()
            .map(|(c, &n)| cell(n, self.column_total(c)))
            .collect();
        let total = match label {
            Label::Propaganda => self.total_propaganda,
            Label::Benign => self.total_benign,
        };
        cells.push(cell(total, self.total_propaganda + self.total_benign));
        cells
    }

    /// Aligned plain-text table.
    pub fn render(&self) -> String {
        let mut header = vec![String::new()];
        header.extend(self.columns.iter().cloned());
        header.push("Total".into());
        let rows = [Label::Propaganda, Label::Benign].map(|l| {
            let mut r = vec![l.to_string()];
            r.extend(self.row_cells(l));
            r
        });
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                std::iter::once(&header)
                    .chain(rows.iter())
                    .map(|r| r[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&header).chain(rows.iter()) {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join(" | ").trim_end());
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("label");
        for c in &self.columns {
            let _ = write!(out, "\t{c}");
        }
        out.push_str("\tTotal\n");
        for label in [Label::Propaganda, Label::Benign] {
            out.push_str(&label.to_string());
            for c in self.row_cells(label) {
                let _ = write!(out, "\t{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Cross-tabulates gold sentence labels against the teacher's argmax class.
/// `classes[i] = None` leaves sentence `i` out of the class columns while
/// still counting it in the totals.
pub fn ratio_analysis(gold: &[Label], classes: &[Option<usize>], axis: RatioAxis) -> Result<RatioTable> {
    if gold.len() != classes.len() {
        return Err(Error::Validation(format!(
            "{} gold labels but {} teacher classes",
            gold.len(),
            classes.len()
        )));
    }
    let columns = axis.columns();
    let k = columns.len();
    let mut table = RatioTable {
        axis,
        columns,
        propaganda: vec![0; k],
        benign: vec![0; k],
        total_propaganda: 0,
        total_benign: 0,
    };
    for (label, class) in gold.iter().zip(classes) {
        let propaganda = label.is_propaganda();
        if propaganda {
            table.total_propaganda += 1;
        } else {
            table.total_benign += 1;
        }
        if let Some(c) = *class {
            if c >= k {
                return Err(Error::Validation(format!("class index {c} out of range for {k} columns")));
            }
            if propaganda {
                table.propaganda[c] += 1;
            } else {
                table.benign[c] += 1;
            }
        }
    }
    Ok(table)
}
