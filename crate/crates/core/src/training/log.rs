//! Per-step training log rows and their CSV form.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const CSV_HEADER: &str =
    "step,stage,lr,ntp_loss,vq_loss,total_loss,mean_reward,mean_abs_advantage,codebook_utilization";

/// One optimizer step. Fields that do not apply to a stage are `None` and
/// written as empty cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub ntp_loss: Option<f64>,
    pub vq_loss: Option<f64>,
    pub total_loss: Option<f64>,
    pub mean_reward: Option<f64>,
    pub mean_abs_advantage: Option<f64>,
    pub codebook_utilization: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.stage,
            self.lr,
            cell(self.ntp_loss),
            cell(self.vq_loss),
            cell(self.total_loss),
            cell(self.mean_reward),
            cell(self.mean_abs_advantage),
            cell(self.codebook_utilization)
        )
    }
}

/// Sink for log rows; writes the header before the first row.
pub struct CsvLog<W: Write> {
    out: W,
    wrote_header: bool,
}

impl<W: Write> CsvLog<W> {
    pub fn new(out: W) -> Self {
        CsvLog { out, wrote_header: false }
    }

    /// Continue an existing file that already has its header.
    pub fn append(out: W) -> Self {
        CsvLog { out, wrote_header: true }
    }

    pub fn write(&mut self, row: &LogRow) -> Result<()> {
        if !self.wrote_header {
            writeln!(self.out, "{CSV_HEADER}")?;
            self.wrote_header = true;
        }
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
