use serde::{Deserialize, Serialize};

use super::{aggregate_task, overall_average, RawMetrics};
use crate::error::{Error, Result};
use crate::synthbench::TaskKind;

/// Published per-metric values with their printed averages.
pub const FIXTURE_JSON: &str = include_str!("../../fixtures/table1_fixture.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub task: String,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrintedRow {
    pub method: String,
    pub values: Vec<f64>,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrintedTable {
    pub name: String,
    pub columns: Vec<Column>,
    pub rows: Vec<PrintedRow>,
}

/// `metric_tables` hold raw metric pairs per task; `score_tables` hold one
/// score per task, with ordinal columns stored as the mean error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrintedTables {
    pub metric_tables: Vec<PrintedTable>,
    pub score_tables: Vec<PrintedTable>,
}

impl PrintedTables {
    pub fn load() -> Result<Self> {
        Ok(serde_json::from_str(FIXTURE_JSON)?)
    }
}

impl PrintedTable {
    /// Recomputed average of every row from a metric table.
    pub fn averages_from_metrics(&self) -> Result<Vec<(String, f64, f64)>> {
        self.rows
            .iter()
            .map(|row| {
                if row.values.len() != 2 * self.columns.len() {
                    return Err(Error::Data(format!("row {} has wrong width", row.method)));
                }
                let scores = self
                    .columns
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let raw = RawMetrics::from_pair(c.kind, row.values[2 * i], row.values[2 * i + 1]);
                        aggregate_task(c.kind, &raw)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((row.method.clone(), overall_average(&scores)?, row.avg))
            })
            .collect()
    }

    /// Recomputed average of every row from a score table.
    pub fn averages_from_scores(&self) -> Result<Vec<(String, f64, f64)>> {
        self.rows
            .iter()
            .map(|row| {
                if row.values.len() != self.columns.len() {
                    return Err(Error::Data(format!("row {} has wrong width", row.method)));
                }
                let scores: Vec<f64> = self
                    .columns
                    .iter()
                    .zip(&row.values)
                    .map(|(c, &v)| match c.kind {
                        TaskKind::Ordinal => 1.0 - v,
                        _ => v,
                    })
                    .collect();
                Ok((row.method.clone(), overall_average(&scores)?, row.avg))
            })
            .collect()
    }
}
