use std::collections::HashMap;
use std::io::Write;

use crate::complexity::FlopLedger;
use crate::error::{arg_err, Result};
use crate::voxelizer::Cell;

/// Attention weights over valid tokens of one region.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRegion {
    /// Token indices in slot order.
    pub tokens: Vec<usize>,
    pub cells: Vec<Cell>,
    /// `heads x n x n`, row = query, column = key.
    pub weights: Vec<f64>,
}

/// Recorded attention of one module.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub heads: usize,
    pub regions: Vec<TraceRegion>,
    pub ledger: FlopLedger,
    index: HashMap<usize, (usize, usize)>,
}

impl AttentionTrace {
    pub fn new(heads: usize, regions: Vec<TraceRegion>, ledger: FlopLedger) -> Self {
        let mut index = HashMap::new();
        for (r, region) in regions.iter().enumerate() {
            for (pos, &t) in region.tokens.iter().enumerate() {
                index.insert(t, (r, pos));
            }
        }
        Self { heads, regions, ledger, index }
    }

    /// Token index recorded at `cell`, if any.
    pub fn token_at(&self, cell: Cell) -> Option<usize> {
        self.regions.iter().find_map(|r| r.cells.iter().position(|c| *c == cell).map(|p| r.tokens[p]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub cell: Cell,
    pub per_head: Vec<f64>,
    pub mean: f64,
}

/// Attention of `query_token` over every valid key of its region.
pub fn export_attention(trace: &AttentionTrace, query_token: usize) -> Result<Vec<AttentionRecord>> {
    let &(r, i) =
        trace.index.get(&query_token).ok_or_else(|| arg_err!("token {query_token} is not in the attention trace"))?;
    let region = &trace.regions[r];
    let n = region.tokens.len();
    Ok(region
        .cells
        .iter()
        .enumerate()
        .map(|(j, &cell)| {
            let per_head: Vec<f64> = (0..trace.heads).map(|h| region.weights[(h * n + i) * n + j]).collect();
            let mean = per_head.iter().sum::<f64>() / trace.heads as f64;
            AttentionRecord { cell, per_head, mean }
        })
        .collect())
}

/// CSV with header `ix,iy,weight_head_0..weight_head_{H-1},weight_mean`.
pub fn write_attention_csv<W: Write>(records: &[AttentionRecord], heads: usize, mut out: W) -> Result<()> {
    let mut header = String::from("ix,iy");
    for h in 0..heads {
        header.push_str(&format!(",weight_head_{h}"));
    }
    header.push_str(",weight_mean");
    writeln!(out, "{header}")?;
    for rec in records {
        let mut line = format!("{},{}", rec.cell.ix, rec.cell.iy);
        for w in &rec.per_head {
            line.push_str(&format!(",{w:.9}"));
        }
        line.push_str(&format!(",{:.9}", rec.mean));
        writeln!(out, "{line}")?;
    }
    Ok(())
}
