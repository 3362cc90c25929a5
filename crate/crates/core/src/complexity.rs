//! Analytic complexity model and the measured multiply-accumulate ledger.
//!
//! One MAC is one multiply-add. The analytic side evaluates
//! `Ω(Conv) = h·w·k²·C²` and `Ω(SRA) = 4·S·h·w·C² + 2·H·S²·R²·h·w·C`;
//! the measured side is filled in by the kernels as they run.

use std::fmt::Write as _;
use std::ops::AddAssign;

/// Per-site MAC counters for one pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopLedger {
    pub qkv_proj: u64,
    pub out_proj: u64,
    pub attn_logits: u64,
    pub attn_apply: u64,
    pub mlp: u64,
    pub pillar_encoder: u64,
    pub dense_conv: u64,
    pub head: u64,
    /// Logit and apply MACs spent on padded key slots. Not part of `attn_*`.
    pub padded_attn: u64,
    /// Attention modules executed.
    pub attention_modules: u64,
    /// Valid token rows summed over attention modules.
    pub token_rows: u64,
    /// Σ N_r² over all regions of all modules.
    pub region_sq_sum: u64,
}

impl FlopLedger {
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn projections(&self) -> u64 {
        self.qkv_proj + self.out_proj
    }

    pub fn attention(&self) -> u64 {
        self.attn_logits + self.attn_apply
    }

    pub fn total(&self) -> u64 {
        self.projections() + self.attention() + self.mlp + self.pillar_encoder + self.dense_conv + self.head
    }

    pub fn counters(&self) -> [(&'static str, u64); 12] {
        [
            ("qkv_proj", self.qkv_proj),
            ("out_proj", self.out_proj),
            ("attn_logits", self.attn_logits),
            ("attn_apply", self.attn_apply),
            ("mlp", self.mlp),
            ("pillar_encoder", self.pillar_encoder),
            ("dense_conv", self.dense_conv),
            ("head", self.head),
            ("padded_attn", self.padded_attn),
            ("attention_modules", self.attention_modules),
            ("token_rows", self.token_rows),
            ("region_sq_sum", self.region_sq_sum),
        ]
    }
}

impl AddAssign for FlopLedger {
    fn add_assign(&mut self, o: Self) {
        self.qkv_proj += o.qkv_proj;
        self.out_proj += o.out_proj;
        self.attn_logits += o.attn_logits;
        self.attn_apply += o.attn_apply;
        self.mlp += o.mlp;
        self.pillar_encoder += o.pillar_encoder;
        self.dense_conv += o.dense_conv;
        self.head += o.head;
        self.padded_attn += o.padded_attn;
        self.attention_modules += o.attention_modules;
        self.token_rows += o.token_rows;
        self.region_sq_sum += o.region_sq_sum;
    }
}

/// `h·w·k²·C²` for one k x k, C -> C convolution layer.
pub fn conv_flops(h: u64, w: u64, k: u64, c: u64) -> u128 {
    h as u128 * w as u128 * (k as u128).pow(2) * (c as u128).pow(2)
}

/// The two terms of the sparse regional attention cost model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SraTerms {
    /// `4·S·h·w·C²`: Q, K, V and output projections.
    pub projection: f64,
    /// `2·H·S²·R²·h·w·C`: attention logits and weighted sum.
    pub attention: f64,
}

impl SraTerms {
    pub fn total(&self) -> f64 {
        self.projection + self.attention
    }
}

/// Evaluates both terms; `region_cells` is R² (cells per region).
pub fn sra_terms(h: f64, w: f64, c: f64, heads: f64, region_cells: f64, sparsity: f64) -> SraTerms {
    SraTerms {
        projection: 4.0 * sparsity * h * w * c * c,
        attention: 2.0 * heads * sparsity * sparsity * region_cells * h * w * c,
    }
}

/// `4·S·h·w·C² + 2·H·S²·R²·h·w·C` with an R x R region.
pub fn sra_flops(h: f64, w: f64, c: f64, heads: f64, r: f64, sparsity: f64) -> f64 {
    sra_terms(h, w, c, heads, r * r, sparsity).total()
}

/// Dimensions needed to put measured counters next to the formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    /// Grid rows (ny) and columns (nx).
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Cells per region (R² for square regions).
    pub region_cells: usize,
}

/// Measured counters alongside the analytic model, per attention module.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub shape: ModelShape,
    pub ledger: FlopLedger,
    pub modules: u64,
    /// Tokens per attention module.
    pub tokens: f64,
    pub sparsity: f64,
    pub measured_projection: f64,
    pub measured_attention: f64,
    pub measured_mlp: f64,
    pub formula: SraTerms,
    /// measured attention / formula attention term.
    pub attention_ratio: f64,
    /// measured attention / (formula attention term / H).
    pub attention_ratio_per_head: f64,
    pub measured_conv: u64,
    pub formula_conv: u128,
}

/// Builds the comparison from a completed instrumented pass.
pub fn measured_macs(ledger: &FlopLedger, shape: ModelShape) -> ComplexityReport {
    let modules = ledger.attention_modules;
    let per = |v: u64| if modules == 0 { 0.0 } else { v as f64 / modules as f64 };
    let tokens = per(ledger.token_rows);
    let hw = (shape.h * shape.w) as f64;
    let sparsity = tokens / hw;
    let formula = sra_terms(
        shape.h as f64,
        shape.w as f64,
        shape.channels as f64,
        shape.heads as f64,
        shape.region_cells as f64,
        sparsity,
    );
    let measured_attention = per(ledger.attention());
    let ratio = |m: f64, f: f64| if f == 0.0 { 0.0 } else { m / f };
    ComplexityReport {
        shape,
        ledger: *ledger,
        modules,
        tokens,
        sparsity,
        measured_projection: per(ledger.projections()),
        measured_attention,
        measured_mlp: per(ledger.mlp),
        formula,
        attention_ratio: ratio(measured_attention, formula.attention),
        attention_ratio_per_head: ratio(measured_attention, formula.attention / shape.heads as f64),
        measured_conv: ledger.dense_conv,
        formula_conv: 2 * conv_flops(shape.h as u64, shape.w as u64, 3, shape.channels as u64),
    }
}

impl ComplexityReport {
    fn rows(&self) -> Vec<(&'static str, String)> {
        let s = &self.shape;
        let mut rows = vec![
            ("h", s.h.to_string()),
            ("w", s.w.to_string()),
            ("channels", s.channels.to_string()),
            ("heads", s.heads.to_string()),
            ("hidden", s.hidden.to_string()),
            ("region_cells", s.region_cells.to_string()),
            ("attention_modules", self.modules.to_string()),
            ("tokens_per_module", format!("{}", self.tokens)),
            ("sparsity", format!("{:.6}", self.sparsity)),
            ("measured_projection_macs", format!("{}", self.measured_projection)),
            ("formula_projection_macs", format!("{}", self.formula.projection)),
            ("measured_attention_macs", format!("{}", self.measured_attention)),
            ("formula_attention_macs", format!("{}", self.formula.attention)),
            ("attention_ratio", format!("{:.6}", self.attention_ratio)),
            ("attention_ratio_times_heads", format!("{:.6}", self.attention_ratio_per_head)),
            ("measured_mlp_macs", format!("{}", self.measured_mlp)),
            ("measured_conv_macs", self.measured_conv.to_string()),
            ("formula_conv_macs", self.formula_conv.to_string()),
        ];
        for (k, v) in self.ledger.counters() {
            rows.push((k, v.to_string()));
        }
        rows
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.rows() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Two-column CSV with a `key,value` header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}
