//! Analytical work ratios for a pruned prompt.
//!
//! Prefill attention work is taken as quadratic in prompt length and per-token
//! decode work as linear. Both ignore projector, sampling and memory-bandwidth
//! costs, so the speedups are upper bounds on what a real pipeline measures.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pruning::{keep_count, Ratio};

pub const MODEL_NAME: &str = "quadratic-upper-bound";

pub const UPPER_BOUND_NOTE: &str =
    "quadratic-upper-bound: speedups ignore projector, sampling and \
memory-bound decode costs; measured wall-clock gains are much smaller (reported maxima: \
2.52x time-to-first-token, 1.24x time-per-output-token at 25% retention)";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub tokens_before: usize,
    pub tokens_after: usize,
    pub prefill_ratio: f64,
    pub decode_ratio: f64,
    pub prefill_speedup: f64,
    pub decode_speedup: f64,
}

/// JSON form; keys in sorted order.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub decode_speedup: f64,
    pub model: &'static str,
    pub prefill_speedup: f64,
    pub tokens_after: usize,
    pub tokens_before: usize,
}

impl CostEstimate {
    pub fn report(&self) -> CostReport {
        CostReport {
            decode_speedup: self.decode_speedup,
            model: MODEL_NAME,
            prefill_speedup: self.prefill_speedup,
            tokens_after: self.tokens_after,
            tokens_before: self.tokens_before,
        }
    }

    /// Human-readable summary, including the upper-bound caveat.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tokens before   {}", self.tokens_before);
        let _ = writeln!(s, "tokens after    {}", self.tokens_after);
        let _ = writeln!(s, "prefill speedup {:.3}x", self.prefill_speedup);
        let _ = writeln!(s, "decode speedup  {:.3}x", self.decode_speedup);
        let _ = writeln!(s, "note: {UPPER_BOUND_NOTE}");
        s
    }
}

pub fn estimate(visual: usize, textual: usize, ratio: Ratio) -> Result<CostEstimate> {
    if visual == 0 {
        return Err(Error::Validation(
            "cost estimate needs at least one visual token".into(),
        ));
    }
    let tokens_before = visual + textual;
    let tokens_after = keep_count(visual, ratio) + textual;
    let decode_ratio = tokens_after as f64 / tokens_before as f64;
    let prefill_ratio = decode_ratio * decode_ratio;
    Ok(CostEstimate {
        tokens_before,
        tokens_after,
        prefill_ratio,
        decode_ratio,
        prefill_speedup: 1.0 / prefill_ratio,
        decode_speedup: 1.0 / decode_ratio,
    })
}
