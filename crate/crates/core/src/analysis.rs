//! Attention concentration diagnostics and visual/textual token budgets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::significance::compute_significance;
use crate::tensor_io::{load_attention, ClsToken};

/// Relative slack when comparing a prefix sum against the target mass.
const MASS_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub mass_threshold: f64,
    /// Smallest `k / N` such that the top-`k` scores carry `mass_threshold` of the total.
    pub token_fraction: f64,
    pub tokens_needed: usize,
    pub n_tokens: usize,
    pub gini: f64,
}

pub fn check_mass_threshold(mass_threshold: f64) -> Result<()> {
    if mass_threshold.is_finite() && mass_threshold > 0.0 && mass_threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "mass threshold must be in (0, 1], got {mass_threshold}"
        )))
    }
}

fn check_scores(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Degenerate("score vector is empty".into()));
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Value(format!(
            "score {} at index {i} is not a finite non-negative number",
            scores[i]
        )));
    }
    let total: f64 = scores.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("scores carry no mass (all zero)".into()));
    }
    Ok(total)
}

/// Gini coefficient (mean absolute difference over twice the mean).
///
/// Computed from consecutive gaps of the sorted scores, so equal scores give
/// exactly zero.
pub fn gini(scores: &[f64]) -> Result<f64> {
    let total = check_scores(scores)?;
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sum_{i<j} (x_j - x_i) = sum_k gap_k * k * (n - k)
    let pair_sum: f64 = sorted
        .windows(2)
        .enumerate()
        .map(|(k, w)| (w[1] - w[0]) * ((k + 1) * (n - k - 1)) as f64)
        .sum();
    Ok(pair_sum / (n as f64 * total))
}

pub fn concentration(scores: &[f64], mass_threshold: f64) -> Result<ConcentrationReport> {
    check_mass_threshold(mass_threshold)?;
    let total = check_scores(scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let target = mass_threshold * total * (1.0 - MASS_SLACK);
    let mut prefix = 0.0;
    let mut tokens_needed = sorted.len();
    for (i, v) in sorted.iter().enumerate() {
        prefix += v;
        if prefix >= target {
            tokens_needed = i + 1;
            break;
        }
    }
    let n = scores.len();
    Ok(ConcentrationReport {
        mass_threshold,
        token_fraction: tokens_needed as f64 / n as f64,
        tokens_needed,
        n_tokens: n,
        gini: gini(scores)?,
    })
}

/// One file's outcome in a layer sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEntry {
    pub path: PathBuf,
    #[serde(flatten)]
    pub outcome: LayerOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerOutcome {
    Report(ConcentrationReport),
    Error(String),
}

impl LayerEntry {
    pub fn report(&self) -> Option<&ConcentrationReport> {
        match &self.outcome {
            LayerOutcome::Report(r) => Some(r),
            LayerOutcome::Error(_) => None,
        }
    }
}

fn layer_report(path: &Path, mass_threshold: f64, cls: ClsToken) -> Result<ConcentrationReport> {
    let maps = load_attention(path, cls)?;
    concentration(&compute_significance(&maps).scores, mass_threshold)
}

/// Concentration of each attention file, in input order.
///
/// A file that fails to load, or whose token count differs from the first
/// successfully loaded file, is recorded as an error entry and the sweep continues.
pub fn layer_sweep<P: AsRef<Path>>(
    paths: &[P],
    mass_threshold: f64,
    cls: ClsToken,
) -> Result<Vec<LayerEntry>> {
    check_mass_threshold(mass_threshold)?;
    let mut common_n = None;
    let entries = paths
        .iter()
        .map(|p| {
            let path = p.as_ref();
            let outcome = match layer_report(path, mass_threshold, cls) {
                Ok(r) if *common_n.get_or_insert(r.n_tokens) != r.n_tokens => {
                    LayerOutcome::Error(format!(
                        "token count {} differs from {} in earlier layers",
                        r.n_tokens,
                        common_n.unwrap_or_default()
                    ))
                }
                Ok(r) => LayerOutcome::Report(r),
                Err(e) => LayerOutcome::Error(e.to_string()),
            };
            LayerEntry {
                path: path.to_path_buf(),
                outcome,
            }
        })
        .collect();
    Ok(entries)
}

/// Aligned plain-text table of a layer sweep.
pub fn layer_table(entries: &[LayerEntry]) -> String {
    let width = entries
        .iter()
        .map(|e| e.path.display().to_string().len())
        .max()
        .unwrap_or(0)
        .max(4);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>6}  {:>8}  {:>8}  {:>8}",
        "file", "tokens", "needed", "fraction", "gini"
    );
    for e in entries {
        let name = e.path.display().to_string();
        let _ = match &e.outcome {
            LayerOutcome::Report(r) => writeln!(
                out,
                "{name:<width$}  {:>6}  {:>8}  {:>8.4}  {:>8.4}",
                r.n_tokens, r.tokens_needed, r.token_fraction, r.gini
            ),
            LayerOutcome::Error(msg) => writeln!(out, "{name:<width$}  ERROR {msg}"),
        };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TokenBudgetReport {
    pub visual_tokens: usize,
    pub textual_tokens: usize,
    pub visual_fraction: f64,
}

pub fn token_budget(visual: usize, textual: usize) -> Result<TokenBudgetReport> {
    let total = visual + textual;
    if total == 0 {
        return Err(Error::Degenerate("token budget has no tokens".into()));
    }
    Ok(TokenBudgetReport {
        visual_tokens: visual,
        textual_tokens: textual,
        visual_fraction: visual as f64 / total as f64,
    })
}
