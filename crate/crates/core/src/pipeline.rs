//! End-to-end pruning: significance, selection, reordering, gather.

use crate::error::Result;
use crate::pruning::{
    apply_selection, select, PruneConfig, PrunedSelection, SelectionReport, SignificanceMode,
};
use crate::significance::{average_heads, significance_from_matrix, AxisRule, SignificanceScores};
use crate::tensor_io::AttentionMaps;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// `None` in pooling mode, which bypasses significance entirely.
    pub significance: Option<SignificanceScores>,
    pub selection: PrunedSelection,
}

impl PipelineOutput {
    pub fn report(&self) -> SelectionReport {
        self.selection.report(self.significance.as_ref())
    }
}

/// Significance under the configured mode, or `None` for pooling.
pub fn significance_for(
    maps: &AttentionMaps,
    mode: SignificanceMode,
) -> Option<SignificanceScores> {
    let rule = match mode {
        SignificanceMode::Variance => AxisRule::HigherVariance,
        SignificanceMode::AntiVariance => AxisRule::LowerVariance,
        SignificanceMode::Pool4 => return None,
    };
    Some(significance_from_matrix(&average_heads(maps), rule))
}

/// Selects the tokens to keep from one image's attention maps.
pub fn run(maps: &AttentionMaps, config: &PruneConfig) -> Result<PipelineOutput> {
    let significance = significance_for(maps, config.significance_mode);
    let selection = match &significance {
        Some(sig) => select(sig, config)?,
        None => crate::pruning::pool_select(maps.tokens(), config)?,
    };
    Ok(PipelineOutput {
        significance,
        selection,
    })
}

/// Runs the pipeline and gathers the surviving tokens from `tokens`.
pub fn prune_tokens<T: Clone>(
    tokens: &[T],
    maps: &AttentionMaps,
    config: &PruneConfig,
) -> Result<Vec<T>> {
    let out = run(maps, config)?;
    apply_selection(tokens, &out.selection)
}
