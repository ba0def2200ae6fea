//! Token selection (rank and row strategies, the 2x2 pooling baseline) and
//! spatial reordering of the kept indices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::significance::{Axis, SignificanceScores};

/// Slack added before flooring `total * ratio`, so products such as
/// `100 * 0.29 = 28.999999999999996` land on the intended integer.
const KEEP_COUNT_SLACK: f64 = 1e-9;

/// Retention ratio in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Ratio(f64);

impl Ratio {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 && value <= 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::Config(format!(
                "retention ratio must be in (0, 1], got {value}"
            )))
        }
    }

    pub const FULL: Ratio = Ratio(1.0);

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Ratio {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Ratio> for f64 {
    fn from(r: Ratio) -> f64 {
        r.0
    }
}

impl FromStr for Ratio {
    type Err = Error;

    /// Accepts a decimal fraction (`0.25`) or a percentage (`25%`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (num, scale) = match s.strip_suffix('%') {
            Some(p) => (p.trim(), 100.0),
            None => (s, 1.0),
        };
        let v: f64 = num
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse ratio '{s}'")))?;
        Self::new(v / scale)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The nine retention ratios of the standard sweep.
pub const SWEEP_RATIOS: [f64; 9] = [0.002, 0.027, 0.0625, 0.11, 0.17, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Global top-k by significance.
    #[default]
    Rank,
    /// Whole grid rows by summed significance.
    Row,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignificanceMode {
    #[default]
    Variance,
    /// Keep the lower-variance axis.
    AntiVariance,
    /// Skip significance; keep one token per 2x2 block.
    Pool4,
}

/// What actually produced a selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionKind {
    Rank,
    Row,
    Pool4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    pub ratio: Ratio,
    pub strategy: Strategy,
    /// Sort kept indices ascending. Off reproduces the no-reordering ablation.
    pub reorder: bool,
    pub significance_mode: SignificanceMode,
}

impl PruneConfig {
    pub fn new(ratio: Ratio, strategy: Strategy) -> Self {
        Self {
            ratio,
            strategy,
            reorder: true,
            significance_mode: SignificanceMode::Variance,
        }
    }

    pub fn with_reorder(mut self, reorder: bool) -> Self {
        self.reorder = reorder;
        self
    }

    pub fn with_mode(mut self, mode: SignificanceMode) -> Self {
        self.significance_mode = mode;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedSelection {
    pub kept: Vec<usize>,
    pub n_original: usize,
    pub grid_side: Option<usize>,
    pub strategy_used: SelectionKind,
    /// Row strategy only, in the order the rows were flattened.
    pub rows_kept: Option<Vec<usize>>,
    pub ratio: Ratio,
}

impl PrunedSelection {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Per-token keep flags, indexed by original position.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_original];
        for &i in &self.kept {
            mask[i] = true;
        }
        mask
    }

    /// The serializable document for this selection.
    pub fn report(&self, significance: Option<&SignificanceScores>) -> SelectionReport {
        SelectionReport {
            chosen_axis: significance.map(|s| s.chosen_axis),
            kept: self.kept.clone(),
            n_original: self.n_original,
            ratio: self.ratio.get(),
            rows_kept: self.rows_kept.clone(),
            strategy: self.strategy_used,
            var1: significance.map(|s| s.var1),
            var2: significance.map(|s| s.var2),
        }
    }
}

/// JSON form of a selection. Fields are declared in sorted order so the
/// serialized key order is stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub chosen_axis: Option<Axis>,
    pub kept: Vec<usize>,
    pub n_original: usize,
    pub ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rows_kept: Option<Vec<usize>>,
    pub strategy: SelectionKind,
    pub var1: Option<f64>,
    pub var2: Option<f64>,
}

impl SelectionReport {
    /// Pretty-printed JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("selection report serializes");
        s.push('\n');
        s
    }
}

/// `max(1, floor(total * ratio))`, never more than `total`.
pub fn keep_count(total: usize, ratio: Ratio) -> usize {
    let k = (total as f64 * ratio.get() + KEEP_COUNT_SLACK).floor() as usize;
    k.clamp(1, total.max(1))
}

/// Side length of a square grid holding `n` tokens.
pub fn grid_side(n: usize) -> Option<usize> {
    let side = (n as f64).sqrt().round() as usize;
    (side * side == n).then_some(side)
}

fn check_finite(scores: &[f64]) -> Result<()> {
    match scores.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Value(format!(
            "significance score at {i} is not finite"
        ))),
        None => Ok(()),
    }
}

/// Indices ordered by descending value, lower index first among equals.
fn rank_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps ascending index order within ties
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite scores"));
    order
}

/// Keeps the `keep_count(N, r)` highest-scoring tokens.
pub fn rank_select(scores: &SignificanceScores, config: &PruneConfig) -> Result<PrunedSelection> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::Validation(
            "cannot select from an empty score vector".into(),
        ));
    }
    check_finite(&scores.scores)?;
    let mut kept = rank_desc(&scores.scores);
    kept.truncate(keep_count(n, config.ratio));
    if config.reorder {
        kept.sort_unstable();
    }
    Ok(PrunedSelection {
        kept,
        n_original: n,
        grid_side: None,
        strategy_used: SelectionKind::Rank,
        rows_kept: None,
        ratio: config.ratio,
    })
}

/// Keeps the `keep_count(n, r)` grid rows with the largest summed significance.
pub fn row_select(scores: &SignificanceScores, config: &PruneConfig) -> Result<PrunedSelection> {
    let n_tokens = scores.len();
    let side = grid_side(n_tokens).filter(|&s| s > 0).ok_or_else(|| {
        Error::Grid(format!(
            "row strategy needs a square token grid, {n_tokens} tokens is not a perfect square"
        ))
    })?;
    check_finite(&scores.scores)?;
    let row_sums: Vec<f64> = scores
        .scores
        .chunks_exact(side)
        .map(|row| row.iter().sum())
        .collect();
    let mut rows = rank_desc(&row_sums);
    rows.truncate(keep_count(side, config.ratio));
    if config.reorder {
        rows.sort_unstable();
    }
    let kept = rows
        .iter()
        .flat_map(|&r| r * side..(r + 1) * side)
        .collect();
    Ok(PrunedSelection {
        kept,
        n_original: n_tokens,
        grid_side: Some(side),
        strategy_used: SelectionKind::Row,
        rows_kept: Some(rows),
        ratio: config.ratio,
    })
}

/// Top-left token of every 2x2 block, ascending. Ignores the ratio (always N/4).
pub fn pool_select(n_tokens: usize, config: &PruneConfig) -> Result<PrunedSelection> {
    let side = grid_side(n_tokens)
        .filter(|&s| s > 0 && s % 2 == 0)
        .ok_or_else(|| {
            Error::Grid(format!(
                "{n_tokens} tokens cannot be partitioned into 2x2 blocks on a square grid"
            ))
        })?;
    let kept = (0..side)
        .step_by(2)
        .flat_map(|r| (0..side).step_by(2).map(move |c| r * side + c))
        .collect();
    Ok(PrunedSelection {
        kept,
        n_original: n_tokens,
        grid_side: Some(side),
        strategy_used: SelectionKind::Pool4,
        rows_kept: None,
        ratio: config.ratio,
    })
}

/// Dispatches on mode and strategy. `scores` is ignored for [`SignificanceMode::Pool4`].
pub fn select(scores: &SignificanceScores, config: &PruneConfig) -> Result<PrunedSelection> {
    match (config.significance_mode, config.strategy) {
        (SignificanceMode::Pool4, _) => pool_select(scores.len(), config),
        (_, Strategy::Rank) => rank_select(scores, config),
        (_, Strategy::Row) => row_select(scores, config),
    }
}

/// Sorts unique indices ascending.
pub fn reorder(indices: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Validation(format!("duplicate token index {}", w[0])));
    }
    Ok(sorted)
}

/// Gathers `tokens[i]` for each kept index, in kept order.
pub fn apply_selection<T: Clone>(tokens: &[T], sel: &PrunedSelection) -> Result<Vec<T>> {
    if tokens.len() != sel.n_original {
        return Err(Error::Validation(format!(
            "selection was made over {} tokens, got {}",
            sel.n_original,
            tokens.len()
        )));
    }
    Ok(sel.kept.iter().map(|&i| tokens[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::*;

    fn ratio(r: f64) -> Ratio {
        Ratio::new(r).unwrap()
    }

    fn cfg(r: f64, strategy: Strategy) -> PruneConfig {
        PruneConfig::new(ratio(r), strategy)
    }

    fn sig(v: &[f64]) -> SignificanceScores {
        SignificanceScores::from_scores(v.to_vec())
    }

    #[test]
    fn keep_count_examples() {
        assert_eq!(keep_count(576, ratio(0.25)), 144);
        assert_eq!(keep_count(4, ratio(1.0)), 4);
        assert_eq!(keep_count(5, ratio(0.002)), 1);
        assert_eq!(keep_count(100, ratio(0.29)), 29);
        assert_eq!(keep_count(1, ratio(0.002)), 1);
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("0.25".parse::<Ratio>().unwrap().get(), 0.25);
        assert_eq!("25%".parse::<Ratio>().unwrap().get(), 0.25);
        assert_eq!(" 100 % ".parse::<Ratio>().unwrap().get(), 1.0);
        for bad in ["0", "-0.1", "1.5", "abc", "NaN", "inf", "0%"] {
            assert!(
                matches!(bad.parse::<Ratio>(), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn rank_tie_break_prefers_lower_index() {
        let sel = rank_select(&sig(&[0.7, 0.1, 0.1, 0.1]), &cfg(0.5, Strategy::Rank)).unwrap();
        assert_eq!(sel.kept, vec![0, 1]);
    }

    #[test]
    fn rank_full_retention_keeps_everything() {
        let sel = rank_select(&sig(&[0.3, 0.9, 0.1, 0.5, 0.2]), &cfg(1.0, Strategy::Rank)).unwrap();
        assert_eq!(sel.kept, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn rank_without_reorder_is_score_order() {
        let s = sig(&[0.1, 0.9, 0.2, 0.8]);
        let c = cfg(0.5, Strategy::Rank);
        assert_eq!(
            rank_select(&s, &c.with_reorder(false)).unwrap().kept,
            vec![1, 3]
        );
        assert_eq!(rank_select(&s, &c).unwrap().kept, vec![1, 3]);
        let s = sig(&[0.1, 0.8, 0.2, 0.9]);
        assert_eq!(
            rank_select(&s, &c.with_reorder(false)).unwrap().kept,
            vec![3, 1]
        );
        assert_eq!(rank_select(&s, &c).unwrap().kept, vec![1, 3]);
    }

    #[test]
    fn rank_rejects_nan() {
        let r = rank_select(&sig(&[0.1, f64::NAN]), &cfg(0.5, Strategy::Rank));
        assert!(matches!(r, Err(Error::Value(_))));
    }

    #[test]
    fn row_select_picks_heaviest_rows() {
        // grid rows sum to 4, 1, 5, 2
        let mut scores = Vec::new();
        for total in [4.0, 1.0, 5.0, 2.0] {
            scores.extend([total / 4.0; 4]);
        }
        let sel = row_select(&sig(&scores), &cfg(0.5, Strategy::Row)).unwrap();
        assert_eq!(sel.rows_kept, Some(vec![0, 2]));
        assert_eq!(sel.kept, vec![0, 1, 2, 3, 8, 9, 10, 11]);
        assert_eq!(sel.grid_side, Some(4));

        let unordered =
            row_select(&sig(&scores), &cfg(0.5, Strategy::Row).with_reorder(false)).unwrap();
        assert_eq!(unordered.rows_kept, Some(vec![2, 0]));
        assert_eq!(unordered.kept, vec![8, 9, 10, 11, 0, 1, 2, 3]);
    }

    #[test]
    fn row_select_uniform_ties() {
        let sel = row_select(&sig(&[0.25; 4]), &cfg(0.5, Strategy::Row)).unwrap();
        assert_eq!(sel.rows_kept, Some(vec![0]));
        assert_eq!(sel.kept, vec![0, 1]);
    }

    #[test]
    fn row_select_non_square_is_grid_error() {
        let err = row_select(&sig(&[0.2; 5]), &cfg(0.5, Strategy::Row)).unwrap_err();
        match err {
            Error::Grid(msg) => assert!(msg.contains('5')),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn pool_select_examples() {
        let c = cfg(0.25, Strategy::Rank).with_mode(SignificanceMode::Pool4);
        assert_eq!(pool_select(16, &c).unwrap().kept, vec![0, 2, 8, 10]);
        assert_eq!(pool_select(4, &c).unwrap().kept, vec![0]);
        assert!(matches!(pool_select(9, &c), Err(Error::Grid(_))));
        assert!(matches!(pool_select(8, &c), Err(Error::Grid(_))));
        assert_eq!(pool_select(576, &c).unwrap().len(), 144);
    }

    #[test]
    fn select_dispatches_pool_mode() {
        let c = cfg(0.5, Strategy::Row).with_mode(SignificanceMode::Pool4);
        let sel = select(&sig(&[1.0; 16]), &c).unwrap();
        assert_eq!(sel.strategy_used, SelectionKind::Pool4);
    }

    #[test]
    fn reorder_examples() {
        assert_eq!(reorder(&[5, 2, 7]).unwrap(), vec![2, 5, 7]);
        assert_eq!(reorder(&[]).unwrap(), Vec::<usize>::new());
        assert_eq!(reorder(&[0, 1, 2]).unwrap(), vec![0, 1, 2]);
        assert!(matches!(reorder(&[3, 1, 3]), Err(Error::Validation(_))));
    }

    #[test]
    fn apply_selection_gathers() {
        let sel = rank_select(&sig(&[0.9, 0.1, 0.8, 0.2]), &cfg(0.5, Strategy::Rank)).unwrap();
        assert_eq!(
            apply_selection(&['a', 'b', 'c', 'd'], &sel).unwrap(),
            vec!['a', 'c']
        );
        let all = rank_select(&sig(&[0.9, 0.1, 0.8, 0.2]), &cfg(1.0, Strategy::Rank)).unwrap();
        assert_eq!(
            apply_selection(&['a', 'b', 'c', 'd'], &all).unwrap(),
            vec!['a', 'b', 'c', 'd']
        );
        assert!(matches!(
            apply_selection(&['a', 'b', 'c'], &sel),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn report_json_key_order() {
        let s = sig(&[0.7, 0.1, 0.1, 0.1]);
        let sel = rank_select(&s, &cfg(0.5, Strategy::Rank)).unwrap();
        let json = sel.report(Some(&s)).to_json();
        let keys: Vec<&str> = json
            .lines()
            .filter_map(|l| l.trim().strip_prefix('"'))
            .filter_map(|l| l.split('"').next())
            .collect();
        assert_eq!(
            keys,
            [
                "chosen_axis",
                "kept",
                "n_original",
                "ratio",
                "strategy",
                "var1",
                "var2"
            ]
        );
        let back: SelectionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sel.report(Some(&s)));
    }

    proptest! {
        #[test]
        fn rank_matches_full_sort_oracle(scores in prop::collection::vec(0u8..8, 1..=64), r in 0.01f64..=1.0) {
            // small integer scores force plenty of ties
            let values: Vec<f64> = scores.iter().map(|&v| f64::from(v) / 8.0).collect();
            let sel = rank_select(&sig(&values), &cfg(r, Strategy::Rank)).unwrap();
            let mut oracle: Vec<(i64, usize)> = scores.iter().enumerate().map(|(i, &v)| (-i64::from(v), i)).collect();
            oracle.sort();
            let mut expect: Vec<usize> = oracle.iter().take(keep_count(values.len(), ratio(r))).map(|p| p.1).collect();
            expect.sort();
            prop_assert_eq!(sel.kept, expect);
        }

        #[test]
        fn unordered_rank_is_permutation(values in prop::collection::vec(0.0f64..1.0, 1..=64), r in 0.01f64..=1.0) {
            let c = cfg(r, Strategy::Rank);
            let a = rank_select(&sig(&values), &c).unwrap();
            let b = rank_select(&sig(&values), &c.with_reorder(false)).unwrap();
            prop_assert_eq!(reorder(&b.kept).unwrap(), a.kept);
        }
    }
}
