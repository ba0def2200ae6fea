//! Token significance from encoder attention.
//!
//! Heads are averaged into one `N x N` map, which is reduced along each axis to
//! a per-token mean. Whichever mean vector is more dispersed (larger population
//! variance) becomes the significance score. All accumulation is done in `f64`
//! in a fixed index order, so results are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::tensor_io::AttentionMaps;

/// Which mean vector was chosen as the significance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// `s1[j]`: mean attention received by key `j` (column means).
    Columns,
    /// `s2[i]`: mean of query row `i` (row means).
    Rows,
}

/// How the axis is picked from the two variances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum AxisRule {
    /// Larger variance wins; ties go to rows.
    #[default]
    HigherVariance,
    /// Smaller variance wins; ties go to columns. Ablation baseline.
    LowerVariance,
}

impl AxisRule {
    pub fn choose(self, var1: f64, var2: f64) -> Axis {
        match self {
            Self::HigherVariance if var1 > var2 => Axis::Columns,
            Self::HigherVariance => Axis::Rows,
            Self::LowerVariance if var2 < var1 => Axis::Rows,
            Self::LowerVariance => Axis::Columns,
        }
    }
}

/// Dense square matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    /// Panics if `data.len() != n * n`.
    pub fn from_vec(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "square matrix needs n*n values");
        Self { n, data }
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.data[i * n + j];
            }
        }
        Self { n, data }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceScores {
    /// The chosen vector; identical to `s1` or `s2` depending on `chosen_axis`.
    pub scores: Vec<f64>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub var1: f64,
    pub var2: f64,
    pub chosen_axis: Axis,
}

impl SignificanceScores {
    /// Builds scores from precomputed axis means.
    pub fn from_axis_means(s1: Vec<f64>, s2: Vec<f64>, rule: AxisRule) -> Self {
        let var1 = population_variance(&s1);
        let var2 = population_variance(&s2);
        let chosen_axis = rule.choose(var1, var2);
        let scores = match chosen_axis {
            Axis::Columns => s1.clone(),
            Axis::Rows => s2.clone(),
        };
        Self {
            scores,
            s1,
            s2,
            var1,
            var2,
            chosen_axis,
        }
    }

    /// Wraps a raw score vector that did not come from an attention map.
    /// Both axis vectors are set to `scores`, so the axis is reported as rows.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        Self::from_axis_means(scores.clone(), scores, AxisRule::HigherVariance)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Element-wise mean over heads.
pub fn average_heads(maps: &AttentionMaps) -> SquareMatrix {
    let n = maps.tokens();
    let mut acc = vec![0.0f64; n * n];
    for h in 0..maps.heads() {
        for (a, &v) in acc.iter_mut().zip(maps.head(h)) {
            *a += f64::from(v);
        }
    }
    let inv = 1.0 / maps.heads() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    SquareMatrix { n, data: acc }
}

/// Returns `(s1, s2)`: column means and row means of `avg`.
pub fn axis_means(avg: &SquareMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = avg.n;
    let mut col_sums = vec![0.0f64; n];
    let mut row_sums = vec![0.0f64; n];
    for (i, row) in avg.data.chunks_exact(n).enumerate() {
        for (c, &v) in col_sums.iter_mut().zip(row) {
            *c += v;
        }
        row_sums[i] = row.iter().sum();
    }
    let inv = 1.0 / n as f64;
    let scale = |v: Vec<f64>| v.into_iter().map(|x| x * inv).collect::<Vec<_>>();
    (scale(col_sums), scale(row_sums))
}

/// Population variance (divides by `len`). Zero for empty input.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

pub fn significance_from_matrix(avg: &SquareMatrix, rule: AxisRule) -> SignificanceScores {
    let (s1, s2) = axis_means(avg);
    SignificanceScores::from_axis_means(s1, s2, rule)
}

/// Significance with the higher-variance axis.
pub fn compute_significance(maps: &AttentionMaps) -> SignificanceScores {
    significance_from_matrix(&average_heads(maps), AxisRule::HigherVariance)
}

/// Same pipeline, but keeps the lower-variance axis.
pub fn compute_significance_ablated(maps: &AttentionMaps) -> SignificanceScores {
    significance_from_matrix(&average_heads(maps), AxisRule::LowerVariance)
}
