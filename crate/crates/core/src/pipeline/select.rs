use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ObjectiveWeights;
use crate::simgen::MultiEnvData;

use super::train::{rescore, train, TrainConfig, TrainOutput};

/// `λ1 × λ2` combinations tried during model selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl Default for LambdaGrid {
    /// Twelve combinations: `λ1 ∈ {1, 5, 10}`, `λ2 ∈ {0, 1, 5, 10}`.
    fn default() -> Self {
        Self {
            lambda1: vec![1.0, 5.0, 10.0],
            lambda2: vec![0.0, 1.0, 5.0, 10.0],
        }
    }
}

impl LambdaGrid {
    pub fn single(lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1: vec![lambda1],
            lambda2: vec![lambda2],
        }
    }

    /// Row-major over `λ1`, restricted to `subset`.
    pub fn combinations(&self, subset: Lambda2Subset) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for &l1 in &self.lambda1 {
            for &l2 in &self.lambda2 {
                if subset.admits(l2) {
                    out.push((l1, l2));
                }
            }
        }
        out
    }
}

/// Which `λ2` values take part in selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda2Subset {
    #[default]
    All,
    /// Only `λ2 = 0` (independence loss excluded).
    Zero,
    /// Only `λ2 > 0`.
    NonZero,
}

impl Lambda2Subset {
    pub fn admits(&self, l2: f64) -> bool {
        match self {
            Lambda2Subset::All => true,
            Lambda2Subset::Zero => l2 == 0.0,
            Lambda2Subset::NonZero => l2 != 0.0,
        }
    }
}

/// How validation losses are compared across candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Selection {
    /// Each candidate is scored with its own `λ`, so totals sit on different scales.
    #[default]
    OwnWeights,
    /// Every candidate is scored with one fixed set of weights.
    Reference { lambda1: f64, lambda2: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRun {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Final-epoch validation score under the selection rule; `None` when the run failed.
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct CvOutcome {
    pub best: TrainConfig,
    pub best_index: usize,
    pub runs: Vec<CvRun>,
    /// Training output of the selected candidate.
    pub output: TrainOutput,
}

fn score(out: &TrainOutput, selection: Selection) -> Result<f64> {
    let b = match out.final_val() {
        Some(b) => b,
        None => out
            .final_train()
            .ok_or_else(|| Error::Config("model selection needs at least one epoch".into()))?,
    };
    Ok(match selection {
        Selection::OwnWeights => b.total,
        Selection::Reference { lambda1, lambda2 } => rescore(
            &b,
            &ObjectiveWeights {
                lambda1,
                lambda2,
                ..out.config.weights()
            },
        ),
    })
}

/// Trains every admitted grid point from `base` and keeps the lowest validation score.
///
/// Ties go to the earlier grid point. Failed runs are recorded and skipped.
pub fn cross_validate(
    data: &MultiEnvData,
    grid: &LambdaGrid,
    base: &TrainConfig,
    subset: Lambda2Subset,
    selection: Selection,
) -> Result<CvOutcome> {
    let combos = grid.combinations(subset);
    if combos.is_empty() {
        return Err(Error::Config(format!("grid has no admissible combination for subset {subset:?}")));
    }
    let mut runs = Vec::with_capacity(combos.len());
    let mut best: Option<(usize, f64, TrainOutput)> = None;
    for (i, &(lambda1, lambda2)) in combos.iter().enumerate() {
        let config = TrainConfig {
            lambda1,
            lambda2,
            ..base.clone()
        };
        let outcome = train(data, &config).and_then(|out| score(&out, selection).map(|s| (s, out)));
        match outcome {
            Ok((s, out)) if s.is_finite() => {
                runs.push(CvRun { lambda1, lambda2, score: Some(s), error: None });
                if best.as_ref().is_none_or(|(_, bs, _)| s < *bs) {
                    best = Some((i, s, out));
                }
            }
            Ok((s, _)) => runs.push(CvRun {
                lambda1,
                lambda2,
                score: None,
                error: Some(format!("non-finite validation score {s}")),
            }),
            Err(e) => runs.push(CvRun { lambda1, lambda2, score: None, error: Some(e.to_string()) }),
        }
    }
    match best {
        Some((best_index, _, output)) => Ok(CvOutcome {
            best: output.config.clone(),
            best_index,
            runs,
            output,
        }),
        None => {
            let reasons: Vec<String> = runs
                .iter()
                .map(|r| format!("(λ1={}, λ2={}): {}", r.lambda1, r.lambda2, r.error.as_deref().unwrap_or("?")))
                .collect();
            Err(Error::AllRunsFailed(reasons.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_twelve_points() {
        let g = LambdaGrid::default();
        assert_eq!(g.combinations(Lambda2Subset::All).len(), 12);
        assert_eq!(g.combinations(Lambda2Subset::Zero).len(), 3);
        assert!(g.combinations(Lambda2Subset::NonZero).iter().all(|&(_, l2)| l2 > 0.0));
        assert_eq!(g.combinations(Lambda2Subset::All)[1], (1.0, 1.0));
    }
}
