use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-instance and overall accuracy of judged cause→effect pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphScores {
    pub per_instance: Vec<f64>,
    /// Mean of the per-instance accuracies.
    pub overall: f64,
    /// Pooled accuracy over every judged pair.
    pub micro: f64,
    pub pairs: usize,
    pub full: usize,
    pub partial: usize,
    pub wrong: usize,
}

/// Scores human judgments; each pair is scored 1, 0.5 or 0.
pub fn score_graphs(judgments: &[Vec<f64>]) -> Result<GraphScores> {
    if judgments.is_empty() {
        return Err(Error::Contract("no instances to score".into()));
    }
    let (mut full, mut partial, mut wrong) = (0, 0, 0);
    let mut per_instance = Vec::with_capacity(judgments.len());
    for (i, pairs) in judgments.iter().enumerate() {
        if pairs.is_empty() {
            return Err(Error::Contract(format!("instance {i} has no scored pairs")));
        }
        for &s in pairs {
            match s {
                _ if s == 1.0 => full += 1,
                _ if s == 0.5 => partial += 1,
                _ if s == 0.0 => wrong += 1,
                _ => {
                    return Err(Error::Contract(format!(
                        "instance {i}: score {s} is not one of 0, 0.5, 1"
                    )))
                }
            }
        }
        per_instance.push(pairs.iter().sum::<f64>() / pairs.len() as f64);
    }
    let pairs = full + partial + wrong;
    Ok(GraphScores {
        overall: per_instance.iter().sum::<f64>() / per_instance.len() as f64,
        micro: (full as f64 + 0.5 * partial as f64) / pairs as f64,
        per_instance,
        pairs,
        full,
        partial,
        wrong,
    })
}

/// Annotation cost per million data tokens:
/// `(t_in·p_in + t_out·p_out) / avg_len`, times an optional currency factor.
pub fn estimate_cost(t_in: f64, t_out: f64, p_in: f64, p_out: f64, avg_len: f64, currency: f64) -> f64 {
    (t_in * p_in + t_out * p_out) / avg_len * currency
}
