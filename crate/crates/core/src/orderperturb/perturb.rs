use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dag::DagTemplate;
use super::Step;
use crate::{Error, Result};

/// Ordering applied to the canonical reasoning steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PerturbMode {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "RE")]
    Reverse,
    #[serde(rename = "LR")]
    LocalReverse,
    #[serde(rename = "OF")]
    OutputFirst,
    #[serde(rename = "DFS")]
    Dfs,
    R1,
    R2,
    R3,
    #[serde(rename = "no_cot")]
    NoCot,
}

impl PerturbMode {
    pub const ALL: [PerturbMode; 9] = [
        PerturbMode::Normal,
        PerturbMode::Reverse,
        PerturbMode::LocalReverse,
        PerturbMode::OutputFirst,
        PerturbMode::Dfs,
        PerturbMode::R1,
        PerturbMode::R2,
        PerturbMode::R3,
        PerturbMode::NoCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbMode::Normal => "normal",
            PerturbMode::Reverse => "RE",
            PerturbMode::LocalReverse => "LR",
            PerturbMode::OutputFirst => "OF",
            PerturbMode::Dfs => "DFS",
            PerturbMode::R1 => "R1",
            PerturbMode::R2 => "R2",
            PerturbMode::R3 => "R3",
            PerturbMode::NoCot => "no_cot",
        }
    }

    fn random_slot(self) -> Option<usize> {
        match self {
            PerturbMode::R1 => Some(0),
            PerturbMode::R2 => Some(1),
            PerturbMode::R3 => Some(2),
            _ => None,
        }
    }
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Contract(format!("unknown perturbation mode {s:?}")))
    }
}

/// The three dataset-wide random orders used by R1–R3.
/// `perms[k][pos]` is the canonical index emitted at position `pos`.
pub type FixedPermutations = [Vec<usize>; 3];

/// Reorders the canonical steps according to `mode`.
pub fn perturb(
    steps: &[Step],
    mode: PerturbMode,
    fixed: &FixedPermutations,
    dag: &DagTemplate,
) -> Result<Vec<Step>> {
    let order = perturbed_order(steps, mode, fixed, dag)?;
    Ok(order.into_iter().map(|i| steps[i].clone()).collect())
}

/// Index form of [`perturb`]: output position → canonical index.
pub fn perturbed_order(
    steps: &[Step],
    mode: PerturbMode,
    fixed: &FixedPermutations,
    dag: &DagTemplate,
) -> Result<Vec<usize>> {
    let n = steps.len();
    let mut order: Vec<usize> = (0..n).collect();
    match mode {
        PerturbMode::Normal => {}
        PerturbMode::Reverse => order.reverse(),
        PerturbMode::LocalReverse => {
            for pair in order.chunks_mut(2) {
                pair.reverse();
            }
        }
        PerturbMode::OutputFirst => {
            if let Some(pos) = steps.iter().position(|s| s.variable == dag.target) {
                let t = order.remove(pos);
                order.insert(0, t);
            }
        }
        PerturbMode::Dfs => order = dfs_order(steps, dag),
        PerturbMode::R1 | PerturbMode::R2 | PerturbMode::R3 => {
            let perm = &fixed[mode.random_slot().expect("random mode")];
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != order {
                return Err(Error::Contract(format!(
                    "{mode} permutation {perm:?} is not a permutation of {n} steps"
                )));
            }
            order = perm.clone();
        }
        PerturbMode::NoCot => order.clear(),
    }
    Ok(order)
}

/// Pre-order depth-first walk from the target over parent links, parents in
/// rule order. Steps the target does not depend on are walked afterwards,
/// starting from the latest canonical step.
fn dfs_order(steps: &[Step], dag: &DagTemplate) -> Vec<usize> {
    let index_of = |name: &str| steps.iter().position(|s| s.variable == name);
    let mut visited = vec![false; steps.len()];
    let mut order = Vec::with_capacity(steps.len());

    fn walk(
        idx: usize,
        steps: &[Step],
        dag: &DagTemplate,
        index_of: &dyn Fn(&str) -> Option<usize>,
        visited: &mut [bool],
        order: &mut Vec<usize>,
    ) {
        if visited[idx] {
            return;
        }
        visited[idx] = true;
        order.push(idx);
        if let Some(rule) = dag.rule(&steps[idx].variable) {
            for parent in rule.parents {
                if let Some(p) = index_of(parent) {
                    walk(p, steps, dag, index_of, visited, order);
                }
            }
        }
    }

    let roots = index_of(dag.target)
        .into_iter()
        .chain((0..steps.len()).rev());
    for root in roots {
        walk(root, steps, dag, &index_of, &mut visited, &mut order);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_steps(n: usize) -> Vec<Step> {
        (0..n)
            .map(|i| Step {
                variable: format!("v{i}"),
                text: format!("s{i}"),
                value: i as i64,
            })
            .collect()
    }

    fn ids(steps: &[Step]) -> Vec<i64> {
        steps.iter().map(|s| s.value).collect()
    }

    #[test]
    fn local_reverse_keeps_odd_tail() {
        let dag = DagTemplate::standard();
        let fixed: FixedPermutations = [vec![], vec![], vec![]];
        let out = perturb(&fake_steps(3), PerturbMode::LocalReverse, &fixed, &dag).unwrap();
        assert_eq!(ids(&out), vec![1, 0, 2]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in PerturbMode::ALL {
            assert_eq!(m.as_str().parse::<PerturbMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("shuffle".parse::<PerturbMode>().is_err());
    }

    #[test]
    fn bad_fixed_permutation_is_rejected() {
        let dag = DagTemplate::standard();
        let fixed: FixedPermutations = [vec![0, 0, 1], vec![], vec![]];
        assert!(perturb(&fake_steps(3), PerturbMode::R1, &fixed, &dag).is_err());
    }
}
