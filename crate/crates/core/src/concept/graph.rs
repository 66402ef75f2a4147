use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Concept-level causal graph over one sample.
///
/// `edges` maps each effect concept to the concepts it is caused by, in the
/// order the producer emitted them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptGraph {
    pub concepts: Vec<String>,
    pub context: String,
    pub edges: IndexMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_of: Option<BTreeMap<String, usize>>,
}

impl ConceptGraph {
    /// All `(cause, effect)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges
            .iter()
            .flat_map(|(effect, causes)| causes.iter().map(move |c| (c.as_str(), effect.as_str())))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(Vec::len).sum()
    }

    pub fn step(&self, concept: &str) -> Option<usize> {
        self.step_of.as_ref().and_then(|s| s.get(concept).copied())
    }

    /// First cycle found in the cause→effect relation, if any.
    pub fn find_cycle(&self) -> Option<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        // effect -> causes is the adjacency; a cycle there is a cycle in cause->effect too
        fn visit<'a>(
            node: &'a str,
            graph: &'a ConceptGraph,
            marks: &mut HashMap<&'a str, Mark>,
            stack: &mut Vec<&'a str>,
        ) -> Option<Vec<String>> {
            match marks.get(node) {
                Some(Mark::Done) => return None,
                Some(Mark::Open) => {
                    let start = stack.iter().position(|n| *n == node).unwrap_or(0);
                    return Some(stack[start..].iter().map(|s| s.to_string()).collect());
                }
                None => {}
            }
            marks.insert(node, Mark::Open);
            stack.push(node);
            if let Some(causes) = graph.edges.get(node) {
                for c in causes {
                    if let Some(cycle) = visit(c, graph, marks, stack) {
                        return Some(cycle);
                    }
                }
            }
            stack.pop();
            marks.insert(node, Mark::Done);
            None
        }
        let mut marks = HashMap::new();
        for effect in self.edges.keys() {
            let mut stack = Vec::new();
            if let Some(cycle) = visit(effect, self, &mut marks, &mut stack) {
                return Some(cycle);
            }
        }
        None
    }
}

/// One problem found by [`validate_graph`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Cycle { concepts: Vec<String> },
    NotInText { concept: String },
    Ambiguous { concept: String, occurrences: usize },
    EmptyCauses { effect: String },
    UnknownEndpoint { concept: String },
    DuplicateConcept { concept: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Canonical form used to compare concept strings with source text:
/// inline-math delimiters, thin spaces, parentheses and whitespace are dropped.
pub fn normalize_for_match(text: &str) -> String {
    text.replace("\\(", "")
        .replace("\\)", "")
        .replace("\\,", "")
        .chars()
        .filter(|c| !c.is_whitespace() && *c != '(' && *c != ')')
        .collect()
}

/// Number of (possibly overlapping) occurrences of `needle` in `haystack`
/// after normalisation.
pub fn occurrences(haystack: &str, needle: &str) -> usize {
    let h = normalize_for_match(haystack);
    let n = normalize_for_match(needle);
    if n.is_empty() {
        return 0;
    }
    let mut count = 0;
    let mut from = 0;
    while let Some(pos) = h[from..].find(&n) {
        count += 1;
        from += pos + h[from + pos..].chars().next().map_or(1, char::len_utf8);
    }
    count
}

/// Checks acyclicity, per-concept uniqueness in `source_text`, endpoint
/// membership and non-empty cause lists.
pub fn validate_graph(graph: &ConceptGraph, source_text: &str) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = HashMap::new();
    for c in &graph.concepts {
        if seen.insert(c.as_str(), ()).is_some() {
            violations.push(Violation::DuplicateConcept { concept: c.clone() });
        }
        match occurrences(source_text, c) {
            0 => violations.push(Violation::NotInText { concept: c.clone() }),
            1 => {}
            n => violations.push(Violation::Ambiguous {
                concept: c.clone(),
                occurrences: n,
            }),
        }
    }
    for (effect, causes) in &graph.edges {
        if causes.is_empty() {
            violations.push(Violation::EmptyCauses {
                effect: effect.clone(),
            });
        }
        for endpoint in std::iter::once(effect).chain(causes) {
            if !seen.contains_key(endpoint.as_str()) {
                violations.push(Violation::UnknownEndpoint {
                    concept: endpoint.clone(),
                });
            }
        }
    }
    if let Some(concepts) = graph.find_cycle() {
        violations.push(Violation::Cycle { concepts });
    }
    ValidationReport { violations }
}
