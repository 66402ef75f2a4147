//! The order-perturbed synthetic reasoning corpus.
//!
//! Two integer sources feed a fixed fifteen-variable DAG. Each sample carries
//! the canonical reasoning steps (one per non-source variable, topological
//! order) and, per training mode, a reordering of them.

mod dag;
mod perturb;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dag::{DagTemplate, Rule, Values};
pub use perturb::{perturb, perturbed_order, FixedPermutations, PerturbMode};

use crate::concept::ConceptGraph;
use crate::{Error, Result};

pub const FINAL_ANSWER_PREFIX: &str = "Therefore, the final answer is";

/// One rendered reasoning step.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Step {
    pub variable: String,
    pub text: String,
    pub value: i64,
}

/// A question, its (possibly reordered) reasoning and the answer.
#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningSample {
    pub id: String,
    pub zorin: i64,
    pub vortex: i64,
    pub question: String,
    pub steps: Vec<Step>,
    pub answer: i64,
    pub mode: PerturbMode,
    pub values: Values,
}

impl ReasoningSample {
    pub fn signature(&self) -> (i64, i64, i64) {
        (self.zorin, self.vortex, self.answer)
    }

    pub fn final_line(&self) -> String {
        format!("{FINAL_ANSWER_PREFIX} {}.", self.answer)
    }

    /// Response text: reasoning steps, one per line, then the final line.
    pub fn response(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&s.text);
            out.push('\n');
        }
        out.push_str(&self.final_line());
        out
    }

    pub fn full_text(&self) -> String {
        format!("{}\n{}", self.question, self.response())
    }

    pub fn to_record(&self) -> SampleRecord {
        SampleRecord {
            id: self.id.clone(),
            mode: self.mode,
            question: self.question.clone(),
            steps: self.steps.iter().map(|s| s.text.clone()).collect(),
            answer: self.answer,
            values: self.values.clone(),
            signature: [self.zorin, self.vortex, self.answer],
        }
    }

    pub fn from_record(record: SampleRecord) -> Result<Self> {
        let steps = record
            .steps
            .iter()
            .map(|text| parse_step(text))
            .collect::<Result<Vec<_>>>()?;
        let [zorin, vortex, answer] = record.signature;
        if answer != record.answer {
            return Err(Error::Contract(format!(
                "{}: signature answer {answer} != answer {}",
                record.id, record.answer
            )));
        }
        Ok(Self {
            id: record.id,
            zorin,
            vortex,
            question: record.question,
            steps,
            answer: record.answer,
            mode: record.mode,
            values: record.values,
        })
    }
}

/// On-disk form of a sample: one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub mode: PerturbMode,
    pub question: String,
    pub steps: Vec<String>,
    pub answer: i64,
    pub values: Values,
    pub signature: [i64; 3],
}

fn parse_step(text: &str) -> Result<Step> {
    let bad = || Error::Contract(format!("malformed step {text:?}"));
    let (variable, _) = text.split_once(" = ").ok_or_else(bad)?;
    let (_, value) = text.rsplit_once(" = ").ok_or_else(bad)?;
    Ok(Step {
        variable: variable.to_string(),
        text: text.to_string(),
        value: value.trim().parse().map_err(|_| bad())?,
    })
}

/// Canonical steps for evaluated `values`: `"Name = (expr) = value"` per rule.
pub fn render_steps(values: &Values, dag: &DagTemplate) -> Vec<Step> {
    dag.rules
        .iter()
        .map(|r| {
            let value = values[r.name];
            Step {
                variable: r.name.to_string(),
                text: format!("{} = {} = {value}", r.name, r.expr),
                value,
            }
        })
        .collect()
}

/// Builds the canonical-order sample for a pair of source values.
pub fn canonical_sample(id: String, zorin: i64, vortex: i64, dag: &DagTemplate) -> ReasoningSample {
    let values = dag.evaluate(zorin, vortex);
    let steps = render_steps(&values, dag);
    ReasoningSample {
        id,
        zorin,
        vortex,
        question: dag.question(zorin, vortex),
        answer: values[dag.target],
        steps,
        mode: PerturbMode::Normal,
        values,
    }
}

/// Ground-truth concept graph read off the generating DAG.
///
/// Every reasoning step is a concept; the question is the context. Step
/// indices are canonical (topological) positions, 1-based, regardless of the
/// sample's presentation order.
pub fn oracle_graph(sample: &ReasoningSample, dag: &DagTemplate) -> ConceptGraph {
    let text_of: BTreeMap<&str, &str> = sample
        .steps
        .iter()
        .map(|s| (s.variable.as_str(), s.text.as_str()))
        .collect();
    let mut graph = ConceptGraph {
        context: sample.question.clone(),
        ..ConceptGraph::default()
    };
    let mut step_of = BTreeMap::new();
    for (pos, rule) in dag.rules.iter().enumerate() {
        let Some(effect) = text_of.get(rule.name) else { continue };
        graph.concepts.push(effect.to_string());
        step_of.insert(effect.to_string(), pos + 1);
        let causes: Vec<String> = rule
            .parents
            .iter()
            .filter_map(|p| text_of.get(p).map(|t| t.to_string()))
            .collect();
        if !causes.is_empty() {
            graph.edges.insert(effect.to_string(), causes);
        }
    }
    graph.step_of = Some(step_of);
    graph
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub n_train: usize,
    pub n_test: usize,
    pub modes: Vec<PerturbMode>,
    pub seed: u64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            modes: PerturbMode::ALL.to_vec(),
            seed: 42,
        }
    }
}

/// Canonical base samples plus the dataset-wide random orders.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<ReasoningSample>,
    pub test: Vec<ReasoningSample>,
    pub permutations: FixedPermutations,
    pub options: GenOptions,
}

impl Dataset {
    /// Training samples presented in `mode`.
    pub fn train_for(&self, mode: PerturbMode, dag: &DagTemplate) -> Result<Vec<ReasoningSample>> {
        self.train
            .iter()
            .map(|s| {
                Ok(ReasoningSample {
                    steps: perturb(&s.steps, mode, &self.permutations, dag)?,
                    mode,
                    ..s.clone()
                })
            })
            .collect()
    }
}

/// Samples unique `(zorin, vortex, stardust)` signatures from a single seeded
/// stream: first the three random orders, then training, then test sources.
pub fn generate(options: &GenOptions, dag: &DagTemplate) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let n_steps = dag.rules.len();
    let mut draw_perm = || {
        let mut p: Vec<usize> = (0..n_steps).collect();
        p.shuffle(&mut rng);
        p
    };
    let permutations: FixedPermutations = [draw_perm(), draw_perm(), draw_perm()];

    let mut achievable = HashSet::new();
    for z in 0..=100 {
        for v in 0..=100 {
            achievable.insert((z, v, dag.evaluate(z, v)[dag.target]));
        }
    }
    let wanted = options.n_train + options.n_test;
    if wanted > achievable.len() {
        return Err(Error::Generation(format!(
            "{wanted} unique signatures requested, only {} achievable",
            achievable.len()
        )));
    }

    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(wanted);
    while samples.len() < wanted {
        let zorin = rng.gen_range(0..=100);
        let vortex = rng.gen_range(0..=100);
        let answer = dag.evaluate(zorin, vortex)[dag.target];
        if !seen.insert((zorin, vortex, answer)) {
            continue;
        }
        let k = samples.len();
        let id = if k < options.n_train {
            format!("train-{k:05}")
        } else {
            format!("test-{:05}", k - options.n_train)
        };
        samples.push(canonical_sample(id, zorin, vortex, dag));
    }
    let test = samples.split_off(options.n_train);
    Ok(Dataset {
        train: samples,
        test,
        permutations,
        options: options.clone(),
    })
}

/// Summary written next to the generated files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub modes: Vec<PerturbMode>,
    pub permutations: IndexMap<String, Vec<usize>>,
    pub files: IndexMap<String, String>,
}

pub fn train_file_name(mode: PerturbMode) -> String {
    format!("train_{}.jsonl", mode.as_str())
}

pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one training file per mode, the canonical test file and the manifest.
pub fn generate_dataset(dir: &Path, options: &GenOptions, dag: &DagTemplate) -> Result<Manifest> {
    let data = generate(options, dag)?;
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut files = IndexMap::new();
    for &mode in &options.modes {
        let name = train_file_name(mode);
        write_samples(&dir.join(&name), &data.train_for(mode, dag)?)?;
        files.insert(mode.as_str().to_string(), name);
    }
    write_samples(&dir.join(TEST_FILE), &data.test)?;
    files.insert("test".into(), TEST_FILE.into());

    let manifest = Manifest {
        seed: options.seed,
        n_train: data.train.len(),
        n_test: data.test.len(),
        modes: options.modes.clone(),
        permutations: ["R1", "R2", "R3"]
            .iter()
            .zip(&data.permutations)
            .map(|(k, p)| (k.to_string(), p.clone()))
            .collect(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, body + "\n").map_err(|e| Error::file(&path, e))?;
    Ok(manifest)
}

pub fn write_samples(path: &Path, samples: &[ReasoningSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, &s.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<ReasoningSample>> {
    let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(ReasoningSample::from_record(serde_json::from_str(&line)?)?);
    }
    Ok(out)
}

pub fn data_file(dir: &Path, mode: PerturbMode) -> PathBuf {
    dir.join(train_file_name(mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let dag = DagTemplate::standard();
        let s = canonical_sample("x".into(), 13, 77, &dag);
        let back = ReasoningSample::from_record(s.to_record()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_unknown_record_keys() {
        let line = r#"{"id":"a","mode":"normal","question":"q","steps":[],"answer":1,"values":{},"signature":[0,0,1],"extra":1}"#;
        assert!(serde_json::from_str::<SampleRecord>(line).is_err());
    }

    #[test]
    fn exhaustion_is_reported() {
        let opts = GenOptions {
            n_train: 10_000,
            n_test: 500,
            ..GenOptions::default()
        };
        let err = generate(&opts, &DagTemplate::standard()).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn oracle_graph_keeps_sources_in_context() {
        let dag = DagTemplate::standard();
        let s = canonical_sample("x".into(), 80, 79, &dag);
        let g = oracle_graph(&s, &dag);
        assert_eq!(g.concepts.len(), 13);
        assert!(g.concepts.iter().all(|c| !c.starts_with("Zorin") && !c.starts_with("Vortex")));
        assert!(g.context.contains("Zorin (value: 80)"));
    }
}
