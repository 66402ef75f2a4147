//! Training, evaluation, attention export and SFT-versus-alignment
//! comparison, all driven by a [`RunConfig`].

mod compare;
mod eval;
mod train;
mod viz;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use compare::{compare_runs, ArmSummary, ComparisonRow, ComparisonTable};
pub use eval::{evaluate, extract_answer, probe, EvalRecord, EvalReport, ProbeStats};
pub use train::{
    checkpoint_name, read_metrics, train, EpochSummary, MetricsRow, TrainRun, CONFIG_FILE, EPOCHS_FILE,
    METRICS_FILE,
};
pub use viz::{export_attention, read_matrix_csv, AttentionExport, SpanBar};

use crate::concept::{read_annotations, ConceptGraph};
use crate::config::RunConfig;
use crate::mask::{mask_for_sample, save_masks, tokenize_pair, SpanFailure, SupervisionMask, Tokenization, Vocab};
use crate::orderperturb::{data_file, oracle_graph, read_samples, DagTemplate, Manifest, ReasoningSample, MANIFEST_FILE, TEST_FILE};
use crate::{Error, Result};

/// Vocabulary over every sample file listed in the data manifest.
pub fn corpus_vocab(data_dir: &Path) -> Result<Vocab> {
    let manifest = read_manifest(data_dir)?;
    let mut texts = BTreeSet::new();
    for name in manifest.files.values() {
        for s in read_samples(&data_dir.join(name))? {
            texts.insert(s.full_text());
        }
    }
    Ok(Vocab::build(texts.iter().map(String::as_str)))
}

pub fn read_manifest(data_dir: &Path) -> Result<Manifest> {
    let path = data_dir.join(MANIFEST_FILE);
    let body = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    Ok(serde_json::from_str(&body)?)
}

pub fn load_train(cfg: &RunConfig) -> Result<Vec<ReasoningSample>> {
    let mut s = read_samples(&data_file(&cfg.data.dir, cfg.data.train_mode))?;
    if let Some(n) = cfg.train.limit {
        s.truncate(n);
    }
    if s.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    Ok(s)
}

pub fn load_test(cfg: &RunConfig) -> Result<Vec<ReasoningSample>> {
    let mut s = read_samples(&cfg.data.dir.join(TEST_FILE))?;
    if let Some(n) = cfg.eval.limit {
        s.truncate(n);
    }
    Ok(s)
}

/// `[BOS] question | response [EOS …]` padded to `response_len`.
pub fn sample_tokens(sample: &ReasoningSample, vocab: &Vocab, response_len: usize) -> Result<Tokenization> {
    tokenize_pair(&sample.question, &sample.response(), vocab, Some(response_len))
        .map_err(|e| Error::Contract(format!("{}: {e}", sample.id)))
}

/// Outcome of building the mask sidecar for a training file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub path: PathBuf,
    pub samples: usize,
    pub supervised: usize,
    pub entries: usize,
    pub failures: IndexMap<String, Vec<SpanFailure>>,
}

/// Builds masks for every training sample from oracle graphs, or from the
/// annotation file in `data.graphs`.
pub fn build_masks(cfg: &RunConfig) -> Result<MaskSummary> {
    let vocab = corpus_vocab(&cfg.data.dir)?;
    let hash = vocab.hash();
    let samples = read_samples(&data_file(&cfg.data.dir, cfg.data.train_mode))?;
    let dag = DagTemplate::standard();
    let annotated: Option<IndexMap<String, Option<ConceptGraph>>> = match &cfg.data.graphs {
        None => None,
        Some(p) => Some(read_annotations(p)?.into_iter().map(|r| (r.id, r.graph)).collect()),
    };

    let mut masks = Vec::with_capacity(samples.len());
    let mut failures = IndexMap::new();
    for s in &samples {
        let tok = sample_tokens(s, &vocab, cfg.response_len())?;
        let graph = match &annotated {
            None => Some(oracle_graph(s, &dag)),
            Some(map) => map.get(&s.id).cloned().flatten(),
        };
        let Some(graph) = graph else {
            masks.push(SupervisionMask::empty(s.id.clone(), tok.len(), hash.clone()));
            continue;
        };
        let (mask, fails) = mask_for_sample(&s.id, &graph, &tok, &hash, cfg.align.convention)?;
        if !fails.is_empty() {
            failures.insert(s.id.clone(), fails);
        }
        masks.push(mask);
    }
    let path = cfg.mask_path();
    save_masks(&path, &masks)?;
    Ok(MaskSummary {
        path,
        samples: masks.len(),
        supervised: masks.iter().filter(|m| !m.is_empty()).count(),
        entries: masks.iter().map(|m| m.entries().len()).sum(),
        failures,
    })
}
