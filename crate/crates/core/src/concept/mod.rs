//! Concept-level causal graphs.
//!
//! Graphs come either from a teacher model prompted with the packaged
//! extraction prompt, or straight from the generating DAG
//! ([`crate::orderperturb::oracle_graph`]). Judged graphs are scored per
//! instance; annotation cost is estimated from token counts and prices.

mod graph;
mod scoring;
mod teacher;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub use graph::{normalize_for_match, occurrences, validate_graph, ConceptGraph, ValidationReport, Violation};
pub use scoring::{estimate_cost, score_graphs, GraphScores};
pub use teacher::{
    build_messages, decode_graph, extract_graph, first_json_object, AnnotationRecord,
    AnnotationResult, ChatMessage, Completion, HttpTeacher, MockTeacher, ProviderConfig, Teacher,
    API_KEY_ENV, DEMO1_INPUT, DEMO1_OUTPUT, DEMO2_INPUT, DEMO2_OUTPUT, SYSTEM_PROMPT,
};

use crate::{Error, Result};

pub fn write_annotations(path: &Path, results: &[AnnotationResult]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for r in results {
        serde_json::to_writer(&mut w, &r.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Annotates `(id, question, answer)` items with at most `config.concurrency`
/// requests in flight. Output order follows input order.
pub fn annotate_all(
    items: &[(String, String, String)],
    teacher: &dyn Teacher,
    config: &ProviderConfig,
) -> Result<Vec<AnnotationResult>> {
    let workers = config.concurrency.max(1);
    let mut slots: Vec<Option<Result<AnnotationResult>>> = (0..items.len()).map(|_| None).collect();
    for (chunk_items, chunk_slots) in items.chunks(workers).zip(slots.chunks_mut(workers)) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk_items
                .iter()
                .map(|(id, q, a)| scope.spawn(move || extract_graph(id, q, a, teacher, config)))
                .collect();
            for (slot, h) in chunk_slots.iter_mut().zip(handles) {
                *slot = Some(h.join().unwrap_or_else(|_| {
                    Err(Error::Transport("annotation worker panicked".into()))
                }));
            }
        });
    }
    slots.into_iter().map(|s| s.expect("filled")).collect()
}
