use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{weighted_attention, VWeighting};
use crate::concept::ConceptGraph;
use crate::dlm::{forward, Checkpoint};
use crate::mask::{locate_spans, tokenize_pair};
use crate::numerics::{Tape, Tensor};
use crate::orderperturb::ReasoningSample;
use crate::{Error, Result};

/// Mean value-weighted attention from the answer row into one concept span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanBar {
    pub layer: usize,
    pub concept: String,
    pub start: usize,
    pub end: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub answer_position: usize,
    pub files: Vec<PathBuf>,
    pub bars: Vec<SpanBar>,
}

/// Writes, per layer: head-averaged attention, value-weighted attention,
/// per-token value norms and span bars as CSV, plus a heatmap PNG of the
/// weighted map.
pub fn export_attention(
    ckpt: &Checkpoint,
    sample: &ReasoningSample,
    graph: &ConceptGraph,
    layers: &[usize],
    weighting: VWeighting,
    out_dir: &Path,
) -> Result<AttentionExport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let tok = tokenize_pair(&sample.question, &sample.response(), &ckpt.vocab, ckpt.response_len)?;
    let answer_position = answer_position(&tok.tokens)
        .ok_or_else(|| Error::Contract(format!("{}: no final answer token", sample.id)))?;
    let spans = locate_spans(graph, &tok);

    let mut tape = Tape::new();
    let p = ckpt.params.bind(&mut tape, false);
    let fo = forward(&mut tape, &p, &ckpt.config, &tok.ids, true)?;
    let mut files = Vec::new();
    let mut bars = Vec::new();

    let tokens_path = out_dir.join("tokens.csv");
    let mut w = csv::Writer::from_path(&tokens_path)?;
    w.write_record(["index", "token", "id"])?;
    for (i, (t, id)) in tok.tokens.iter().zip(&tok.ids).enumerate() {
        w.write_record([i.to_string(), t.clone(), id.to_string()])?;
    }
    w.flush()?;
    files.push(tokens_path);

    for &layer in layers {
        let raw = weighted_attention(&mut tape, &fo.capture, layer, VWeighting::None)?;
        let weighted = weighted_attention(&mut tape, &fo.capture, layer, weighting)?;
        let raw = tape.value(raw).clone();
        let weighted = tape.value(weighted).clone();

        let p_raw = out_dir.join(format!("layer{layer}_attention.csv"));
        write_matrix_csv(&p_raw, &raw)?;
        let p_w = out_dir.join(format!("layer{layer}_weighted.csv"));
        write_matrix_csv(&p_w, &weighted)?;

        let heads = fo.capture.layer(layer)?;
        let p_norms = out_dir.join(format!("layer{layer}_value_norms.csv"));
        let mut w = csv::Writer::from_path(&p_norms)?;
        let mut header = vec!["index".to_string(), "token".to_string()];
        header.extend((0..heads.len()).map(|h| format!("head{h}")));
        header.push("mean".into());
        w.write_record(&header)?;
        let norms: Vec<Tensor> = heads
            .iter()
            .map(|h| crate::numerics::l2_norm_rows(tape.value(h.value)))
            .collect::<Result<_>>()?;
        for (i, t) in tok.tokens.iter().enumerate() {
            let per: Vec<f64> = norms.iter().map(|n| n.data()[i]).collect();
            let mut rec = vec![i.to_string(), t.clone()];
            rec.extend(per.iter().map(f64::to_string));
            rec.push((per.iter().sum::<f64>() / per.len() as f64).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;

        let p_bars = out_dir.join(format!("layer{layer}_spans.csv"));
        let mut w = csv::Writer::from_path(&p_bars)?;
        let row = weighted.row(answer_position);
        for span in spans.spans.values() {
            let cells = &row[span.start..span.end];
            let bar = SpanBar {
                layer,
                concept: span.concept.clone(),
                start: span.start,
                end: span.end,
                weight: cells.iter().sum::<f64>() / cells.len() as f64,
            };
            w.serialize(&bar)?;
            bars.push(bar);
        }
        w.flush()?;

        let p_png = out_dir.join(format!("layer{layer}_weighted.png"));
        write_heatmap(&p_png, &weighted)?;
        files.extend([p_raw, p_w, p_norms, p_bars, p_png]);
    }
    Ok(AttentionExport {
        answer_position,
        files,
        bars,
    })
}

/// Token position of the number following the last "answer is".
fn answer_position(tokens: &[String]) -> Option<usize> {
    (2..tokens.len())
        .rev()
        .find(|&i| tokens[i - 2] == "answer" && tokens[i - 1] == "is")
}

/// Headerless rows of shortest round-trip decimals.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let (rows, _) = m.dims2()?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..rows {
        w.write_record(m.row(i).iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| Error::Contract(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

/// White (0) to deep purple (row maximum over the whole map).
fn write_heatmap(path: &Path, m: &Tensor) -> Result<()> {
    let (rows, cols) = m.dims2()?;
    let scale = (512 / rows.max(cols).max(1)).max(1) as u32;
    let max = m.data().iter().copied().fold(0.0_f64, f64::max);
    let img = image::RgbImage::from_fn(cols as u32 * scale, rows as u32 * scale, |x, y| {
        let v = m.at((y / scale) as usize, (x / scale) as usize);
        let s = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        let lerp = |a: f64, b: f64| (a + (b - a) * s).round() as u8;
        image::Rgb([lerp(255.0, 84.0), lerp(255.0, 24.0), lerp(255.0, 120.0)])
    });
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
