//! Value-aware attention alignment.
//!
//! Attention maps are reweighted by value-row norms and averaged over heads.
//! Each supervised row then pays a ratio loss when its encouraged mass is not
//! at least `α` times its neutral mass, plus a squared penalty on
//! discouraged cells.

use serde::{Deserialize, Serialize};

use crate::dlm::{dlm_sft_loss, AttentionCapture, NoisedSequence};
use crate::mask::{Convention, SupervisionMask};
use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

/// How value-row norms enter the weighted attention map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VWeighting {
    /// Column `j` scaled by `‖V_j‖`.
    #[default]
    KeyIndex,
    /// Row `i` scaled by `‖V_i‖`.
    QueryIndex,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Warm-up end; `0.1 · t2` when unset.
    pub t1: Option<f64>,
    /// Schedule length; the planned number of optimizer steps when unset.
    pub t2: Option<f64>,
    /// All layers when unset.
    pub supervised_layers: Option<Vec<usize>>,
    pub v_weighting: VWeighting,
    pub convention: Convention,
    pub eps: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 3.0,
            lambda: 100.0,
            gamma_min: 0.0,
            gamma_max: 1.0,
            t1: None,
            t2: None,
            supervised_layers: None,
            v_weighting: VWeighting::KeyIndex,
            convention: Convention::EffectRows,
            eps: 1e-8,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("align: {m}")));
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        if !(self.gamma_min <= self.gamma_max) {
            return bad("gamma_min must not exceed gamma_max");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if let (Some(t1), Some(t2)) = (self.t1, self.t2) {
            if !(0.0 <= t1 && t1 <= t2) {
                return bad("need 0 <= t1 <= t2");
            }
        }
        Ok(())
    }

    /// Resolves the schedule for a run of `planned_steps` optimizer steps.
    pub fn schedule(&self, planned_steps: u64) -> Schedule {
        let t2 = self.t2.unwrap_or(planned_steps as f64);
        Schedule {
            gamma_min: self.gamma_min,
            gamma_max: self.gamma_max,
            t1: self.t1.unwrap_or(0.1 * t2),
            t2,
        }
    }

    pub fn layers(&self, n_layers: usize) -> Result<Vec<usize>> {
        match &self.supervised_layers {
            None => Ok((0..n_layers).collect()),
            Some(l) => {
                if let Some(bad) = l.iter().find(|&&x| x >= n_layers) {
                    return Err(Error::Config(format!(
                        "align.supervised_layers contains {bad}, model has {n_layers} layers"
                    )));
                }
                Ok(l.clone())
            }
        }
    }
}

/// Triangular γ schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub t1: f64,
    pub t2: f64,
}

impl Schedule {
    pub fn at(&self, t: f64) -> f64 {
        gamma_at(t, self)
    }
}

/// Linear from `γ_min` at 0 to `γ_max` at `t1`, back to `γ_min` at `t2`.
/// `t` is clamped to `[0, t2]`.
pub fn gamma_at(t: f64, s: &Schedule) -> f64 {
    let t = t.clamp(0.0, s.t2.max(0.0));
    let span = s.gamma_max - s.gamma_min;
    if t < s.t1 {
        s.gamma_min + span * (t / s.t1)
    } else if s.t2 > s.t1 {
        s.gamma_max - span * ((t - s.t1) / (s.t2 - s.t1))
    } else {
        s.gamma_max
    }
}

/// `Ã = (1/n_h) Σ_h w(A_h, ‖V_h‖)` for one captured layer, on the tape.
pub fn weighted_attention(tape: &mut Tape, capture: &AttentionCapture, layer: usize, weighting: VWeighting) -> Result<Var> {
    let heads = capture.layer(layer)?;
    if heads.is_empty() {
        return Err(Error::Contract(format!("layer {layer} has no heads")));
    }
    let mut acc: Option<Var> = None;
    for h in heads {
        let w = match weighting {
            VWeighting::KeyIndex => {
                let n = tape.l2_norm_rows(h.value)?;
                tape.scale_cols(h.attn, n)?
            }
            VWeighting::QueryIndex => {
                let n = tape.l2_norm_rows(h.value)?;
                tape.scale_rows(h.attn, n)?
            }
            VWeighting::None => h.attn,
        };
        acc = Some(match acc {
            None => w,
            Some(a) => tape.add(a, w)?,
        });
    }
    Ok(tape.scale(acc.expect("nonempty"), 1.0 / heads.len() as f64))
}

/// Loss terms of one supervised row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowStat {
    pub row: usize,
    /// Mean over encouraged columns, when there are any.
    pub a1: Option<f64>,
    /// Mean over neutral columns, when there are any.
    pub a0: Option<f64>,
    /// `Ā₁/(Ā₀+ε)`, when both sets are nonempty.
    pub ratio: Option<f64>,
    pub l_ratio: f64,
    pub l_neg: f64,
    pub l_row: f64,
}

impl RowStat {
    pub fn satisfied(&self) -> bool {
        self.l_ratio == 0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RowLossBreakdown {
    pub rows: Vec<RowStat>,
    /// Mean of `l_row` over the rows; 0 when there are none.
    pub aggregate: f64,
}

/// Row losses of `Ã` against `mask`, with `∂aggregate/∂Ã`.
pub fn row_losses(
    weighted: &Tensor,
    mask: &SupervisionMask,
    alpha: f64,
    lambda: f64,
    eps: f64,
) -> Result<(RowLossBreakdown, Tensor)> {
    let (m, n) = weighted.dims2()?;
    if m != mask.seq_len || n != mask.seq_len {
        return Err(Error::Dimension(format!(
            "weighted attention {m}×{n} vs mask of length {}",
            mask.seq_len
        )));
    }
    let mut grad = Tensor::zeros(&[m, n]);
    let valid = mask.rows().count();
    if valid == 0 {
        return Ok((RowLossBreakdown::default(), grad));
    }
    let norm = 1.0 / valid as f64;
    let mut rows = Vec::with_capacity(valid);
    let mut total = 0.0;

    for (i, entries) in mask.rows() {
        let a = weighted.row(i);
        let (mut s1, mut n1, mut s_nz, mut l_neg) = (0.0, 0usize, 0.0, 0.0);
        for &(_, j, v) in entries {
            let x = a[j as usize];
            s_nz += x;
            if v > 0 {
                s1 += x;
                n1 += 1;
            } else {
                l_neg += x * x;
            }
        }
        l_neg *= lambda;
        let n0 = n - entries.len();
        let a1 = (n1 > 0).then(|| s1 / n1 as f64);
        let a0 = (n0 > 0).then(|| (a.iter().sum::<f64>() - s_nz) / n0 as f64);
        let ratio = match (a1, a0) {
            (Some(x1), Some(x0)) => Some(x1 / (x0 + eps)),
            _ => None,
        };

        let g = &mut grad.data_mut()[i * n..(i + 1) * n];
        let mut l_ratio = 0.0;
        if let (Some(r), Some(x1), Some(x0)) = (ratio, a1, a0) {
            if r < alpha {
                let s = x1 + x0;
                let (d1, d0) = if s > eps {
                    l_ratio = -x1 / s;
                    (-x0 / (s * s), x1 / (s * s))
                } else {
                    l_ratio = -x1 / eps;
                    (-1.0 / eps, 0.0)
                };
                let g0 = norm * d0 / n0 as f64;
                if g0 != 0.0 {
                    for gj in g.iter_mut() {
                        *gj += g0;
                    }
                }
                let g1 = norm * d1 / n1 as f64;
                for &(_, j, v) in entries {
                    // Undo the neutral share on nonzero columns.
                    g[j as usize] -= g0;
                    if v > 0 {
                        g[j as usize] += g1;
                    }
                }
            }
        }
        for &(_, j, v) in entries {
            if v < 0 {
                g[j as usize] += norm * 2.0 * lambda * a[j as usize];
            }
        }
        let l_row = l_ratio + l_neg;
        total += l_row;
        rows.push(RowStat {
            row: i,
            a1,
            a0,
            ratio,
            l_ratio,
            l_neg,
            l_row,
        });
    }
    Ok((
        RowLossBreakdown {
            rows,
            aggregate: total * norm,
        },
        grad,
    ))
}

/// Mean over supervised layers of the per-layer aggregate row loss, as a
/// tape scalar. `None` for an empty mask.
pub fn alignment_loss(
    tape: &mut Tape,
    capture: &AttentionCapture,
    mask: &SupervisionMask,
    config: &AlignConfig,
) -> Result<Option<(Var, Vec<RowLossBreakdown>)>> {
    if mask.is_empty() {
        return Ok(None);
    }
    let layers = config.layers(capture.layers.len())?;
    if layers.is_empty() {
        return Ok(None);
    }
    let mut acc: Option<Var> = None;
    let mut breakdowns = Vec::with_capacity(layers.len());
    for &l in &layers {
        let w = weighted_attention(tape, capture, l, config.v_weighting)?;
        let (bd, grad) = row_losses(tape.value(w), mask, config.alpha, config.lambda, config.eps)?;
        let term = tape.scalar_fn(w, bd.aggregate, grad)?;
        breakdowns.push(bd);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let mean = tape.scale(acc.expect("nonempty"), 1.0 / layers.len() as f64);
    Ok(Some((mean, breakdowns)))
}

/// One sample of a batch as seen by [`total_loss`].
pub struct BatchItem<'a> {
    pub logits: Var,
    pub noised: &'a NoisedSequence,
    pub capture: &'a AttentionCapture,
    pub mask: Option<&'a SupervisionMask>,
}

pub struct TotalLoss {
    pub loss: Var,
    /// Batch mean of the masked-token loss.
    pub loss_dlm: f64,
    /// Mean alignment loss over supervised samples; `None` without any.
    pub loss_align: Option<f64>,
    pub rows: Vec<RowStat>,
}

/// `mean_b L_DLM(b) + γ · mean_{supervised b} L_align(b)`.
///
/// Alignment statistics are computed whenever masks are present. The
/// alignment term joins the graph only when `gamma != 0`, so a zero weight
/// leaves the gradient identical to pure SFT.
pub fn total_loss(
    tape: &mut Tape,
    items: &[BatchItem<'_>],
    gamma: f64,
    config: &AlignConfig,
    tokenizer_hash: &str,
    reweight_by_inv_t: bool,
) -> Result<TotalLoss> {
    if items.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let inv_b = 1.0 / items.len() as f64;
    let mut dlm_terms = Vec::with_capacity(items.len());
    let mut align_terms = Vec::new();
    let mut rows = Vec::new();
    for item in items {
        dlm_terms.push(dlm_sft_loss(tape, item.logits, item.noised, reweight_by_inv_t)?);
        let Some(mask) = item.mask else { continue };
        if mask.tokenizer_hash != tokenizer_hash {
            return Err(Error::Stale(format!("mask {} was built for another tokenizer", mask.id)));
        }
        if mask.seq_len != item.noised.noised.len() {
            return Err(Error::Stale(format!(
                "mask {} covers {} tokens, sequence has {}",
                mask.id,
                mask.seq_len,
                item.noised.noised.len()
            )));
        }
        if let Some((term, bds)) = alignment_loss(tape, item.capture, mask, config)? {
            align_terms.push(term);
            rows.extend(bds.into_iter().flat_map(|b| b.rows));
        }
    }

    let mut loss_dlm = 0.0;
    let mut total: Option<Var> = None;
    for d in dlm_terms {
        loss_dlm += tape.value(d).item()? * inv_b;
        let scaled = tape.scale(d, inv_b);
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let mut total = total.expect("nonempty batch");
    let loss_align = if align_terms.is_empty() {
        None
    } else {
        let inv_s = 1.0 / align_terms.len() as f64;
        let mut mean = 0.0;
        for &a in &align_terms {
            mean += tape.value(a).item()? * inv_s;
        }
        if gamma != 0.0 {
            for a in align_terms {
                let scaled = tape.scale(a, gamma * inv_s);
                total = tape.add(total, scaled)?;
            }
        }
        Some(mean)
    };
    Ok(TotalLoss {
        loss: total,
        loss_dlm,
        loss_align,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(n: usize, entries: Vec<(u32, u32, i8)>) -> SupervisionMask {
        SupervisionMask::new("m".into(), n, "h".into(), entries).unwrap()
    }

    #[test]
    fn symmetric_row_gives_minus_half() {
        let a = Tensor::from_rows(&[vec![0.25, 0.25, 0.25, 0.25], vec![0.25; 4], vec![0.25; 4], vec![0.25; 4]]).unwrap();
        let (bd, _) = row_losses(&a, &mask(4, vec![(0, 1, 1)]), 3.0, 0.0, 1e-8).unwrap();
        assert!((bd.rows[0].l_ratio + 0.5).abs() < 1e-12);
    }

    #[test]
    fn satisfied_ratio_is_zero() {
        let a = Tensor::from_rows(&[vec![0.9, 0.05, 0.05], vec![0.3; 3], vec![0.3; 3]]).unwrap();
        let (bd, _) = row_losses(&a, &mask(3, vec![(0, 0, 1)]), 3.0, 1.0, 1e-8).unwrap();
        assert_eq!(bd.rows[0].l_ratio, 0.0);
        assert!(bd.rows[0].satisfied());
    }

    #[test]
    fn schedule_endpoints() {
        let s = AlignConfig::default().schedule(100);
        assert_eq!(s.t1, 10.0);
        assert_eq!(gamma_at(0.0, &s), 0.0);
        assert_eq!(gamma_at(10.0, &s), 1.0);
        assert_eq!(gamma_at(100.0, &s), 0.0);
        assert_eq!(gamma_at(55.0, &s), 0.5);
        assert_eq!(gamma_at(-3.0, &s), 0.0);
        assert_eq!(gamma_at(500.0, &s), 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = AlignConfig {
            gamma_min: 2.0,
            ..AlignConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AlignConfig {
            t1: Some(5.0),
            t2: Some(4.0),
            ..AlignConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
