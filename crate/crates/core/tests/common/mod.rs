#![allow(dead_code)]

use std::collections::BTreeMap;

use cdlm_core::dlm::{mask_at_level, Denoiser, Model, ModelConfig, ModelParams, NoisedSequence};
use cdlm_core::mask::{SupervisionMask, Tokenization, MASK, PAD};
use cdlm_core::orderperturb::DagTemplate;
use cdlm_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Two layers, width 16, small enough for exhaustive finite differences.
pub fn tiny_config(vocab: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_len,
        d_ff: 32,
        init_std: 0.3,
    }
}

/// Naive triple loop.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.at(i, t) * b.at(t, j);
            }
        }
    }
    out
}

/// Rebuilds tape-bound parameters from `vars`, in `named()` order.
pub fn rebind(shape: &cdlm_core::dlm::ModelParams, vars: &[cdlm_core::Var]) -> cdlm_core::dlm::Params<cdlm_core::Var> {
    let mut k = 0;
    shape
        .try_map(|_| {
            k += 1;
            Ok(vars[k - 1])
        })
        .unwrap()
}

pub fn flat_params(p: &cdlm_core::dlm::ModelParams) -> Vec<Tensor> {
    p.named().into_iter().map(|(_, t)| t.clone()).collect()
}

/// Variable owning each token, found by walking the response line by line.
pub fn token_owners(tok: &Tokenization, steps: &[(String, String)]) -> Vec<Option<String>> {
    let words = Regex::new(r"\d+(?:\.\d+)?|[A-Za-z_]+|\S").unwrap();
    let mut owner = vec![None; tok.len()];
    let mut at = tok.prompt_len;
    for (var, text) in steps {
        let n = words.find_iter(text).count();
        for o in &mut owner[at..at + n] {
            *o = Some(var.clone());
        }
        at += n;
    }
    owner
}

/// Dense DAG-walk oracle: +1 from an effect token to a parent's token, −1
/// for the reverse, −1 towards any variable later in canonical order.
pub fn dense_oracle(owner: &[Option<String>], dag: &DagTemplate) -> BTreeMap<(u32, u32), i8> {
    let mut out = BTreeMap::new();
    for (i, a) in owner.iter().enumerate() {
        let Some(a) = a else { continue };
        for (j, b) in owner.iter().enumerate() {
            let Some(b) = b else { continue };
            if a == b {
                continue;
            }
            let ra = dag.rule(a).unwrap();
            let rb = dag.rule(b).unwrap();
            let v = if ra.parents.contains(&b.as_str()) {
                1
            } else if rb.parents.contains(&a.as_str()) {
                -1
            } else if dag.rule_index(b) > dag.rule_index(a) {
                -1
            } else {
                0
            };
            if v != 0 {
                out.insert((i as u32, j as u32), v);
            }
        }
    }
    out
}

pub const EPS: f64 = 1e-8;

/// Visits every cell of every supervised row and applies the piecewise
/// definitions directly.
pub fn double_loop(a: &Tensor, mask: &SupervisionMask, alpha: f64, lambda: f64) -> f64 {
    let (n, _) = a.dims2().unwrap();
    let mut total = 0.0;
    let mut rows = 0;
    for i in 0..n {
        let (mut s1, mut c1, mut s0, mut c0, mut neg, mut any) = (0.0, 0, 0.0, 0, 0.0, false);
        for j in 0..n {
            match mask.get(i, j) {
                1 => {
                    s1 += a.at(i, j);
                    c1 += 1;
                    any = true;
                }
                -1 => {
                    neg += a.at(i, j) * a.at(i, j);
                    any = true;
                }
                _ => {
                    s0 += a.at(i, j);
                    c0 += 1;
                }
            }
        }
        if !any {
            continue;
        }
        rows += 1;
        let mut l_ratio = 0.0;
        if c1 > 0 && c0 > 0 {
            let (m1, m0) = (s1 / c1 as f64, s0 / c0 as f64);
            if m1 / (m0 + EPS) < alpha {
                l_ratio = -m1 / (m1 + m0).max(EPS);
            }
        }
        total += l_ratio + lambda * neg;
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

pub struct Fixture {
    pub model: Model,
    pub tok: Tokenization,
    pub noised: NoisedSequence,
    pub mask: SupervisionMask,
}

/// Two layers, width 16, vocabulary 40, ten tokens, a mask with every kind
/// of row.
pub fn fixture() -> Fixture {
    let config = tiny_config(40, 10);
    let params = ModelParams::init(&config, &mut rng(31)).unwrap();
    let ids: Vec<usize> = (0..10).map(|i| 5 + (i * 11) % 35).collect();
    let tok = Tokenization {
        tokens: ids.iter().map(|i| i.to_string()).collect(),
        ids,
        prompt_len: 3,
    };
    let noised = mask_at_level(&tok, 0.5, &mut rng(32)).unwrap();
    let mask = SupervisionMask::new(
        "f".into(),
        10,
        "hash".into(),
        vec![(6, 2, 1), (6, 3, 1), (2, 6, -1), (3, 6, -1), (2, 8, -1), (8, 6, 1), (8, 7, 1), (9, 1, -1)],
    )
    .unwrap();
    Fixture {
        model: Model { config, params },
        tok,
        noised,
        mask,
    }
}

/// Logits that depend on the whole sequence, favouring MASK and PAD.
pub struct Toy {
    pub vocab: usize,
}

impl Denoiser for Toy {
    fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        let mut h: u64 = 1469598103934665603;
        for &i in ids {
            h = (h ^ i as u64).wrapping_mul(1099511628211);
        }
        let mut rows = Vec::with_capacity(ids.len());
        for p in 0..ids.len() {
            let row: Vec<f64> = (0..self.vocab)
                .map(|v| {
                    let x = h.wrapping_add((p * 131 + v * 17) as u64).wrapping_mul(2862933555777941757) >> 40;
                    let base = (x % 1000) as f64 / 250.0;
                    if v == MASK || v == PAD {
                        base + 10.0
                    } else {
                        base
                    }
                })
                .collect();
            rows.push(row);
        }
        Tensor::from_rows(&rows)
    }
}

/// Per step, exhaustively scores every (masked position, allowed token)
/// pair by softmax probability and commits the best one.
pub fn brute_force(model: &dyn Denoiser, prompt: &[usize], gen_len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut seq: Vec<usize> = prompt.iter().copied().chain(std::iter::repeat_n(MASK, gen_len)).collect();
    let mut order = Vec::new();
    for _ in 0..gen_len {
        let logits = model.logits(&seq).unwrap();
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for pos in prompt.len()..seq.len() {
            if seq[pos] != MASK {
                continue;
            }
            let row = logits.row(pos);
            let allowed: Vec<usize> = (0..row.len()).filter(|&v| v != MASK && v != PAD).collect();
            let z: f64 = allowed.iter().map(|&v| row[v].exp()).sum();
            for &v in &allowed {
                let p = row[v].exp() / z;
                if p > best.0 {
                    best = (p, pos, v);
                }
            }
        }
        seq[best.1] = best.2;
        order.push(best.1 - prompt.len());
    }
    (seq[prompt.len()..].to_vec(), order)
}
