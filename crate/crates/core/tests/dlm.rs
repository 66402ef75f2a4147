mod common;

use cdlm_core::dlm::{
    apply_forward_masking, decode, decode_trace, dlm_sft_loss, forward, mask_at_level, Checkpoint, DecodeOptions,
    Model, ModelParams,
};
use cdlm_core::mask::{tokenize_pair, Tokenization, Vocab, MASK, PAD};
use cdlm_core::numerics::{finite_difference_check, AdamW, AdamWConfig};
use cdlm_core::{Tape, Tensor};
use common::{brute_force, flat_params, rebind, rng, tiny_config, Toy};
use proptest::prelude::*;

fn tiny_model(vocab: usize, max_len: usize, seed: u64) -> Model {
    let config = tiny_config(vocab, max_len);
    let params = ModelParams::init(&config, &mut rng(seed)).unwrap();
    Model { config, params }
}

fn toy_tokens(len: usize, prompt: usize, vocab: usize) -> Tokenization {
    let ids: Vec<usize> = (0..len).map(|i| 5 + (i * 7) % (vocab - 5)).collect();
    Tokenization {
        tokens: ids.iter().map(|i| format!("t{i}")).collect(),
        ids,
        prompt_len: prompt,
    }
}

#[test]
fn attention_is_bidirectional() {
    let m = tiny_model(20, 10, 1);
    let ids = vec![5, 6, 7, 8, 9, 10, 11, 12];
    let base = m.logits(&ids).unwrap();
    for later in 1..ids.len() {
        let mut changed = ids.clone();
        changed[later] = 17;
        let out = m.logits(&changed).unwrap();
        for earlier in 0..later {
            let d: f64 = base
                .row(earlier)
                .iter()
                .zip(out.row(earlier))
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(d > 1e-9, "position {earlier} blind to {later}");
        }
    }
}

proptest! {
    #[test]
    fn without_positions_the_model_is_permutation_equivariant(
        ids in prop::collection::vec(0usize..20, 2..8),
        perm_seed in any::<u64>(),
    ) {
        let mut m = tiny_model(20, 8, 2);
        m.params.pos_emb = Tensor::zeros(m.params.pos_emb.shape());
        let mut order: Vec<usize> = (0..ids.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng(perm_seed));
        let permuted: Vec<usize> = order.iter().map(|&k| ids[k]).collect();
        let a = m.logits(&ids).unwrap();
        let b = m.logits(&permuted).unwrap();
        for (row, &k) in order.iter().enumerate() {
            for (x, y) in b.row(row).iter().zip(a.row(k)) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn zero_layers_is_normalised_embedding_times_head() {
    let mut config = tiny_config(12, 6);
    config.n_layers = 0;
    let params = ModelParams::init(&config, &mut rng(3)).unwrap();
    let m = Model {
        config: config.clone(),
        params: params.clone(),
    };
    let ids = [4usize, 0, 11, 7];
    let got = m.logits(&ids).unwrap();
    let d = config.d_model;
    for (i, &id) in ids.iter().enumerate() {
        let x: Vec<f64> = (0..d).map(|c| params.tok_emb.at(id, c) + params.pos_emb.at(i, c)).collect();
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / d as f64 + 1e-6).sqrt();
        for v in 0..12 {
            let want: f64 = (0..d).map(|c| x[c] / rms * params.final_gain.data()[c] * params.head.at(c, v)).sum();
            assert!((got.at(i, v) - want).abs() < 1e-10);
        }
    }
}

#[test]
fn out_of_range_inputs_are_rejected() {
    let m = tiny_model(10, 4, 4);
    assert_eq!(m.logits(&[1, 2, 3, 4, 5]).unwrap_err().kind(), "contract");
    assert_eq!(m.logits(&[]).unwrap_err().kind(), "contract");
    assert_eq!(m.logits(&[10]).unwrap_err().kind(), "index");
}

#[test]
fn masked_token_loss_gradient_matches_finite_differences() {
    let m = tiny_model(24, 8, 5);
    let tok = toy_tokens(8, 3, 24);
    let noised = mask_at_level(&tok, 0.6, &mut rng(6)).unwrap();
    for reweight in [false, true] {
        let report = finite_difference_check(&flat_params(&m.params), 1e-5, 1e-4, |tape, vars| {
            let p = rebind(&m.params, vars);
            let fo = forward(tape, &p, &m.config, &noised.noised, false)?;
            dlm_sft_loss(tape, fo.logits, &noised, reweight)
        })
        .unwrap();
        assert!(report.pass, "reweight={reweight}: {report:?}");
        assert!(report.checked > 4000);
    }
}

#[test]
fn uniform_logits_cost_k_log_v() {
    let mut m = tiny_model(30, 10, 7);
    m.params.head = Tensor::zeros(m.params.head.shape());
    let tok = toy_tokens(10, 2, 30);
    let noised = mask_at_level(&tok, 0.5, &mut rng(8)).unwrap();
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let fo = forward(&mut tape, &p, &m.config, &noised.noised, false).unwrap();
    let l = dlm_sft_loss(&mut tape, fo.logits, &noised, false).unwrap();
    let k = noised.masked_positions.len() as f64;
    assert!((tape.value(l).item().unwrap() - k * 30f64.ln()).abs() < 1e-10);
    let l = dlm_sft_loss(&mut tape, fo.logits, &noised, true).unwrap();
    assert!((tape.value(l).item().unwrap() - k * 30f64.ln() / noised.t).abs() < 1e-9);

    let none = cdlm_core::dlm::NoisedSequence {
        masked_positions: vec![],
        ..noised
    };
    let l = dlm_sft_loss(&mut tape, fo.logits, &none, false).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 0.0);
}

#[test]
fn forward_masking_statistics() {
    let tok = toy_tokens(220, 20, 40);
    let mut r = rng(9);
    let (mut t_sum, mut frac_sum) = (0.0, 0.0);
    let n = 4000;
    for _ in 0..n {
        let s = apply_forward_masking(&tok, &mut r).unwrap();
        assert!(s.t > 0.0 && s.t <= 1.0);
        assert!(!s.masked_positions.is_empty());
        assert!(s.masked_positions.windows(2).all(|w| w[0] < w[1]));
        for (i, (&a, &b)) in s.original.iter().zip(&s.noised).enumerate() {
            let masked = s.masked_positions.binary_search(&i).is_ok();
            assert_eq!(b == MASK, masked);
            assert!(masked || a == b);
            assert!(!(masked && i < 20));
        }
        t_sum += s.t;
        frac_sum += s.masked_positions.len() as f64 / 200.0;
    }
    // U(0, 1]: mean 1/2, standard error ≈ 0.0046.
    assert!((t_sum / n as f64 - 0.5).abs() < 0.02);
    assert!((frac_sum / n as f64 - 0.5).abs() < 0.02);

    let mut hits = 0usize;
    for _ in 0..500 {
        hits += mask_at_level(&tok, 0.3, &mut r).unwrap().masked_positions.len();
    }
    let rate = hits as f64 / (500.0 * 200.0);
    assert!((rate - 0.3).abs() < 0.01, "{rate}");
    assert_eq!(mask_at_level(&tok, 0.0, &mut r).unwrap_err().kind(), "contract");
}

#[test]
fn single_block_decoding_matches_exhaustive_oracle() {
    let toy = Toy { vocab: 9 };
    for prompt in [vec![1, 5], vec![1, 7, 8, 6], vec![1]] {
        let opts = DecodeOptions {
            gen_len: 3,
            block_len: 3,
            steps_per_block: 3,
        };
        let trace = decode_trace(&toy, &prompt, &opts).unwrap();
        let (want, order) = brute_force(&toy, &prompt, 3);
        assert_eq!(trace.response, want);
        assert_eq!(trace.steps, order.iter().map(|&p| vec![p]).collect::<Vec<_>>());
    }
}

#[test]
fn decoder_contract() {
    let m = tiny_model(16, 40, 10);
    let prompt = [1usize, 9, 10, 11];
    for (gen_len, block_len, steps) in [(32, 8, 8), (32, 8, 3), (32, 32, 5), (16, 16, 1)] {
        let opts = DecodeOptions {
            gen_len,
            block_len,
            steps_per_block: steps,
        };
        let a = decode_trace(&m, &prompt, &opts).unwrap();
        assert_eq!(a.response.len(), gen_len);
        assert!(a.response.iter().all(|&t| t != MASK && t != PAD));
        let b = decode(&m, &prompt, &opts).unwrap();
        assert_eq!(a.response, b);
        // Each position is committed exactly once, block by block.
        let mut all: Vec<usize> = a.steps.concat();
        let flat = all.clone();
        all.sort_unstable();
        assert_eq!(all, (0..gen_len).collect::<Vec<_>>());
        let blocks: Vec<usize> = flat.iter().map(|p| p / block_len).collect();
        assert!(blocks.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(a.steps.len(), (gen_len / block_len) * steps);
        if steps == block_len {
            assert!(a.steps.iter().all(|s| s.len() == 1));
        }
    }
    let bad = DecodeOptions {
        gen_len: 10,
        block_len: 4,
        steps_per_block: 4,
    };
    assert_eq!(decode(&m, &prompt, &bad).unwrap_err().kind(), "contract");
}

#[test]
fn checkpoint_round_trip_and_hash_checks() {
    let vocab = Vocab::build(["a b c d"]);
    let mut config = tiny_config(vocab.len(), 8);
    config.n_layers = 1;
    let params = ModelParams::init(&config, &mut rng(11)).unwrap();
    let ck = Checkpoint {
        config,
        params,
        optimizer: AdamW::new(AdamWConfig::default()),
        step: 3,
        epoch: 1,
        tokenizer_hash: vocab.hash(),
        vocab: vocab.clone(),
        response_len: Some(4),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let tok = tokenize_pair("a b", "c", &vocab, Some(4)).unwrap();
    assert_eq!(ck.model().logits(&tok.ids).unwrap(), back.model().logits(&tok.ids).unwrap());
    assert!(back.expect_tokenizer(&vocab.hash()).is_ok());
    assert_eq!(
        back.expect_tokenizer(&Vocab::build(["x"]).hash()).unwrap_err().kind(),
        "stale"
    );

    let mut forged = ck.clone();
    forged.tokenizer_hash = "0".repeat(64);
    forged.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().kind(), "stale");

    let mut wrong = ck;
    wrong.config.d_ff += 1;
    wrong.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap_err().kind(), "dimension");
}
