//! Acceptance criteria as a standalone binary: one PASS/FAIL line each,
//! nonzero exit when any fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cdlm_core::align::{alignment_loss, gamma_at, row_losses, total_loss, AlignConfig, BatchItem, Schedule};
use cdlm_core::concept::{estimate_cost, score_graphs, ProviderConfig};
use cdlm_core::config::RunConfig;
use cdlm_core::dlm::{
    decode, decode_trace, dlm_sft_loss, forward, mask_at_level, Checkpoint, DecodeOptions, ModelConfig,
};
use cdlm_core::harness::{build_masks, checkpoint_name, compare_runs, corpus_vocab, load_train, probe, sample_tokens};
use cdlm_core::mask::{load_masks, mask_for_sample, Convention, SupervisionMask, MASK};
use cdlm_core::numerics::finite_difference_check;
use cdlm_core::orderperturb::{
    generate, generate_dataset, oracle_graph, perturb, read_samples, DagTemplate, GenOptions, PerturbMode,
};
use cdlm_core::Tensor;
use common::{brute_force, dense_oracle, double_loop, fixture, flat_params, rebind, rng, token_owners, Toy, EPS};
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("generator fidelity", Duration::from_secs(1), generator_fidelity),
        ("dataset contract", Duration::from_secs(10), dataset_contract),
        ("mask oracle equivalence", Duration::from_secs(30), mask_oracle),
        ("gradient correctness", Duration::from_secs(120), gradients),
        ("loss-law properties", Duration::MAX, loss_laws),
        ("scheduler", Duration::MAX, scheduler),
        ("decoder", Duration::MAX, decoder),
        ("cost formula", Duration::MAX, cost),
        ("scoring formula", Duration::MAX, scoring),
        ("training smoke and alignment effect", Duration::from_secs(900), training),
    ];
    let mut failed = 0;
    for (k, (name, budget, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > budget => Err(format!("{d}; took {:.1}s, budget {:.0}s", took.as_secs_f64(), budget.as_secs_f64())),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(e) => {
                failed += 1;
                ("FAIL", e)
            }
        };
        println!("{tag} {:>2} {name} ({:.2}s): {detail}", k + 1, took.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn generator_fidelity() -> Outcome {
    let want: BTreeMap<&str, i64> = [
        ("Quasar", 90),
        ("Flux", 21),
        ("Radiant", 44),
        ("Nova", 55),
        ("Gravity", 41),
        ("Pulse", 36),
        ("Helix", 40),
        ("Echo", 12),
        ("Comet", 48),
        ("Aether", 26),
        ("Nebula", 47),
        ("Celestia", 100),
        ("Stardust", 70),
    ]
    .into_iter()
    .collect();
    let got = DagTemplate::standard().evaluate(80, 79);
    for (name, v) in &want {
        ensure!(got.get(*name) == Some(v), "{name}: got {:?}, want {v}", got.get(*name));
    }
    Ok("13 values of the (80, 79) example exact".into())
}

fn dataset_contract() -> Outcome {
    let dag = DagTemplate::standard();
    let opts = GenOptions::default();
    let d = generate(&opts, &dag).map_err(|e| e.to_string())?;
    let train: HashSet<_> = d.train.iter().map(|s| s.signature()).collect();
    let test: HashSet<_> = d.test.iter().map(|s| s.signature()).collect();
    ensure!(train.len() == 2000 && test.len() == 500, "{} train, {} test signatures", train.len(), test.len());
    ensure!(train.is_disjoint(&test), "train and test share signatures");
    for s in &d.train {
        let mut canon = s.steps.clone();
        canon.sort();
        for mode in PerturbMode::ALL.into_iter().filter(|&m| m != PerturbMode::NoCot) {
            let mut out = perturb(&s.steps, mode, &d.permutations, &dag).map_err(|e| e.to_string())?;
            out.sort();
            ensure!(out == canon, "{} in {mode} changes the step multiset", s.id);
        }
        let re = |x: &[_]| perturb(x, PerturbMode::Reverse, &d.permutations, &dag).unwrap();
        ensure!(re(&re(&s.steps)) == s.steps, "{}: RE twice is not the identity", s.id);
    }
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ma = generate_dataset(a.path(), &opts, &dag).map_err(|e| e.to_string())?;
    generate_dataset(b.path(), &opts, &dag).map_err(|e| e.to_string())?;
    let mut files: Vec<String> = ma.files.values().cloned().collect();
    files.push("manifest.json".into());
    for name in &files {
        let x = std::fs::read(a.path().join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(name)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{name} differs between runs");
    }
    Ok(format!("2000/500 disjoint signatures, multisets kept, {} files byte-identical", files.len()))
}

fn mask_oracle() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dag = DagTemplate::standard();
    let opts = GenOptions {
        n_train: 30,
        n_test: 5,
        ..GenOptions::default()
    };
    generate_dataset(dir.path(), &opts, &dag).map_err(|e| e.to_string())?;
    let vocab = corpus_vocab(dir.path()).map_err(|e| e.to_string())?;
    let hash = vocab.hash();
    let mut checked = 0;
    for mode in [PerturbMode::Normal, PerturbMode::Reverse, PerturbMode::OutputFirst, PerturbMode::Dfs, PerturbMode::R1] {
        let samples = read_samples(&dir.path().join(format!("train_{mode}.jsonl"))).map_err(|e| e.to_string())?;
        for s in &samples {
            let tok = sample_tokens(s, &vocab, 192).map_err(|e| e.to_string())?;
            let graph = oracle_graph(s, &dag);
            let steps: Vec<(String, String)> = s.steps.iter().map(|st| (st.variable.clone(), st.text.clone())).collect();
            let want = dense_oracle(&token_owners(&tok, &steps), &dag);
            let want_lit: BTreeMap<(u32, u32), i8> = want.iter().map(|(&(i, j), &v)| ((j, i), v)).collect();
            let entries = |c| -> Result<BTreeMap<(u32, u32), i8>, String> {
                let (m, _) = mask_for_sample(&s.id, &graph, &tok, &hash, c).map_err(|e| e.to_string())?;
                Ok(m.entries().iter().map(|&(i, j, v)| ((i, j), v)).collect())
            };
            ensure!(entries(Convention::EffectRows)? == want, "{} ({mode}) effect-rows differs", s.id);
            ensure!(entries(Convention::CauseRows)? == want_lit, "{} ({mode}) literal differs", s.id);
            checked += 1;
        }
    }
    ensure!(checked >= 100, "only {checked} samples");
    Ok(format!("{checked} samples exact under both conventions"))
}

fn fd(params: &[Tensor], f: impl Fn(&mut cdlm_core::Tape, &[cdlm_core::Var]) -> cdlm_core::Result<cdlm_core::Var>) -> Result<f64, String> {
    let r = finite_difference_check(params, 1e-5, 1e-4, f).map_err(|e| e.to_string())?;
    ensure!(r.pass, "max relative error {:.2e} at {:?}", r.max_rel_err, r.worst);
    Ok(r.max_rel_err)
}

fn gradients() -> Outcome {
    let f = fixture();
    let params = flat_params(&f.model.params);
    let cfg = &f.model.config;
    ensure!(cfg.n_layers == 2 && cfg.d_model == 16 && cfg.vocab_size <= 64, "fixture shape changed");
    let mut worst = Vec::new();

    worst.push(fd(&params, |tape, vars| {
        let p = rebind(&f.model.params, vars);
        let fo = forward(tape, &p, cfg, &f.noised.noised, false)?;
        dlm_sft_loss(tape, fo.logits, &f.noised, true)
    })?);
    let align = |alpha: f64, lambda: f64| {
        let a = AlignConfig {
            alpha,
            lambda,
            ..AlignConfig::default()
        };
        fd(&params, |tape, vars| {
            let p = rebind(&f.model.params, vars);
            let fo = forward(tape, &p, cfg, &f.noised.noised, true)?;
            Ok(alignment_loss(tape, &fo.capture, &f.mask, &a)?.expect("nonempty mask").0)
        })
    };
    // Unreachable α keeps every ratio row active; a vanishing α isolates L_neg.
    worst.push(align(1e6, 0.0)?);
    worst.push(align(1e-9, 100.0)?);
    let other = mask_at_level(&f.tok, 0.9, &mut rng(33)).map_err(|e| e.to_string())?;
    let a = AlignConfig {
        lambda: 1.0,
        ..AlignConfig::default()
    };
    worst.push(fd(&params, |tape, vars| {
        let p = rebind(&f.model.params, vars);
        let x = forward(tape, &p, cfg, &f.noised.noised, true)?;
        let y = forward(tape, &p, cfg, &other.noised, true)?;
        let items = [
            BatchItem {
                logits: x.logits,
                noised: &f.noised,
                capture: &x.capture,
                mask: Some(&f.mask),
            },
            BatchItem {
                logits: y.logits,
                noised: &other,
                capture: &y.capture,
                mask: None,
            },
        ];
        Ok(total_loss(tape, &items, 0.7, &a, "hash", false)?.loss)
    })?);
    Ok(format!(
        "dlm_sft_loss, L_ratio, L_neg, total_loss max rel err {:.1e}",
        worst.iter().copied().fold(0.0, f64::max)
    ))
}

fn loss_laws() -> Outcome {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let n = r.gen_range(2..10);
        let a = Tensor::new(vec![n, n], (0..n * n).map(|_| r.gen::<f64>()).collect()).unwrap();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..n {
                match r.gen_range(0..5) {
                    0 => entries.push((i as u32, j as u32, 1)),
                    1 => entries.push((i as u32, j as u32, -1)),
                    _ => {}
                }
            }
        }
        let mask = SupervisionMask::new(format!("r{k}"), n, "h".into(), entries).unwrap();
        let (alpha, lambda) = (r.gen_range(0.5..5.0), r.gen_range(0.0..200.0));
        let (bd, _) = row_losses(&a, &mask, alpha, lambda, EPS).map_err(|e| e.to_string())?;
        let want = double_loop(&a, &mask, alpha, lambda);
        let err = (bd.aggregate - want).abs() / want.abs().max(1.0);
        ensure!(err <= 1e-12, "instance {k}: {} vs {want}", bd.aggregate);
        worst = worst.max(err);
        for row in &bd.rows {
            ensure!((-1.0..=0.0).contains(&row.l_ratio), "L_ratio {} out of range", row.l_ratio);
            if row.ratio.is_some_and(|x| x >= alpha) {
                ensure!(row.l_ratio == 0.0, "satisfied row pays {}", row.l_ratio);
            }
        }
        let c = r.gen_range(0.1..10.0);
        let mut d = a.data().to_vec();
        for &(i, j, v) in mask.entries() {
            if v < 0 {
                d[i as usize * n + j as usize] *= c;
            }
        }
        let (sc, _) = row_losses(&Tensor::new(vec![n, n], d).unwrap(), &mask, alpha, lambda, EPS).unwrap();
        for (p, q) in bd.rows.iter().zip(&sc.rows) {
            ensure!((q.l_neg - c * c * p.l_neg).abs() <= 1e-9 * q.l_neg.max(1.0), "L_neg not quadratic");
        }
    }
    let flat = Tensor::new(vec![3, 3], vec![0.2; 9]).unwrap();
    let m = SupervisionMask::new("e".into(), 3, "h".into(), vec![(0, 1, 1)]).unwrap();
    let (bd, _) = row_losses(&flat, &m, 3.0, 100.0, EPS).unwrap();
    ensure!((bd.rows[0].l_ratio + 0.5).abs() < 1e-7, "equal means give {}", bd.rows[0].l_ratio);
    Ok(format!("1000 instances, max rel err {worst:.1e}; range, c², -0.5 laws hold"))
}

fn scheduler() -> Outcome {
    let cfg = AlignConfig {
        gamma_min: 0.2,
        gamma_max: 1.0,
        ..AlignConfig::default()
    };
    let s = cfg.schedule(2000);
    ensure!(s.t1 == 0.1 * s.t2 && s.t2 == 2000.0, "T1 {} T2 {}", s.t1, s.t2);
    let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
    ensure!(s.at(0.0) == 0.2, "γ(0) = {}", s.at(0.0));
    ensure!(s.at(s.t1) == 1.0, "γ(T1) = {}", s.at(s.t1));
    ensure!(close(s.at(s.t2), 0.2), "γ(T2) = {}", s.at(s.t2));
    ensure!(close(s.at(s.t1 / 2.0), 0.6), "rising midpoint {}", s.at(s.t1 / 2.0));
    ensure!(close(s.at((s.t1 + s.t2) / 2.0), 0.6), "falling midpoint");
    let odd = Schedule {
        gamma_min: 0.0,
        gamma_max: 0.5,
        t1: 3.0,
        t2: 7.0,
    };
    ensure!(close(gamma_at(1.5, &odd), 0.25) && close(gamma_at(5.0, &odd), 0.25), "explicit T1/T2 midpoints");
    Ok("endpoints and midpoints exact, T1 = 0.1·T2".into())
}

fn decoder() -> Outcome {
    let toy = Toy { vocab: 11 };
    for prompt in [vec![1, 5], vec![1, 7, 8, 6, 9], vec![1]] {
        let gen_len = 4;
        let opts = DecodeOptions {
            gen_len,
            block_len: gen_len,
            steps_per_block: gen_len,
        };
        let trace = decode_trace(&toy, &prompt, &opts).map_err(|e| e.to_string())?;
        let (want, order) = brute_force(&toy, &prompt, gen_len);
        ensure!(trace.response == want, "toy response {:?} vs oracle {want:?}", trace.response);
        ensure!(trace.steps.concat() == order, "commit order differs");
    }

    let f = fixture();
    let prompt = [1usize, 7, 9];
    for (gen_len, block_len, steps) in [(6, 3, 3), (6, 6, 2), (6, 2, 1)] {
        let opts = DecodeOptions {
            gen_len,
            block_len,
            steps_per_block: steps,
        };
        let a = decode_trace(&f.model, &prompt, &opts).map_err(|e| e.to_string())?;
        ensure!(a.response.iter().all(|&t| t != MASK), "MASK left in output");
        let mut committed = a.steps.concat();
        committed.sort_unstable();
        ensure!(committed == (0..gen_len).collect::<Vec<_>>(), "a position was committed twice or never");
        let b = decode(&f.model, &prompt, &opts).map_err(|e| e.to_string())?;
        ensure!(a.response == b, "decoding is not deterministic");
    }
    Ok("brute-force order matched; no MASK, single commit, deterministic".into())
}

fn cost() -> Outcome {
    let p = ProviderConfig::default();
    let yuan = estimate_cost(2846.2, 295.3, p.price_in, p.price_out, 865.2, 1.0);
    let usd = estimate_cost(2846.2, 295.3, p.price_in, p.price_out, 865.2, 0.14);
    ensure!((yuan - 3.31).abs() <= 0.01, "cost {yuan:.4}");
    ensure!((usd - 0.46).abs() <= 0.01, "converted cost {usd:.4}");
    Ok(format!("{yuan:.2} and {usd:.2}"))
}

fn scoring() -> Outcome {
    let all = score_graphs(&[vec![1.0, 1.0, 1.0], vec![1.0]]).map_err(|e| e.to_string())?;
    ensure!(all.overall == 1.0 && all.micro == 1.0, "all-correct gives {} / {}", all.overall, all.micro);
    let two = score_graphs(&[vec![1.0], vec![0.5]]).map_err(|e| e.to_string())?;
    ensure!(two.overall == 0.75 && two.micro == 0.75, "two instances give {} / {}", two.overall, two.micro);
    let json = serde_json::to_value(&two).map_err(|e| e.to_string())?;
    ensure!(json.get("overall").is_some() && json.get("micro").is_some(), "statistics missing from output");
    Ok("1.0 and 0.75, macro and micro emitted".into())
}

/// 128-sample corpus, 10 epochs, three seeds of SFT against alignment.
fn training() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.output_root = root.path().join("runs");
    cfg.run_id = "smoke".into();
    cfg.data.dir = root.path().join("data");
    cfg.data.n_train = 128;
    cfg.data.n_test = 32;
    cfg.model = ModelConfig {
        vocab_size: 0,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        max_len: 256,
        d_ff: 64,
        init_std: 0.02,
    };
    cfg.train.epochs = 10;
    cfg.train.batch = 8;
    cfg.train.lr = 3e-3;
    cfg.train.response_len = Some(192);
    // The masked-token loss is a sum over roughly 90 masked tokens while each
    // row loss is bounded near 1; γ_max offsets that scale.
    cfg.align.gamma_max = 30.0;
    cfg.eval.gen_len = 192;
    cfg.eval.block_len = 32;
    cfg.eval.steps_per_block = Some(4);
    cfg.eval.limit = Some(16);
    cfg.compare.seeds = vec![42, 43, 44];

    generate_dataset(&cfg.data.dir, &cfg.gen_options(), &DagTemplate::standard()).map_err(|e| e.to_string())?;
    build_masks(&cfg).map_err(|e| e.to_string())?;
    let table = compare_runs(&cfg).map_err(|e| e.to_string())?;
    let seeds: HashSet<u64> = table.rows.iter().map(|r| r.seed).collect();
    ensure!(seeds.len() >= 3 && table.table_path.exists(), "comparison table incomplete");

    let arm = cfg.output_root.join("smoke-compare").join("seed42_align");
    let first = Checkpoint::load(&arm.join(checkpoint_name(0))).map_err(|e| e.to_string())?;
    let last = Checkpoint::load(&arm.join(checkpoint_name(10))).map_err(|e| e.to_string())?;
    let masks = load_masks(&cfg.mask_path(), &first.tokenizer_hash).map_err(|e| e.to_string())?;
    let samples = load_train(&cfg).map_err(|e| e.to_string())?;
    let p0 = probe(&first, &samples, Some(&masks), &cfg.align, 7).map_err(|e| e.to_string())?;
    let p1 = probe(&last, &samples, Some(&masks), &cfg.align, 7).map_err(|e| e.to_string())?;
    let (r0, r1) = (p0.median_ratio.unwrap_or(f64::NAN), p1.median_ratio.unwrap_or(f64::NAN));
    let acc: Vec<String> = table
        .summary
        .iter()
        .map(|s| format!("{} {:.3}±{:.3}", s.config, s.final_accuracy_mean, s.final_accuracy_std))
        .collect();
    let detail = format!(
        "L_DLM {:.3} -> {:.3} (x{:.2}); median ratio {r0:.3} -> {r1:.3}; accuracy {}",
        p0.loss_dlm,
        p1.loss_dlm,
        p1.loss_dlm / p0.loss_dlm,
        acc.join(", ")
    );
    ensure!(p1.loss_dlm <= 0.7 * p0.loss_dlm, "loss did not fall enough: {detail}");
    ensure!(r1 > r0, "ratio did not rise: {detail}");
    Ok(detail)
}
