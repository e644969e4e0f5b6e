//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use a2_cli::config::TrainConfig;
use a2_cli::experiment::{load_run, run_preset, sweep_table, sweep_tau, PresetResult, ResultsTable, Workspace};
use a2_cli::lm::ensure_lm;
use a2_cli::presets::PresetRegistry;
use a2_cli::train::{batch_loss, initial_model, TrainData, AVERAGED_CKPT, LEDGER_FILE};
use a2_core::adapters::{adapter_param_count, Adapter, DualAdapterBank, ResidualMode};
use a2_core::data::{generate_corpus, Batch, CorpusSpec, LanguageSpec, SamplerParams, SamplerRegistry, Vocabulary};
use a2_core::decode::{beam_search, DecodeConfig};
use a2_core::layers::{causal_mask, key_padding_mask, FeedForward, MultiHeadAttention};
use a2_core::losses::{
    adjust_logits, adjust_logits_var, attention_loss_sum, ctc_loss, ctc_loss_value, mtl_loss, ClassPriors, KlDirection,
    LossConfig,
};
use a2_core::model::{decoder_text_perplexity, ModelConfig, Placement, SpeechTransformer};
use a2_core::tensorcore::{grad_check_multi, log_sum_exp, Binder, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in ±[0.1, 1], away from the ReLU kink.
fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn perturb(store: &mut ParamStore, seed: u64, width: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += r.random_range(-width..width);
        }
    }
}

// ---------------------------------------------------------------- gradients

type OpFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> a2_core::Result<Var<'t>>>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: fn(u64) -> OpFn,
}

/// Reduces a non-scalar output with fixed random weights so every output
/// element contributes to the checked gradient.
fn reduce<'t>(v: Var<'t>, seed: u64) -> a2_core::Result<Var<'t>> {
    if v.shape().iter().product::<usize>() == 1 {
        return Ok(v.sum());
    }
    let w = random_tensor(&mut rng(seed ^ 0x5eed), &v.shape());
    Ok(v.dot_const(&w)?)
}

fn module_store(seed: u64) -> (ParamStore, ChaCha8Rng) {
    (ParamStore::new(), rng(seed + 1_000_003))
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", shapes: vec![vec![3, 4], vec![4, 2]], build: |_| Box::new(|_, x| Ok(x[0].matmul(x[1])?)) },
        OpCase { name: "add", shapes: vec![vec![3, 4], vec![3, 4]], build: |_| Box::new(|_, x| Ok(x[0].add(x[1])?)) },
        OpCase { name: "sub", shapes: vec![vec![3, 4], vec![3, 4]], build: |_| Box::new(|_, x| Ok(x[0].sub(x[1])?)) },
        OpCase { name: "mul", shapes: vec![vec![3, 4], vec![3, 4]], build: |_| Box::new(|_, x| Ok(x[0].mul(x[1])?)) },
        OpCase { name: "add_row", shapes: vec![vec![3, 4], vec![4]], build: |_| Box::new(|_, x| Ok(x[0].add_row(x[1])?)) },
        OpCase { name: "scale", shapes: vec![vec![3, 4]], build: |_| Box::new(|_, x| Ok(x[0].scale(-1.7))) },
        OpCase { name: "relu", shapes: vec![vec![3, 4]], build: |_| Box::new(|_, x| Ok(x[0].relu())) },
        OpCase { name: "exp", shapes: vec![vec![3, 4]], build: |_| Box::new(|_, x| Ok(x[0].exp())) },
        OpCase { name: "softmax", shapes: vec![vec![3, 5]], build: |_| Box::new(|_, x| Ok(x[0].softmax()?)) },
        OpCase { name: "log_softmax", shapes: vec![vec![3, 5]], build: |_| Box::new(|_, x| Ok(x[0].log_softmax()?)) },
        OpCase {
            name: "layer_norm",
            shapes: vec![vec![3, 4], vec![4], vec![4]],
            build: |_| Box::new(|_, x| Ok(x[0].layer_norm(x[1], x[2], 1e-5)?)),
        },
        OpCase { name: "transpose", shapes: vec![vec![3, 4]], build: |_| Box::new(|_, x| Ok(x[0].transpose())) },
        OpCase { name: "slice_cols", shapes: vec![vec![3, 5]], build: |_| Box::new(|_, x| Ok(x[0].slice_cols(1, 3))) },
        OpCase { name: "slice_rows", shapes: vec![vec![4, 3]], build: |_| Box::new(|_, x| Ok(x[0].slice_rows(1, 2))) },
        OpCase {
            name: "concat_cols",
            shapes: vec![vec![3, 2], vec![3, 3]],
            build: |_| Box::new(|_, x| Ok(Var::concat_cols(&[x[0], x[1]])?)),
        },
        OpCase {
            name: "concat_rows",
            shapes: vec![vec![2, 3], vec![1, 3]],
            build: |_| Box::new(|_, x| Ok(Var::concat_rows(&[x[0], x[1]])?)),
        },
        OpCase { name: "reshape", shapes: vec![vec![3, 4]], build: |_| Box::new(|_, x| Ok(x[0].reshape(&[2, 6])?)) },
        OpCase {
            name: "gather_rows",
            shapes: vec![vec![4, 3]],
            build: |_| Box::new(|_, x| Ok(x[0].gather_rows(&[2, 0, 2, 3])?)),
        },
        OpCase { name: "sum", shapes: vec![vec![3, 4]], build: |_| Box::new(|_, x| Ok(x[0].mul(x[0])?.sum())) },
        OpCase {
            name: "dot_const",
            shapes: vec![vec![3, 4]],
            build: |s| {
                let c = random_tensor(&mut rng(s + 17), &[3, 4]);
                Box::new(move |_, x| Ok(x[0].exp().dot_const(&c)?))
            },
        },
        OpCase { name: "pick", shapes: vec![vec![3, 4]], build: |_| Box::new(|_, x| Ok(x[0].exp().pick(5))) },
        OpCase {
            name: "ctc_loss",
            shapes: vec![vec![6, 4]],
            build: |_| Box::new(|_, x| Ok(ctc_loss(x[0].log_softmax()?, &[0, 1, 1], 3)?.expect("feasible"))),
        },
        OpCase {
            name: "attention_loss_standard",
            shapes: vec![vec![4, 5]],
            build: |_| Box::new(|_, x| attention_loss_sum(x[0], &[1, 3, 0, 4], 0.1, KlDirection::Standard)),
        },
        OpCase {
            name: "attention_loss_literal",
            shapes: vec![vec![4, 5]],
            build: |_| Box::new(|_, x| attention_loss_sum(x[0], &[1, 3, 0, 4], 0.1, KlDirection::Literal)),
        },
        OpCase {
            name: "adjust_logits",
            shapes: vec![vec![3, 5]],
            build: |s| {
                let lp = random_log_priors(&mut rng(s + 29), 5);
                Box::new(move |_, x| Ok(adjust_logits_var(x[0], &lp, 0.7)?.log_softmax()?))
            },
        },
        OpCase {
            name: "mtl_loss",
            shapes: vec![vec![6, 4], vec![4, 5]],
            build: |_| {
                Box::new(|_, x| {
                    let ctc = ctc_loss(x[0].log_softmax()?, &[2, 0], 3)?.expect("feasible");
                    let att = attention_loss_sum(x[1], &[1, 3, 0, 4], 0.1, KlDirection::Standard)?;
                    mtl_loss(ctc, att, 0.3)
                })
            },
        },
        OpCase {
            name: "self_attention_causal",
            shapes: vec![vec![4, 8]],
            build: |s| {
                let (mut store, mut r) = module_store(s);
                let mha = MultiHeadAttention::new(&mut store, "mha", 8, 8, 2, &mut r).unwrap();
                Box::new(move |tape, x| {
                    let bd = Binder::new(tape, &store);
                    mha.forward(&bd, x[0], x[0], Some(&causal_mask(4)))
                })
            },
        },
        OpCase {
            name: "cross_attention_padded",
            shapes: vec![vec![3, 8], vec![5, 6]],
            build: |s| {
                let (mut store, mut r) = module_store(s);
                let mha = MultiHeadAttention::new(&mut store, "mha", 8, 6, 2, &mut r).unwrap();
                Box::new(move |tape, x| {
                    let bd = Binder::new(tape, &store);
                    mha.forward(&bd, x[0], x[1], Some(&key_padding_mask(3, 5, 4)))
                })
            },
        },
        OpCase {
            name: "feed_forward",
            shapes: vec![vec![3, 8]],
            build: |s| {
                let (mut store, mut r) = module_store(s);
                let ffn = FeedForward::new(&mut store, "ffn", 8, 12, &mut r);
                Box::new(move |tape, x| {
                    let bd = Binder::new(tape, &store);
                    ffn.forward(&bd, x[0], None)
                })
            },
        },
        OpCase {
            name: "adapter",
            shapes: vec![vec![3, 8]],
            build: |s| {
                let (mut store, mut r) = module_store(s);
                let a = Adapter::new(&mut store, "ad", 8, 3, &mut r).unwrap();
                perturb(&mut store, s + 5, 0.5);
                Box::new(move |tape, x| {
                    let bd = Binder::new(tape, &store);
                    a.forward(&bd, x[0])
                })
            },
        },
        OpCase {
            name: "dual_adapters",
            shapes: vec![vec![3, 8]],
            build: |s| {
                let (mut store, mut r) = module_store(s);
                let routes: BTreeMap<String, String> =
                    [("en", "en"), ("ky", "ky")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
                let bank =
                    DualAdapterBank::new(&mut store, "bank", 8, 3, &routes, true, ResidualMode::Single, &mut r).unwrap();
                perturb(&mut store, s + 7, 0.5);
                Box::new(move |tape, x| {
                    let bd = Binder::new(tape, &store);
                    bank.forward(&bd, x[0], "ky")
                })
            },
        },
    ]
}

fn random_log_priors(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.05..1.0)).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| (v / z).ln()).collect()
}

fn ops_gradients() -> std::result::Result<(f64, usize), String> {
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for case in op_cases() {
        for seed in 0..10u64 {
            let mut r = rng(seed * 7919 + case.name.len() as u64);
            let xs: Vec<Tensor> = case.shapes.iter().map(|s| random_tensor(&mut r, s)).collect();
            let op = (case.build)(seed);
            let err = grad_check_multi::<_, a2_core::Error>(|tape, vars| reduce(op(tape, vars)?, seed), &xs, 1e-6)
                .map_err(|e| format!("{}: {e}", case.name))?;
            ensure(err < 1e-5, || format!("{} seed {seed}: relative error {err:.3e}", case.name))?;
            worst = worst.max(err);
            checks += 1;
        }
    }
    Ok((worst, checks))
}

fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig {
        feat_dim: 3,
        stack: 2,
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        encoder_layers: 2,
        decoder_layers: 1,
        ..ModelConfig::default()
    };
    cfg.adapters.enabled = true;
    cfg.adapters.placement = Placement::Both;
    cfg.adapters.bottleneck = 3;
    cfg
}

fn tiny_spec(seed: u64) -> CorpusSpec {
    let lang = |id: &str| LanguageSpec {
        id: id.into(),
        train: 3,
        valid: 1,
        test: 1,
    };
    CorpusSpec {
        languages: vec![lang("en"), lang("ky")],
        inventory_size: 10,
        subset_size: 6,
        feat_dim: 3,
        frames_per_token: [3, 4],
        tokens_per_utterance: [2, 4],
        seed,
        ..CorpusSpec::default()
    }
}

/// Full training loss (encoder, adapters, CTC, adjusted attention loss)
/// against central differences on sampled coordinates of every parameter.
fn end_to_end_gradient(seed: u64) -> std::result::Result<(f64, usize), String> {
    let corpus = generate_corpus(&tiny_spec(seed)).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::build(corpus.train.iter().map(|u| u.text.as_str()), 1).map_err(|e| e.to_string())?;
    let langs = vec!["en".to_string(), "ky".to_string()];
    let mut model = SpeechTransformer::new(&tiny_model_config(), vocab.model_size(), &langs, seed).unwrap();
    perturb(&mut model.store, seed + 11, 0.3);
    let utts: Vec<_> = corpus.train.iter().step_by(2).collect();
    let batch = Batch::assemble(&utts, &vocab).map_err(|e| e.to_string())?;
    let lp = random_log_priors(&mut rng(seed + 3), vocab.model_size());
    let loss_cfg = LossConfig {
        tau: 0.3,
        ..LossConfig::default()
    };
    let analytic = {
        let tape = Tape::new();
        let bd = Binder::new(&tape, &model.store);
        let (loss, parts) = batch_loss(&model, &bd, &batch, &loss_cfg, Some(&lp), None).map_err(|e| e.to_string())?;
        ensure(parts.ctc_skipped == 0, || "an utterance skipped its CTC term".into())?;
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        bd.collect(&grads)
    };
    let eval = |m: &SpeechTransformer| {
        let tape = Tape::no_grad();
        let bd = Binder::new(&tape, &m.store);
        batch_loss(m, &bd, &batch, &loss_cfg, Some(&lp), None).unwrap().0.item()
    };
    // Relative error is undefined where the exact gradient vanishes (key
    // biases are invisible to the attention softmax); there the central
    // difference must stay within its roundoff, 1e-7 at this loss scale.
    let eps = 1e-6;
    let mut r = rng(seed + 19);
    let mut worst: f64 = 0.0;
    let mut zeros = 0;
    let ids: Vec<_> = model.store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let n = model.store.get(id).len();
        for _ in 0..n.min(3) {
            let i = r.random_range(0..n);
            let orig = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(&model);
            model.store.get_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(&model);
            model.store.get_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[i]);
            if a.abs() < 1e-9 {
                zeros += 1;
                ensure(numeric.abs() < 1e-7, || {
                    format!("{} [{i}]: analytic {a:e}, numeric {numeric:e}", model.store.name(id))
                })?;
                continue;
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok((worst, zeros))
}

fn gradient_suite() -> Check {
    let (ops, checks) = ops_gradients()?;
    let mut e2e: f64 = 0.0;
    let mut zeros = 0;
    for seed in 0..10 {
        let (err, z) = end_to_end_gradient(seed)?;
        ensure(err < 1e-4, || format!("end-to-end seed {seed}: relative error {err:.3e}"))?;
        e2e = e2e.max(err);
        zeros += z;
    }
    Ok(format!(
        "{checks} op checks max rel err {ops:.2e} (< 1e-5); end-to-end 10 seeds max {e2e:.2e} (< 1e-4), {zeros} zero-gradient coordinates within roundoff"
    ))
}

// ---------------------------------------------------------------- CTC oracle

/// `−log` of the total probability of every frame labeling that collapses to `target`.
fn brute_force_ctc(lp: &Tensor, target: &[usize], blank: usize) -> f64 {
    let (t, k) = (lp.rows(), lp.cols());
    let mut terms = Vec::new();
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != blank {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            terms.push(path.iter().enumerate().map(|(f, &s)| lp.get2(f, s)).sum::<f64>());
        }
        let mut pos = 0;
        loop {
            if pos == t {
                return if terms.is_empty() { f64::INFINITY } else { -log_sum_exp(&terms) };
            }
            path[pos] += 1;
            if path[pos] < k {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

fn ctc_oracle() -> Check {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    let mut infeasible = 0;
    for case in 0..200 {
        let t = r.random_range(1..=6);
        let k = r.random_range(2..=4);
        let blank = r.random_range(0..k);
        let labels: Vec<usize> = (0..k).filter(|&c| c != blank).collect();
        let u = r.random_range(1..=3);
        let target: Vec<usize> = (0..u).map(|_| labels[r.random_range(0..labels.len())]).collect();
        let logits = Tensor::new(vec![t, k], (0..t * k).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let lp = logits.log_softmax_rows().unwrap();
        let got = ctc_loss_value(&lp, &target, blank).map_err(|e| e.to_string())?;
        let want = brute_force_ctc(&lp, &target, blank);
        if want.is_infinite() {
            infeasible += 1;
            ensure(got.is_infinite(), || format!("case {case}: expected infeasible, got {got}"))?;
            continue;
        }
        let err = (got - want).abs();
        ensure(err < 1e-6, || format!("case {case}: forward {got} vs enumeration {want}"))?;
        worst = worst.max(err);
    }
    Ok(format!("200 instances ({infeasible} infeasible agree), max abs diff {worst:.2e} (< 1e-6)"))
}

// ---------------------------------------------------------------- priors

fn prior_identity() -> Check {
    let cases: [(Vec<u64>, Vec<f64>); 3] = [
        (vec![2, 2, 0], vec![0.375, 0.375, 0.25]),
        (vec![4, 0, 0], vec![0.75, 0.125, 0.125]),
        (vec![3, 3, 3], vec![1.0 / 3.0; 3]),
    ];
    for (counts, want) in &cases {
        let p = ClassPriors::from_counts(counts.clone()).map_err(|e| e.to_string())?;
        ensure(&p.pi == want, || format!("{counts:?}: {:?} vs {want:?}", p.pi))?;
    }
    let mut r = rng(66);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let n = r.random_range(2..40usize);
        let zeros = match i % 4 {
            0 => 0,
            1 => 1,
            2 => n - 1,
            _ => r.random_range(0..n),
        };
        let lo = if zeros == n - 1 { 2 } else { 1 };
        let mut counts: Vec<u64> = (0..n).map(|k| if k < zeros { 0 } else { r.random_range(lo..200) }).collect();
        counts.rotate_left(r.random_range(0..n));
        let p = ClassPriors::from_counts(counts.clone()).map_err(|e| format!("{counts:?}: {e}"))?;
        let sum: f64 = p.pi.iter().sum();
        ensure(p.pi.iter().all(|&v| v > 0.0), || format!("{counts:?}: non-positive prior"))?;
        ensure((sum - 1.0).abs() < 1e-12, || format!("{counts:?}: sum {sum}"))?;
        worst = worst.max((sum - 1.0).abs());
    }
    Ok(format!("3 hand cases exact; 1000 random vectors max |sum-1| {worst:.1e} (< 1e-12)"))
}

// ---------------------------------------------------------------- adjustment

fn beam_model(seed: u64, vocab: usize) -> SpeechTransformer {
    let cfg = ModelConfig {
        feat_dim: 3,
        stack: 1,
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        encoder_layers: 1,
        decoder_layers: 1,
        ..ModelConfig::default()
    };
    let mut m = SpeechTransformer::new(&cfg, vocab, &["en".to_string()], seed).unwrap();
    perturb(&mut m.store, seed + 77, 0.5);
    m
}

fn encoder_out(m: &SpeechTransformer, seed: u64, t: usize) -> Tensor {
    let mut r = rng(seed);
    let f = Tensor::new(vec![t, 3], (0..t * 3).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    m.encode_tensor(&f, "en").unwrap()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn adjustment_identities() -> Check {
    // τ = 0 decode equals the unadjusted decode bit for bit.
    for seed in 0..10 {
        let m = beam_model(seed, 6);
        let h = encoder_out(&m, seed + 500, 6);
        let skewed = random_log_priors(&mut rng(seed), 6);
        let cfg = DecodeConfig::default();
        let plain = beam_search(&m, &h, "en", &cfg, None, 2, 3).map_err(|e| e.to_string())?;
        let zero = beam_search(&m, &h, "en", &cfg, Some(&skewed), 2, 3).map_err(|e| e.to_string())?;
        ensure(plain == zero, || format!("seed {seed}: τ=0 decode differs"))?;
    }
    // Uniform priors shift every score by a constant.
    let mut r = rng(31);
    for _ in 0..1000 {
        let n = r.random_range(2..30);
        let f: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let uniform = vec![-(n as f64).ln(); n];
        let tau = r.random_range(0.0..3.0);
        let adj = adjust_logits(&f, &uniform, tau).map_err(|e| e.to_string())?;
        ensure(argmax(&adj) == argmax(&f), || format!("argmax moved for τ={tau}"))?;
    }
    // softmax(f − τ log π) against exp(f)·π^−τ normalized.
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(2..30);
        let f: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let lp = random_log_priors(&mut r, n);
        let tau = r.random_range(0.0..2.0);
        let adj = adjust_logits(&f, &lp, tau).map_err(|e| e.to_string())?;
        let sm = Tensor::row(&adj).log_softmax_rows().unwrap().map(f64::exp);
        let w: Vec<f64> = f.iter().zip(&lp).map(|(x, l)| x.exp() * l.exp().powf(-tau)).collect();
        let z: f64 = w.iter().sum();
        for (a, b) in sm.data().iter().zip(&w) {
            worst = worst.max((a - b / z).abs());
        }
    }
    ensure(worst < 1e-10, || format!("closed form differs by {worst:.2e}"))?;
    Ok(format!("τ=0 decodes identical on 10 seeds; uniform argmax stable on 1000 rows; closed form max diff {worst:.1e} (< 1e-10)"))
}

// ---------------------------------------------------------------- adapters

fn adapter_identity() -> Check {
    let langs: Vec<String> = ["en", "fr", "tr", "ky"].iter().map(|s| s.to_string()).collect();
    let base = ModelConfig {
        feat_dim: 3,
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        encoder_layers: 2,
        decoder_layers: 2,
        ..ModelConfig::default()
    };
    let mut lines = Vec::new();
    for placement in [Placement::Encoder, Placement::Decoder, Placement::Both] {
        for seed in 0..3 {
            let plain = SpeechTransformer::new(&base, 7, &langs, seed).unwrap();
            let mut cfg = base.clone();
            cfg.adapters.enabled = true;
            cfg.adapters.placement = placement;
            cfg.adapters.bottleneck = 3;
            let adapted = SpeechTransformer::new(&cfg, 7, &langs, seed).unwrap();
            let x = random_tensor(&mut rng(seed + 40), &[9, 3]);
            for lang in &langs {
                let he = plain.encode_tensor(&x, lang).map_err(|e| e.to_string())?;
                let ha = adapted.encode_tensor(&x, lang).map_err(|e| e.to_string())?;
                ensure(he == ha, || format!("{placement:?}/{lang}: encoder states differ"))?;
                let cp = plain.ctc_log_probs_tensor(&he).unwrap();
                let ca = adapted.ctc_log_probs_tensor(&ha).unwrap();
                ensure(cp == ca, || format!("{placement:?}/{lang}: CTC logits differ"))?;
                let dp = plain.decoder_logits_tensor(Some(&he), &[5, 0, 3, 1], lang).unwrap();
                let da = adapted.decoder_logits_tensor(Some(&ha), &[5, 0, 3, 1], lang).unwrap();
                ensure(dp == da, || format!("{placement:?}/{lang}: decoder logits differ"))?;
            }
            let layers = match placement {
                Placement::Encoder => base.encoder_layers,
                Placement::Decoder => base.decoder_layers,
                Placement::Both => base.encoder_layers + base.decoder_layers,
            };
            let (l, d, b) = (langs.len(), 8, 3);
            let closed = (l + 1) * layers * (d * b + b * d + b + d + 2 * d);
            let delta = adapted.count_parameters() - plain.count_parameters();
            ensure(delta == closed && delta == adapter_param_count(l + 1, layers, d, b), || {
                format!("{placement:?}: parameter delta {delta} vs closed form {closed}")
            })?;
            if seed == 0 {
                lines.push(format!("{placement:?} +{delta}"));
            }
        }
    }
    Ok(format!("logits bit-identical for 3 placements × 3 seeds × 4 languages; deltas {}", lines.join(", ")))
}

// ---------------------------------------------------------------- beam oracle

const SOS: usize = 2;
const EOS: usize = 3;

fn oracle_score(m: &SpeechTransformer, h: &Tensor, seq: &[usize], cfg: &DecodeConfig) -> f64 {
    let mut input = vec![SOS];
    input.extend_from_slice(seq);
    let lp = m.decoder_logits_tensor(Some(h), &input, "en").unwrap().log_softmax_rows().unwrap();
    let attn: f64 = seq.iter().chain([EOS].iter()).enumerate().map(|(i, &y)| lp.get2(i, y)).sum();
    let ctc = -ctc_loss_value(&m.ctc_log_probs_tensor(h).unwrap(), seq, m.blank()).unwrap();
    if cfg.ctc_weight == 0.0 {
        attn
    } else if cfg.ctc_weight == 1.0 {
        ctc
    } else {
        (1.0 - cfg.ctc_weight) * attn + cfg.ctc_weight * ctc
    }
}

fn sequences(max_len: usize, alphabet: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s| {
                alphabet.iter().map(move |&c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn beam_oracle() -> Check {
    // Decoder classes: a=0, <unk>=1, <sos>=2, <eos>=3.
    let vocab = 4;
    let mut compared = 0;
    for seed in 0..20 {
        let m = beam_model(seed, vocab);
        let h = encoder_out(&m, seed + 1000, 4);
        for beta in [0.0, 0.5, 1.0] {
            let cfg = DecodeConfig {
                beam: vocab,
                ctc_weight: beta,
                tau: 0.0,
                max_len: 3,
            };
            let mut brute: Vec<(f64, Vec<usize>)> =
                sequences(3, &[0, 1]).into_iter().map(|s| (oracle_score(&m, &h, &s, &cfg), s)).collect();
            brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.len().cmp(&b.1.len())).then(a.1.cmp(&b.1)));
            let got = beam_search(&m, &h, "en", &cfg, None, SOS, EOS).map_err(|e| e.to_string())?;
            ensure(got.hypotheses.len() == vocab, || format!("seed {seed}: {} hypotheses", got.hypotheses.len()))?;
            for (rank, (hyp, (score, seq))) in got.hypotheses.iter().zip(&brute).enumerate() {
                ensure(&hyp.tokens == seq && (hyp.score - score).abs() < 1e-9, || {
                    format!("seed {seed} β={beta} rank {rank}: {:?} {} vs {seq:?} {score}", hyp.tokens, hyp.score)
                })?;
                compared += 1;
            }
        }
    }
    Ok(format!("20 seeds × 3 CTC weights, {compared} ranked hypotheses match enumeration"))
}

// ---------------------------------------------------------------- samplers

fn sampler_invariant() -> Check {
    let spec = CorpusSpec::default();
    let pools: Vec<usize> = spec.languages.iter().map(|l| l.train).collect();
    let params = SamplerParams {
        pool_sizes: pools.clone(),
        batch_size: 16,
        per_language: 4,
        seed: 1,
    };
    let reg = SamplerRegistry::default();
    let balanced = reg.build("balanced", &params).map_err(|e| e.to_string())?;
    for step in 0..10_000 {
        let mut counts = vec![0; pools.len()];
        for (l, i) in balanced.batch(step) {
            ensure(i < pools[l], || format!("step {step}: index {i} outside pool {l}"))?;
            counts[l] += 1;
        }
        ensure(counts.iter().all(|&c| c == 4), || format!("step {step}: counts {counts:?}"))?;
    }
    let random = reg.build("random", &params).map_err(|e| e.to_string())?;
    let mut counts = vec![0usize; pools.len()];
    for step in 0..10_000 {
        for (l, _) in random.batch(step) {
            counts[l] += 1;
        }
    }
    let total: usize = pools.iter().sum();
    let drawn: usize = counts.iter().sum();
    let mut worst: f64 = 0.0;
    for l in 0..pools.len() {
        let dev = (counts[l] as f64 / drawn as f64 - pools[l] as f64 / total as f64).abs();
        worst = worst.max(dev);
    }
    ensure(worst <= 0.02, || format!("random proportions off by {worst:.4}"))?;
    Ok(format!("10^4 balanced batches exact; random max proportion deviation {worst:.4} (≤ 0.02)"))
}

// ---------------------------------------------------------------- experiments

struct Experiments {
    table: ResultsTable,
    results: BTreeMap<String, PresetResult>,
}

const SYSTEMS: [&str; 4] = ["smt", "bs", "a2_adjust_train", "a2_adjust_infer"];
const TAUS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

fn run_systems(ws: &Workspace, names: &[&str]) -> std::result::Result<Experiments, String> {
    let base = TrainConfig::default();
    let mut table = ResultsTable::new(base.active_languages());
    let mut results = BTreeMap::new();
    for name in names {
        let r = run_preset(ws, name, &base).map_err(|e| format!("{name}: {e}"))?;
        table.push(name, r.report.clone());
        results.insert(name.to_string(), r);
    }
    Ok(Experiments { table, results })
}

fn directional(ws: &Workspace, exp: &mut Option<Experiments>) -> Check {
    let run = run_systems(ws, &SYSTEMS)?;
    println!("{}", run.table.render());
    let spec = CorpusSpec::default();
    let mut by_size: Vec<&LanguageSpec> = spec.languages.iter().collect();
    by_size.sort_by_key(|l| std::cmp::Reverse(l.train));
    let head = &by_size[0].id;
    let tail: Vec<&String> = by_size[by_size.len() / 2..].iter().map(|l| &l.id).collect();
    let cer = |sys: &str, lang: &str| run.results[sys].report.row(lang).map(|r| r.cer).unwrap();
    let macro_cer = |sys: &str| run.results[sys].report.macro_cer;

    let mut failures = Vec::new();
    for l in &tail {
        if cer("bs", l) >= cer("smt", l) {
            failures.push(format!("(a) tail {l}: BS {:.4} ≥ SMT {:.4}", cer("bs", l), cer("smt", l)));
        }
    }
    if cer("bs", head) <= cer("smt", head) {
        failures.push(format!("(a) head {head}: BS {:.4} ≤ SMT {:.4}", cer("bs", head), cer("smt", head)));
    }
    let a2 = macro_cer("a2_adjust_train");
    if !(a2 < macro_cer("smt") && a2 < macro_cer("bs")) {
        failures.push(format!(
            "(b) A2 macro {a2:.4} vs SMT {:.4}, BS {:.4}",
            macro_cer("smt"),
            macro_cer("bs")
        ));
    }
    let infer_dir = &run.results["a2_adjust_infer"].run_dirs[0];
    let loaded = load_run(infer_dir, None, &[]).map_err(|e| e.to_string())?;
    let corpus = ws.ensure_corpus(&loaded.config.corpus).map_err(|e| e.to_string())?;
    let data = TrainData::prepare(&loaded.config, &corpus).map_err(|e| e.to_string())?;
    let points = sweep_tau(&loaded, &data, "valid", &TAUS).map_err(|e| e.to_string())?;
    println!("{}", sweep_table(&points, &data.languages));
    let at_zero = points[0].report.macro_cer;
    let best = points[1..].iter().map(|p| p.report.macro_cer).fold(f64::INFINITY, f64::min);
    if at_zero < best {
        failures.push(format!("(c) CER(τ=0) {at_zero:.4} < min over τ>0 {best:.4}"));
    }
    let summary = format!(
        "(a) tail {} BS<SMT, head {head} BS>SMT; (b) macro A2 {:.2}% vs SMT {:.2}% BS {:.2}%; (c) sweep CER(0) {:.2}% ≥ min {:.2}%",
        tail.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
        100.0 * a2,
        100.0 * macro_cer("smt"),
        100.0 * macro_cer("bs"),
        100.0 * at_zero,
        100.0 * best
    );
    *exp = Some(run);
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(failures.join("; "))
    }
}

fn lm_transfer(ws: &Workspace) -> Check {
    let cfg = PresetRegistry::default()
        .configure("a2_adjust_train", &TrainConfig::default())
        .map_err(|e| e.to_string())?;
    let corpus = ws.ensure_corpus(&cfg.corpus).map_err(|e| e.to_string())?;
    let data = TrainData::prepare(&cfg, &corpus).map_err(|e| e.to_string())?;
    let lm = ensure_lm(&ws.root, &cfg).map_err(|e| e.to_string())?;
    let fresh = SpeechTransformer::new(&cfg.model, data.vocab.model_size(), &data.languages, cfg.seed).unwrap();
    let transferred = initial_model(&cfg, &data, Some(&lm)).map_err(|e| e.to_string())?;
    let (sos, eos) = (data.vocab.sos(), data.vocab.eos());
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for lang in &data.languages {
        let texts: Vec<Vec<usize>> =
            data.valid.iter().filter(|u| &u.lang == lang).map(|u| data.vocab.encode(&u.text)).collect();
        let p0 = decoder_text_perplexity(&fresh, &texts, sos, eos, lang).map_err(|e| e.to_string())?;
        let p1 = decoder_text_perplexity(&transferred, &texts, sos, eos, lang).map_err(|e| e.to_string())?;
        parts.push(format!("{lang} {p1:.2}<{p0:.2}"));
        if p1 >= p0 {
            failures.push(format!("{lang}: transferred {p1:.3} ≥ random {p0:.3}"));
        }
    }
    if failures.is_empty() {
        Ok(format!("held-out perplexity transferred<random: {}", parts.join(", ")))
    } else {
        Err(failures.join("; "))
    }
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    matches!((std::fs::read(a), std::fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn reproducibility(first: Option<&Experiments>) -> Check {
    let first = first.ok_or("the first run did not complete")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ws = Workspace::new(dir.path());
    let names = ["smt", "a2_adjust_train"];
    let second = run_systems(&ws, &names)?;
    let mut again = ResultsTable::new(first.table.languages.clone());
    for (name, report) in &first.table.rows {
        if names.contains(&name.as_str()) {
            again.push(name, report.clone());
        }
    }
    ensure(again.render() == second.table.render(), || "rendered tables differ".into())?;
    ensure(again.to_json() == second.table.to_json(), || "JSON tables differ".into())?;
    for name in names {
        let (a, b) = (&first.results[name].run_dirs[0], &second.results[name].run_dirs[0]);
        for f in [LEDGER_FILE, AVERAGED_CKPT] {
            ensure(same_bytes(&a.join(f), &b.join(f)), || format!("{name}: {f} differs"))?;
        }
    }
    Ok(format!("{} rerun in a fresh workspace: tables, ledgers and averaged checkpoints bit-identical", names.join(", ")))
}

// ---------------------------------------------------------------- harness

fn run(name: &str, budget: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let outcome = match (outcome, budget) {
        (Ok(_), Some(b)) if elapsed > b => Err(format!("took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), b.as_secs_f64())),
        (o, _) => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {name}: {detail} [{:.1}s]", elapsed.as_secs_f64());
    outcome.is_ok()
}

fn main() {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= run("gradient-suite", Some(secs(120)), gradient_suite);
    ok &= run("ctc-oracle", Some(secs(30)), ctc_oracle);
    ok &= run("prior-identity", None, prior_identity);
    ok &= run("adjustment-identities", None, adjustment_identities);
    ok &= run("adapter-identity", None, adapter_identity);
    ok &= run("beam-oracle", Some(secs(60)), beam_oracle);
    ok &= run("sampler-invariant", None, sampler_invariant);

    let dir = tempfile::tempdir().expect("temp workspace");
    let ws = Workspace::new(dir.path());
    let mut exp = None;
    ok &= run("directional-long-tail", Some(secs(1800)), || directional(&ws, &mut exp));
    ok &= run("lm-transfer", None, || lm_transfer(&ws));
    ok &= run("reproducibility", None, || reproducibility(exp.as_ref()));

    if !ok {
        std::process::exit(1);
    }
}
