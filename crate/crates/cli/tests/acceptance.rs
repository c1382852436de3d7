//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero when any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use occlass_core::corpus::{split, JobAd, SplitSpec};
use occlass_core::ensemble::validate_weights;
use occlass_core::evalmetrics::{confusion, corpus_hierarchical_prf, hierarchical_prf_codes, macro_f1, topk_accuracy, F1Classes};
use occlass_core::hierarchy::{combine_levels, default_level_weights, path_scores, ChildModel, CombineMode, LcpnRouter, LevelDistribution};
use occlass_core::nnet::{Classifier, HeadArchitecture, HeadKind, Mode};
use occlass_core::pipeline::{ensemble_predict, gold_leaves, train_bundle, EncoderSpec, HeadSpec, ModelBundle, PostProcess, Predictor, TrainTarget};
use occlass_core::synth::{complementary_ads, keyword_ads, synthetic_taxonomy};
use occlass_core::taxonomy::{Scheme, Taxonomy};
use occlass_core::textprep::{clean, tokenize, truncate, CleanRuleSet, Field, SubwordVocab, TokenSeq, TruncationPolicy, TruncationStrategy};
use occlass_core::train::{accumulated_gradient, adamw_step, batch_gradient, clip_gradients, cosine_lr, global_norm, AdamHyper, AdamState, Dataset, TrainConfig};
use occlass_core::tune::{run_study, Dimension, ParamSpec, SearchSpace, TpeSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// 1 ----------------------------------------------------------------------

fn fuzz_string(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &[
        "Cleaner", "maid", "/", " or ", "Care", "assistant", "(", ")", "[", "]", "Kirby House", "10hrs", "16-20 hours per week", "£9.20",
        "- £10.50", "per hour", "£", "-", "–", "CSCS", "card holder", " ", "  ", "Night", "Driver", "Senior", "nurse", "£25k", "40 hours",
        "Part time", "&", "x", "12.5", "{", "}",
    ];
    let n = rng.gen_range(0..9);
    let mut s = String::new();
    for _ in 0..n {
        let p = PIECES[rng.gen_range(0..PIECES.len())];
        if rng.gen_bool(0.5) && !s.is_empty() {
            s.push(' ');
        }
        s.push_str(p);
    }
    s
}

fn cleaning() -> Outcome {
    let rules = CleanRuleSet::title();
    let golden = [
        ("Cleaner/maid", "cleaner maid"),
        ("Night care assistant (Kirby House)", "Night care assistant"),
        ("Customer service 10hrs", "Customer service"),
        ("Carer £9.20- £10.50 per hour", "Carer"),
        ("Installation assistant-CSCS card holder", "Installation assistant"),
    ];
    for (raw, want) in golden {
        let got = clean(raw, &rules);
        ensure!(got == want, "{raw:?} cleaned to {got:?}, expected {want:?}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let s = fuzz_string(&mut rng);
        for rules in [CleanRuleSet::title(), CleanRuleSet::description()] {
            let once = clean(&s, &rules);
            let twice = clean(&once, &rules);
            ensure!(once == twice, "not idempotent on {s:?}: {once:?} then {twice:?}");
        }
    }
    Ok("5 golden strings, 1000 fuzz strings idempotent".into())
}

// 2 ----------------------------------------------------------------------

/// Longest-prefix segmentation written against a plain string set.
fn oracle_segment(word: &str, vocab: &HashSet<String>) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let mut matched = None;
        for j in (i + 1..=chars.len()).rev() {
            let body: String = chars[i..j].iter().collect();
            let candidate = if i == 0 { body } else { format!("##{body}") };
            if vocab.contains(&candidate) {
                matched = Some((candidate, j));
                break;
            }
        }
        match matched {
            Some((tok, j)) => {
                out.push(tok);
                i = j;
            }
            None => return vec!["[UNK]".to_string()],
        }
    }
    out
}

fn tokenizer_oracle() -> Outcome {
    let alphabet: Vec<char> = "abcdefghij".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut entries = BTreeSet::new();
    // Most but not all single characters, so some words are unmatched.
    for &c in &alphabet[..8] {
        entries.insert(c.to_string());
        entries.insert(format!("##{c}"));
    }
    while entries.len() < 200 {
        let len = rng.gen_range(2..6);
        let body: String = (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
        entries.insert(if rng.gen_bool(0.5) { format!("##{body}") } else { body });
    }
    let set: HashSet<String> = entries.iter().cloned().collect();
    let vocab = SubwordVocab::new(entries.iter().cloned()).map_err(|e| e.to_string())?;
    let mut unk = 0usize;
    for _ in 0..10_000 {
        let words = rng.gen_range(0..5);
        let text: Vec<String> = (0..words)
            .map(|_| (0..rng.gen_range(1..13)).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect())
            .collect();
        let text = text.join(" ");
        let got: Vec<String> = tokenize(&text, &vocab, Field::Title).tokens.iter().map(|&id| vocab.token(id).to_string()).collect();
        let want: Vec<String> = text.split_whitespace().flat_map(|w| oracle_segment(w, &set)).collect();
        ensure!(got == want, "{text:?}: tokenizer {got:?}, oracle {want:?}");
        unk += want.iter().filter(|t| *t == "[UNK]").count();
    }
    Ok(format!("10000 strings agree with the oracle ({unk} unknown words)"))
}

// 3 ----------------------------------------------------------------------

fn truncation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=2048);
        let seq = TokenSeq::new((0..n as u32).collect(), Field::Description);
        for strategy in [TruncationStrategy::Head, TruncationStrategy::Tail, TruncationStrategy::Mixed] {
            let policy = TruncationPolicy::new(strategy, 512, 384).map_err(|e| e.to_string())?;
            let out = truncate(&seq, &policy);
            ensure!(out.len() == n.min(512), "{strategy:?} on {n} tokens kept {}", out.len());
            if strategy == TruncationStrategy::Mixed && n > 512 {
                let mut want: Vec<u32> = (0..384).collect();
                want.extend(n as u32 - 128..n as u32);
                ensure!(out.tokens == want, "mixed truncation of {n} tokens is not head 384 + tail 128");
            }
        }
    }
    Ok("1000 lengths, all three strategies".into())
}

// 4 ----------------------------------------------------------------------

fn grad_check(arch: HeadArchitecture, seed: u64) -> Result<(f64, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model: Classifier<f64> = Classifier::new(arch.clone(), seed).map_err(|e| e.to_string())?;
    let x: Vec<f64> = (0..arch.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target = rng.gen_range(0..arch.num_classes);
    let mut grads = model.zero_grads();
    model.accumulate(&x, target, Mode::Infer, &mut rng, &mut grads).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let n = model.nets[0].param_count();
    let mut worst: f64 = 0.0;
    let samples = 96;
    for _ in 0..samples {
        let i = rng.gen_range(0..n);
        let mut plus = model.clone();
        plus.nets[0].params_mut()[i] += h;
        let mut minus = model.clone();
        minus.nets[0].params_mut()[i] -= h;
        let numeric = (plus.loss(&x, target).map_err(|e| e.to_string())? - minus.loss(&x, target).map_err(|e| e.to_string())?) / (2.0 * h);
        let analytic = grads[0][i];
        // Both near zero: the difference is rounding noise.
        let err = if analytic.abs().max(numeric.abs()) < 1e-9 { 0.0 } else { rel_diff(analytic, numeric) };
        worst = worst.max(err);
    }
    Ok((worst, samples))
}

fn gradient_check() -> Outcome {
    let archs = [
        ("baseline", HeadArchitecture::baseline(40, 7)),
        ("simple", HeadArchitecture::simple(40, 7, 48, 0.35)),
        ("skillnet", HeadArchitecture::skillnet(24, 7)),
    ];
    let mut parts = Vec::new();
    for (i, (name, arch)) in archs.into_iter().enumerate() {
        let (worst, samples) = grad_check(arch, 40 + i as u64)?;
        ensure!(worst < 1e-4, "{name}: max relative error {worst:.3e}");
        parts.push(format!("{name} {worst:.1e} over {samples}"));
    }
    Ok(parts.join(", "))
}

// 5 ----------------------------------------------------------------------

fn optimizer_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (lr, wd) = (1.26e-4, 1.52e-6);
    let w0: Vec<f64> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut w = w0.clone();
    let mut state = AdamState::new(w.len());
    let zeros = vec![0.0; w.len()];
    adamw_step(&mut w, &zeros, &mut state, &AdamHyper::new(lr, wd)).map_err(|e| e.to_string())?;
    for (a, b) in w.iter().zip(&w0) {
        ensure!(*a == b * (1.0 - lr * wd), "zero-gradient step moved {b} to {a}");
    }
    for total in [1, 7, 100, 1500] {
        ensure!(cosine_lr(0, total, 0.3, 0.01) == 0.3, "cosine start differs for horizon {total}");
        ensure!(cosine_lr(total, total, 0.3, 0.01) == 0.01, "cosine end differs for horizon {total}");
    }
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let clip = rng.gen_range(0.01..5.0);
        let mut g: Vec<Vec<f64>> = (0..3).map(|_| (0..50).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        clip_gradients(&mut g, clip);
        let norm = global_norm(&g);
        ensure!(norm <= clip + 1e-12, "clipped norm {norm} exceeds {clip}");
        worst = worst.max(norm - clip);
    }
    Ok(format!("exact decay and endpoints, clipped norm excess {worst:.1e}"))
}

// 6 ----------------------------------------------------------------------

fn accumulation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let arch = HeadArchitecture::simple(32, 9, 24, 0.2);
    let model: Classifier<f64> = Classifier::new(arch, 6).map_err(|e| e.to_string())?;
    let inputs: Vec<Vec<f64>> = (0..320).map(|_| (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let targets: Vec<usize> = (0..320).map(|_| rng.gen_range(0..9)).collect();
    let data = Dataset::new(inputs, targets);
    let order: Vec<usize> = (0..320).collect();
    let batches: Vec<&[usize]> = order.chunks(16).collect();
    let (_, acc) = accumulated_gradient(&model, &data, &batches, &mut ChaCha8Rng::seed_from_u64(60)).map_err(|e| e.to_string())?;
    let (_, big) = batch_gradient(&model, &data, &order, &mut ChaCha8Rng::seed_from_u64(60)).map_err(|e| e.to_string())?;
    let flat = |g: &[Vec<f64>]| g.iter().flatten().copied().collect::<Vec<f64>>();
    let (acc, big) = (flat(&acc), flat(&big));
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = acc.iter().zip(&big).map(|(a, b)| a - b).collect();
    let grad_rel = norm(&diff) / norm(&big);
    ensure!(grad_rel < 1e-6, "accumulated gradient differs by {grad_rel:.3e}");

    let hp = AdamHyper::new(1.26e-4, 1.52e-6);
    let start = model.nets[0].params().to_vec();
    let mut p1 = start.clone();
    let mut p2 = start.clone();
    adamw_step(&mut p1, &acc, &mut AdamState::new(start.len()), &hp).map_err(|e| e.to_string())?;
    adamw_step(&mut p2, &big, &mut AdamState::new(start.len()), &hp).map_err(|e| e.to_string())?;
    let d1: Vec<f64> = p1.iter().zip(&start).map(|(a, b)| a - b).collect();
    let d2: Vec<f64> = p2.iter().zip(&start).map(|(a, b)| a - b).collect();
    let step_diff: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| a - b).collect();
    let step_rel = norm(&step_diff) / norm(&d2);
    ensure!(step_rel < 1e-6, "first optimizer step differs by {step_rel:.3e}");
    Ok(format!("gradient {grad_rel:.1e}, step {step_rel:.1e}"))
}

// 7 ----------------------------------------------------------------------

/// Ancestor codes of a dotted code, itself included.
fn dotted_ancestors(code: &str) -> BTreeSet<String> {
    let parts: Vec<&str> = code.split('.').collect();
    (1..=parts.len()).map(|k| parts[..k].join(".")).collect()
}

fn oracle_macro_f1(preds: &[usize], golds: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..classes {
        let tp = preds.iter().zip(golds).filter(|(p, g)| **p == c && **g == c).count() as f64;
        let fp = preds.iter().zip(golds).filter(|(p, g)| **p == c && **g != c).count() as f64;
        let fn_ = preds.iter().zip(golds).filter(|(p, g)| **p != c && **g == c).count() as f64;
        if tp > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    total / classes as f64
}

fn metric_oracles() -> Outcome {
    let t = synthetic_taxonomy(Scheme::Custom, &[3, 7, 15], 7).map_err(|e| e.to_string())?;
    let leaves = t.leaves().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 500;
    let golds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..leaves.len())).collect();
    let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..leaves.len()).map(|_| rng.gen::<f64>()).collect()).collect();
    let preds: Vec<usize> = scores
        .iter()
        .map(|s| (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a))).unwrap())
        .collect();

    let f1 = macro_f1(&preds, &golds, leaves.len(), F1Classes::All).map_err(|e| e.to_string())?;
    let want = oracle_macro_f1(&preds, &golds, leaves.len());
    ensure!((f1 - want).abs() < 1e-12, "macro-F1 {f1} vs oracle {want}");

    for k in [1, 3, 5] {
        let got = topk_accuracy(&scores, &golds, k).map_err(|e| e.to_string())?;
        let hits = scores
            .iter()
            .zip(&golds)
            .filter(|(s, &g)| s.iter().filter(|&&v| v > s[g]).count() < k)
            .count();
        let want = 100.0 * hits as f64 / n as f64;
        ensure!((got - want).abs() < 1e-9, "top-{k} {got} vs oracle {want}");
    }

    let pred_nodes: Vec<usize> = preds.iter().map(|&p| leaves[p]).collect();
    let gold_nodes: Vec<usize> = golds.iter().map(|&g| leaves[g]).collect();
    let summary = corpus_hierarchical_prf(&t, &pred_nodes, &gold_nodes).map_err(|e| e.to_string())?;
    let (mut common, mut psize, mut gsize) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred_nodes.iter().zip(&gold_nodes) {
        let a = dotted_ancestors(t.code_str(p));
        let b = dotted_ancestors(t.code_str(g));
        common += a.intersection(&b).count();
        psize += a.len();
        gsize += b.len();
    }
    let (hp, hr) = (common as f64 / psize as f64, common as f64 / gsize as f64);
    let hf = 2.0 * hp * hr / (hp + hr);
    ensure!(
        (summary.micro.precision - hp).abs() < 1e-12 && (summary.micro.recall - hr).abs() < 1e-12 && (summary.micro.f - hf).abs() < 1e-12,
        "hierarchical P/R/F {:?} vs oracle ({hp}, {hr}, {hf})",
        summary.micro
    );

    for level in 1..=3 {
        let m = confusion(&t, &preds, &golds, level).map_err(|e| e.to_string())?;
        let codes = t.level_codes(level);
        let lift = |leaf: usize| {
            let code = t.code_str(leaves[leaf]);
            let prefix = code.split('.').take(level).collect::<Vec<_>>().join(".");
            codes.iter().position(|c| *c == prefix).expect("ancestor code listed")
        };
        let mut want = vec![vec![0u64; codes.len()]; codes.len()];
        for (&p, &g) in preds.iter().zip(&golds) {
            want[lift(g)][lift(p)] += 1;
        }
        ensure!(m.counts == want, "confusion matrix at level {level} differs from the oracle");
    }

    let ons = Taxonomy::parse(
        "# format: occ-taxonomy v1\ncode,parent,level,title\n5,ROOT,1,Skilled trades\n52,5,2,Metal\n523,52,3,Vehicle\n524,52,3,Electrical\n\
         5235,523,4,Aircraft\n5242,524,4,Telecoms\n",
        Scheme::Ons2010,
    )
    .map_err(|e| e.to_string())?;
    let p = hierarchical_prf_codes(&ons, "5242", "5235").map_err(|e| e.to_string())?;
    ensure!(p.precision == 0.5 && p.recall == 0.5, "5242 vs 5235 gave hP {} hR {}", p.precision, p.recall);
    Ok(format!("500 instances over {:?} nodes, hP = hR = 0.5 on 5242/5235", t.level_counts()))
}

// 8 ----------------------------------------------------------------------

fn random_dists(t: &Taxonomy, rng: &mut ChaCha8Rng) -> Vec<LevelDistribution> {
    (1..=t.depth())
        .map(|level| {
            let mut p: Vec<f64> = (0..t.level_count(level)).map(|_| rng.gen::<f64>().powi(3)).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            LevelDistribution { level, probs: p }
        })
        .collect()
}

fn hierarchy_algebra() -> Outcome {
    let t = synthetic_taxonomy(Scheme::Custom, &[4, 9, 20], 8).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let weights = default_level_weights(t.depth());
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let dists = random_dists(&t, &mut rng);
        for mode in [CombineMode::TotalAvg, CombineMode::WeightedAvg, CombineMode::JointProb] {
            let s = combine_levels(&t, &dists, mode, &weights).map_err(|e| e.to_string())?;
            ensure!(s.iter().all(|v| *v >= 0.0), "{mode} produced a negative score");
            let err = (s.iter().sum::<f64>() - 1.0).abs();
            ensure!(err <= 1e-9, "{mode} sums to 1 + {err:.3e}");
            worst = worst.max(err);
        }
    }

    let toy = Taxonomy::parse("# format: occ-taxonomy v1\ncode,parent,level,title\nA,ROOT,1,A\nB,ROOT,1,B\na1,A,2,a1\na2,A,2,a2\nb1,B,2,b1\n", Scheme::Custom)
        .map_err(|e| e.to_string())?;
    let dists = vec![LevelDistribution { level: 1, probs: vec![0.6, 0.4] }, LevelDistribution { level: 2, probs: vec![0.5, 0.1, 0.4] }];
    let raw = path_scores(&toy, &dists, CombineMode::JointProb, &[]).map_err(|e| e.to_string())?;
    for (got, want) in raw.iter().zip([0.30, 0.06, 0.16]) {
        ensure!((got - want).abs() < 1e-12, "joint product {raw:?}, expected [0.30, 0.06, 0.16]");
    }
    let combined = combine_levels(&toy, &dists, CombineMode::JointProb, &[]).map_err(|e| e.to_string())?;
    ensure!((combined[0] - 0.30 / 0.52).abs() < 1e-12, "normalized joint {combined:?}");

    // Routing at threshold 1 never descends, so it must agree with the flat head.
    let dim = 16;
    let net = |classes: usize, seed: u64| Classifier::<f64>::new(HeadArchitecture::simple(dim, classes, 12, 0.0), seed);
    let root = net(t.level_count(1), 1).map_err(|e| e.to_string())?;
    let flat = net(t.leaves().len(), 2).map_err(|e| e.to_string())?;
    let mut children = std::collections::BTreeMap::new();
    for level in 1..t.depth() {
        for &p in t.level_nodes(level) {
            let kids = t.node(p).children.clone();
            if kids.len() > 1 {
                let model = net(kids.len(), 100 + p as u64).map_err(|e| e.to_string())?;
                children.insert(p, ChildModel { children: kids, model });
            }
        }
    }
    let router = LcpnRouter::new(&t, root, children, flat.clone(), 1.0).map_err(|e| e.to_string())?;
    for i in 0..500 {
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let routed = router.predict(&t, &x).map_err(|e| e.to_string())?;
        let p = flat.predict_proba(&x).map_err(|e| e.to_string())?;
        let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap();
        ensure!(routed.leaf == best, "doc {i}: routed leaf {} but flat argmax {best}", routed.leaf);
    }
    Ok(format!("max sum error {worst:.1e}; joint example reproduced; 500 docs routed to the flat argmax"))
}

// 9 and 10 -------------------------------------------------------------

/// Wide enough that few of the 60 leaf keywords share a hash bucket.
const TEXT_DIM: usize = 4096;

fn fast_config(seed: u64) -> TrainConfig {
    TrainConfig { learning_rate: 0.01, epochs: 75, batch_size: 16, accumulation_steps: 1, patience: 10, seed, ..TrainConfig::default() }
}

fn fast_head() -> HeadSpec {
    HeadSpec { kind: HeadKind::Simple, width: 64, dropout: 0.1 }
}

/// 90/10 test split, then a validation split carved from the training part.
fn three_way(ads: &[JobAd], seed: u64) -> Result<(Vec<JobAd>, Vec<JobAd>, Vec<JobAd>), String> {
    let (train, test) = split(ads, &SplitSpec::new(0.1, seed, Scheme::Custom)).map_err(|e| e.to_string())?;
    let (fit, val) = split(&train, &SplitSpec::new(0.1, seed ^ 0xa5a5, Scheme::Custom)).map_err(|e| e.to_string())?;
    Ok((fit, val, test))
}

fn fit_flat(t: &Taxonomy, fit: &[JobAd], val: &[JobAd], encoder: EncoderSpec, head: &HeadSpec, config: &TrainConfig) -> Result<ModelBundle<f64>, String> {
    let (bundle, _) = train_bundle::<f64>(t, fit, val, encoder, &TrainTarget::Level(t.depth()), head, config, None, &|_, _| {}).map_err(|e| e.to_string())?;
    Ok(bundle)
}

fn synthetic_end_to_end() -> Outcome {
    let t = synthetic_taxonomy(Scheme::Custom, &[10, 30, 60], 9).map_err(|e| e.to_string())?;
    let ads = keyword_ads(&t, 2000, 9);
    let (fit, val, test) = three_way(&ads, 9)?;
    let bundle = fit_flat(&t, &fit, &val, EncoderSpec::hashed_text(Field::Title, TEXT_DIM, 2), &fast_head(), &fast_config(9))?;
    let predictor = Predictor::new(&t, &bundle, PostProcess::default()).map_err(|e| e.to_string())?;
    let golds = gold_leaves(&t, &test);
    let mut correct = [0usize; 3];
    for (ad, gold) in test.iter().zip(&golds) {
        let gold = gold.ok_or("unlabelled test ad")?;
        let pred = t.leaves()[predictor.predict_ad(ad, None).map_err(|e| e.to_string())?.leaf()];
        for level in 1..=3 {
            correct[level - 1] += usize::from(t.ancestor_at(pred, level) == t.ancestor_at(gold, level));
        }
    }
    let acc: Vec<f64> = correct.iter().map(|&c| c as f64 / test.len() as f64).collect();
    ensure!(acc[2] >= 0.95, "leaf accuracy {:.3} below 0.95 ({} test ads)", acc[2], test.len());
    ensure!(acc.windows(2).all(|w| w[0] >= w[1]), "level accuracies {acc:?} increase with depth");
    Ok(format!("{} test ads, level accuracy {:.3} / {:.3} / {:.3}", test.len(), acc[0], acc[1], acc[2]))
}

fn ensemble_complementarity() -> Outcome {
    let t = synthetic_taxonomy(Scheme::Custom, &[10, 30, 60], 10).map_err(|e| e.to_string())?;
    let ads = complementary_ads(&t, 2000, 10);
    let (fit, val, test) = three_way(&ads, 10)?;
    // Each field alone only narrows the leaf down, so fusion needs members
    // that spread their mass over the candidates instead of memorizing the
    // filler words; default dropout and strong decay keep them that way.
    let head = HeadSpec { dropout: 0.35, ..fast_head() };
    let config = |seed| TrainConfig { learning_rate: 1e-3, weight_decay: 1e-2, ..fast_config(seed) };
    let title = fit_flat(&t, &fit, &val, EncoderSpec::hashed_text(Field::Title, TEXT_DIM, 2), &head, &config(10))?;
    let skills = fit_flat(&t, &fit, &val, EncoderSpec::skills_from(&fit), &head, &config(11))?;
    let tp = Predictor::new(&t, &title, PostProcess::default()).map_err(|e| e.to_string())?;
    let sp = Predictor::new(&t, &skills, PostProcess::default()).map_err(|e| e.to_string())?;
    let weights = [0.5, 0.5];
    validate_weights(&weights).map_err(|e| e.to_string())?;
    let members = [(&tp, weights[0]), (&sp, weights[1])];
    let golds = gold_leaves(&t, &test);
    let mut hits = [0usize; 3];
    for (ad, gold) in test.iter().zip(&golds) {
        let gold = t.position(gold.ok_or("unlabelled test ad")?);
        let preds = [tp.predict_ad(ad, None), sp.predict_ad(ad, None), ensemble_predict(&members, ad, None)];
        for (h, p) in hits.iter_mut().zip(preds) {
            *h += usize::from(p.map_err(|e| e.to_string())?.leaf() == gold);
        }
    }
    let pct: Vec<f64> = hits.iter().map(|&h| 100.0 * h as f64 / test.len() as f64).collect();
    let margin = pct[2] - pct[0].max(pct[1]);
    ensure!(margin >= 3.0, "ensemble {:.1}% vs title {:.1}% and skills {:.1}%", pct[2], pct[0], pct[1]);
    Ok(format!("title {:.1}%, skills {:.1}%, ensemble {:.1}% (+{margin:.1} pp)", pct[0], pct[1], pct[2]))
}

// 11 ---------------------------------------------------------------------

fn tuner_sanity() -> Outcome {
    let space = SearchSpace { params: vec![ParamSpec { name: "x".into(), dimension: Dimension::Uniform { low: 0.0, high: 1.0 } }] };
    let settings = TpeSettings::default();
    let mut found = Vec::new();
    for seed in 0..5 {
        let study = run_study(&space, &settings, 100, seed, Vec::new(), |c| {
            let f = -(c["x"] - 0.3).powi(2);
            Ok((f, vec![f]))
        }, |_| {})
        .map_err(|e| e.to_string())?;
        found.push(study.best().ok_or("no completed trial")?.config["x"]);
    }
    let close = found.iter().filter(|x| (*x - 0.3).abs() <= 0.05).count();
    ensure!(close >= 4, "best x per seed {found:?}: only {close} of 5 within 0.05");

    let standard = SearchSpace::standard();
    let study = run_study(&standard, &settings, 100, 11, Vec::new(), |c| {
        let f = -(c["learning_rate"].log10() + 3.0).powi(2) - (c["epochs"] - 40.0).abs() / 100.0 - c["hidden_dropout"];
        Ok((f, vec![f]))
    }, |_| {})
    .map_err(|e| e.to_string())?;
    for trial in &study.history {
        let c = &trial.config;
        ensure!(standard.admits(c), "trial {} off grid: {c:?}", trial.number);
        let epochs = c["epochs"];
        ensure!(epochs.fract() == 0.0 && epochs as u64 % 5 == 0 && (5.0..=100.0).contains(&epochs), "epochs {epochs}");
        let steps = (c["hidden_dropout"] - 0.1) / 0.05;
        ensure!((steps - steps.round()).abs() < 1e-9 && (0.0..=10.0).contains(&steps.round()), "dropout {}", c["hidden_dropout"]);
        ensure!((1e-9..=1e-2).contains(&c["weight_decay"]) && (1e-6..=1e-1).contains(&c["learning_rate"]), "log-uniform bounds violated: {c:?}");
    }
    Ok(format!("best x per seed {:?}; 100 standard-space suggestions on grid", found.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>()))
}

// 12 ---------------------------------------------------------------------

const CONFIG: &str = "[train]\nlearning_rate = 0.01\nepochs = 10\naccumulation_steps = 1\npatience = 10\n\n[head]\nwidth = 64\ndropout = 0.1\n\n[encoder]\ndim = 256\n";

fn occlass(dir: &Path, args: &[String]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_occlass")).current_dir(dir).args(args).output().map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn pipeline_run(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    std::fs::write(dir.join("run.toml"), CONFIG).map_err(|e| e.to_string())?;
    let corpus = data.join("ads200.jsonl");
    let taxonomy = data.join("ons2020_synthetic.csv");
    let g = ["--threads", "1", "--seed", "12", "--config", "run.toml"];
    let with = |rest: &[&str]| g.iter().chain(rest).map(|s| s.to_string()).collect::<Vec<String>>();
    occlass(dir, &with(&["ingest", "--corpus", corpus.to_str().unwrap(), "--taxonomy", taxonomy.to_str().unwrap(), "--out", "data"]))?;
    occlass(dir, &with(&["train", "--data", "data", "--all-levels", "--out", "model.occ"]))?;
    occlass(dir, &with(&["predict", "--model", "model.occ", "--data", "data", "--postprocess", "joint_prob", "--out", "pred.jsonl"]))?;
    occlass(dir, &with(&["evaluate", "--predictions", "pred.jsonl", "--data", "data", "--out", "eval"]))?;
    ["data/train.jsonl", "data/test.jsonl", "model.occ", "model.occ.report.json", "pred.jsonl", "eval/report.json", "eval/levels.csv", "eval/confusion_level4.csv"]
        .iter()
        .map(|f| Ok((f.to_string(), std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?)))
        .collect()
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline_run(a.path())?;
    let second = pipeline_run(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure!(x == y, "{name} differs between runs");
    }
    Ok(format!("{} artifacts byte-identical", first.len()))
}

// ----------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 12] = [
        ("preprocessing goldens", Duration::from_secs(1), cleaning),
        ("tokenizer oracle", Duration::from_secs(10), tokenizer_oracle),
        ("truncation", Duration::from_secs(1), truncation),
        ("gradient check", Duration::from_secs(30), gradient_check),
        ("optimizer identities", Duration::from_secs(1), optimizer_identities),
        ("gradient accumulation", Duration::from_secs(10), accumulation),
        ("metric oracles", Duration::from_secs(5), metric_oracles),
        ("hierarchy algebra", Duration::from_secs(10), hierarchy_algebra),
        ("synthetic end-to-end", Duration::from_secs(300), synthetic_end_to_end),
        ("ensemble complementarity", Duration::from_secs(300), ensemble_complementarity),
        ("tuner sanity", Duration::from_secs(60), tuner_sanity),
        ("determinism", Duration::from_secs(600), determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({elapsed:.2?}): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({elapsed:.2?}): {detail}", i + 1);
            }
        }
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
