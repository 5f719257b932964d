//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Criteria 5 to 9 train full toy systems and take tens of
//! minutes on one CPU core.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use restyle::config::RunConfig;
use restyle::corpus::{insert_sentence_markers, reorder, shuffle_sentences, Story, StyleId};
use restyle::eval::{bl_overall, bs_overall};
use restyle::keywords::{build_dictionary, extract_and_mask, CapitalizationTagger, KeywordConfig, KeywordDictionary};
use restyle::nn::{Checkpoint, MarkedIds, TransferModel};
use restyle::objectives::{loss_dis, loss_sop, loss_style, stage1_loss, LossTerms, Stage1Config};
use restyle::synthetic::{generate, SyntheticConfig};
use restyle::trainer::{classifier_examples, prepare_stage1, train_classifier, train_stage1, Stage1Options, TrainOptions};
use restyle::vocab::MASK;
use restyle::workflow::{
    default_tagger, fill_accuracy, pointer_accuracy, reconstruction_accuracy, score_transfer, train_system,
    RunPaths, TrainedSystem, TransferScores,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gate(id: u8, title: &str, limit_secs: f64, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = check();
    let secs = start.elapsed().as_secs_f64();
    let in_time = secs < limit_secs;
    let pass = out.pass && in_time;
    println!(
        "criterion {id:>2} {}: {title}: {} [{secs:.1}s of {limit_secs:.0}s]",
        if pass { "PASS" } else { "FAIL" },
        out.detail
    );
    pass
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

// ---------------------------------------------------------------- 1

/// Published rows: target, system, a-Acc, BLEU-1, BLEU-2, BS-F1,
/// BL-Overall, BS-Overall.
const PUBLISHED: [(&str, &str, f64, f64, f64, f64, f64, f64); 12] = [
    ("ZH-LX", "Style Transformer", 0.13, 82.53, 77.17, 96.70, 2.96, 3.26),
    ("ZH-LX", "StyleLM", 33.33, 39.43, 19.66, 76.30, 31.38, 50.42),
    ("ZH-LX", "Reverse Attention", 42.93, 20.98, 6.70, 64.35, 24.37, 52.55),
    ("ZH-LX", "two-stage transfer", 59.94, 32.19, 14.44, 69.45, 37.38, 64.52),
    ("ZH-JY", "Style Transformer", 0.13, 83.24, 77.85, 96.97, 3.23, 3.55),
    ("ZH-JY", "StyleLM", 51.16, 36.72, 18.01, 74.62, 37.41, 61.78),
    ("ZH-JY", "Reverse Attention", 66.39, 21.15, 6.32, 64.54, 30.19, 65.45),
    ("ZH-JY", "two-stage transfer", 62.96, 30.71, 14.5, 70.16, 37.72, 66.46),
    ("EN-SP", "Style Transformer", 0.01, 99.88, 99.88, 90.78, 3.31, 3.16),
    ("EN-SP", "StyleLM", 3.44, 37.05, 19.40, 87.30, 9.85, 17.32),
    ("EN-SP", "Reverse Attention", 0.01, 96.90, 96.16, 90.61, 3.25, 3.15),
    ("EN-SP", "two-stage transfer", 52.41, 32.20, 12.71, 84.31, 34.31, 66.47),
];

fn overall_arithmetic() -> Outcome {
    let mut bad = Vec::new();
    for (target, system, a, b1, b2, f1, bl, bs) in PUBLISHED {
        let (got_bl, got_bs) = (bl_overall(a, b1, b2), bs_overall(a, f1));
        if (got_bl - bl).abs() > 0.03 || (got_bs - bs).abs() > 0.03 {
            bad.push(format!("{target}/{system}: {got_bl:.2}/{got_bs:.2} vs printed {bl}/{bs}"));
        }
    }
    let ok = PUBLISHED.len() - bad.len();
    let mut detail = format!("{ok}/{} rows reproduce both overalls within 0.03", PUBLISHED.len());
    if !bad.is_empty() {
        detail.push_str(&format!("; inconsistent printed rows: {}", bad.join("; ")));
    }
    outcome(bad.is_empty(), detail)
}

// ---------------------------------------------------------------- 2

fn loss_units() -> Outcome {
    let dev = Device::Cpu;
    let dis = scalar(&loss_dis(&Tensor::new(&[[0.0f64, 0.0], [2.0, 0.0]], &dev).unwrap()).unwrap());

    let mut worst_sop: f64 = 0.0;
    for n in 1..=8usize {
        let scores = Tensor::zeros((1, n, n), DType::F64, &dev).unwrap();
        let gold: Vec<usize> = (0..n).rev().collect();
        let v = scalar(&loss_sop(&scores, &[gold], &[n]).unwrap());
        worst_sop = worst_sop.max((v - (n as f64).ln()).abs());
    }

    let terms = LossTerms {
        self_rec: Tensor::new(1.25f64, &dev).unwrap(),
        dis: Tensor::new(0.5f64, &dev).unwrap(),
        sop: Tensor::new(2.0f64, &dev).unwrap(),
        style: Tensor::new(0.75f64, &dev).unwrap(),
    };
    let base = Stage1Config {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        ..Stage1Config::default()
    };
    let mut worst_lin: f64 = 0.0;
    for (which, term) in [(1, 0.5), (2, 2.0), (3, 0.75)] {
        for lambda in [0.0, 0.5, 3.0] {
            let mut cfg = base.clone();
            match which {
                1 => cfg.lambda1 = lambda,
                2 => cfg.lambda2 = lambda,
                _ => cfg.lambda3 = lambda,
            }
            let total = scalar(&stage1_loss(&terms, &cfg, 0).unwrap());
            worst_lin = worst_lin.max((total - (1.25 + lambda * term)).abs());
        }
    }
    outcome(
        dis == 2.0 && worst_sop < 1e-9 && worst_lin < 1e-12,
        format!("dis hand case {dis}; |sop - ln n| max {worst_sop:.1e}; linearity error max {worst_lin:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between backprop and central differences of `f`
/// at `x`.
fn finite_difference_check(x: Vec<f64>, shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let dev = Device::Cpu;
    let var = Var::from_tensor(&Tensor::from_vec(x.clone(), shape, &dev).unwrap()).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let eval = |delta: f64| {
            let mut y = x.clone();
            y[i] += delta;
            scalar(&f(&Tensor::from_vec(y, shape, &dev).unwrap()))
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        if analytic[i].abs() > 1e-7 || numeric.abs() > 1e-7 {
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let means: Vec<f64> = (0..4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dis_err = finite_difference_check(means, &[4, 8], |m| loss_dis(m).unwrap());

    let scores: Vec<f64> = (0..2 * 8 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let gold = vec![vec![3, 0, 7, 1, 6, 2, 5, 4], vec![2, 0, 1]];
    let sop_err = finite_difference_check(scores, &[2, 8, 8], |s| loss_sop(s, &gold, &[8, 3]).unwrap());

    let fx = common::fixture(4);
    let model = fx.transfer(DType::F64);
    let mut clf = fx.classifier(DType::F64);
    let opts = TrainOptions {
        steps: 5,
        batch_size: 4,
        learning_rate: 1e-2,
        ..Default::default()
    };
    train_classifier(&mut clf, &classifier_examples(&fx.stories, None), &[], &opts).unwrap();
    let inputs: Vec<MarkedIds> = fx.stories[..2]
        .iter()
        .map(|s| MarkedIds::from_marked(&insert_sentence_markers(s), model.vocab()))
        .collect();
    let fused = model.fuse(&[StyleId(1), StyleId(0)], &model.encode(&inputs).unwrap()).unwrap();
    let probs = model.soft_decode(&fused, 10, 1.0).unwrap();
    let loss = loss_style(&clf.logits_soft(&probs, &[10, 10]).unwrap(), &[1, 0]).unwrap();
    let grads = loss.backward().unwrap();
    let mut decoder_norm = 0.0;
    for (name, var) in model.params().vars() {
        if name.starts_with("dec.") {
            if let Some(g) = grads.get(var.as_tensor()) {
                decoder_norm += scalar(&g.sqr().unwrap().sum_all().unwrap());
            }
        }
    }
    let decoder_norm = decoder_norm.sqrt();
    outcome(
        dis_err < 1e-4 && sop_err < 1e-4 && decoder_norm > 0.0,
        format!("dis rel err {dis_err:.1e}; sop rel err {sop_err:.1e}; style-loss decoder grad norm {decoder_norm:.3e}"),
    )
}

// ---------------------------------------------------------------- 4

fn doc(text: &str, style: usize) -> Story {
    let sentences: Vec<Vec<String>> = text
        .split(" . ")
        .map(|s| s.split_whitespace().map(String::from).chain([".".to_string()]).collect())
        .collect();
    Story::from_sentences(sentences, StyleId(style)).unwrap()
}

fn keyword_pipeline() -> Outcome {
    let corpus: BTreeMap<StyleId, Vec<Story>> = [
        (
            StyleId(0),
            vec![
                doc("Anna walked to London . Anna smiled", 0),
                doc("Oakvale was quiet . the baker sang in London", 0),
                doc("Anna left Oakvale . she was glad", 0),
            ],
        ),
        (
            StyleId(1),
            vec![
                doc("Guo drew his blade in London . Guo leapt", 1),
                doc("Xiangyang burned . the monk fled London", 1),
                doc("Guo rode to Xiangyang . the wind howled", 1),
            ],
        ),
    ]
    .into_iter()
    .collect();
    let cfg = KeywordConfig {
        threshold: 0.5,
        ..KeywordConfig::default()
    };
    let dicts = build_dictionary(&corpus, &cfg, &CapitalizationTagger).unwrap();
    let words = |s: usize| dicts[&StyleId(s)].words.iter().cloned().collect::<Vec<_>>();
    let planted = words(0) == ["Anna", "Oakvale"] && words(1) == ["Guo", "Xiangyang"];

    let pool = ["Ada", "Bo", "cat", "dog", "Eve", "run", "Fox", "sat", "the", "Gil"];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = 0;
    for _ in 0..1000 {
        let sentences: Vec<Vec<String>> = (0..rng.random_range(1..6))
            .map(|_| (0..rng.random_range(1..8)).map(|_| pool[rng.random_range(0..pool.len())].to_string()).collect())
            .collect();
        let story = Story::from_sentences(sentences, StyleId(0)).unwrap();
        let dict = KeywordDictionary {
            style: StyleId(0),
            words: pool.iter().filter(|_| rng.random_bool(0.3)).map(|w| w.to_string()).collect(),
        };
        let m = extract_and_mask(&story, &dict);
        let exact = m.unmask(MASK) == story.tokens
            && m.mask_count(MASK) == m.keywords.len()
            && m.masked.sentence_count() == story.sentence_count();
        failures += usize::from(!exact);
    }
    outcome(
        planted && failures == 0,
        format!("dictionaries {:?} / {:?}; {failures} of 1000 masking round trips inexact", words(0), words(1)),
    )
}

// ---------------------------------------------------------------- 5 to 9

fn toy_config(overrides: &[(&str, &str)]) -> RunConfig {
    let mut cfg = RunConfig::profile("toy").unwrap();
    for (k, v) in overrides {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn train(stories: &[Story], cfg: &RunConfig) -> TrainedSystem {
    train_system(stories, &restyle::synthetic::styles(), cfg, default_tagger(), &RunPaths::default()).unwrap()
}

fn score(system: &TrainedSystem, probe: &[Story]) -> TransferScores {
    score_transfer(system, probe).unwrap().0
}

/// Mean distance of each style's centroid of sample-mean discourse vectors
/// from the centroid of all samples.
fn centroid_spread(model: &TransferModel, probe: &[Story]) -> f64 {
    let inputs: Vec<MarkedIds> = probe
        .iter()
        .map(|s| MarkedIds::from_marked(&insert_sentence_markers(s), model.vocab()))
        .collect();
    let mut means: Vec<Vec<f64>> = Vec::new();
    for chunk in inputs.chunks(32) {
        let m = model.encode(chunk).unwrap().mean_reps().unwrap();
        means.extend(m.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap());
    }
    let centroid = |rows: Vec<&Vec<f64>>| {
        let mut c = vec![0.0; rows[0].len()];
        for r in &rows {
            for (a, b) in c.iter_mut().zip(r.iter()) {
                *a += b / rows.len() as f64;
            }
        }
        c
    };
    let all = centroid(means.iter().collect());
    let styles: Vec<StyleId> = probe.iter().map(|s| s.style).collect();
    let mut ids = styles.clone();
    ids.sort();
    ids.dedup();
    let dists: Vec<f64> = ids
        .iter()
        .map(|id| {
            let c = centroid(means.iter().zip(&styles).filter(|(_, s)| *s == id).map(|(m, _)| m).collect());
            c.iter().zip(&all).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    dists.iter().sum::<f64>() / dists.len() as f64
}

// ---------------------------------------------------------------- 10

fn determinism_and_round_trips() -> Outcome {
    let fx = common::fixture(4);
    let mut clf = fx.classifier(DType::F32);
    let opts = TrainOptions {
        steps: 4,
        batch_size: 4,
        learning_rate: 1e-2,
        ..Default::default()
    };
    train_classifier(&mut clf, &classifier_examples(&fx.stories, None), &[], &opts).unwrap();
    let frozen = clf.params().deep_clone().unwrap();
    let data = prepare_stage1(&fx.stories, None, &fx.vocab);
    let s1 = Stage1Options {
        train: TrainOptions {
            steps: 4,
            batch_size: 3,
            ..Default::default()
        },
        weights: Stage1Config::default(),
        style_warmup: 0,
        temperature: 1.0,
        style_target: restyle::config::StyleTarget::Other,
    };
    let run = || {
        let mut m = fx.transfer(DType::F32);
        let s = train_stage1(&mut m, &clf, &data, &[], &s1).unwrap();
        (m, s.losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    let deterministic = la == lb && a.params().same_values(b.params()).unwrap();
    let classifier_frozen = clf.params().same_values(&frozen).unwrap();

    let bytes = a.to_checkpoint().unwrap().to_bytes().unwrap();
    let back = TransferModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let forward = |m: &TransferModel| {
        m.generate(
            &[MarkedIds::from_marked(&insert_sentence_markers(&fx.stories[0]), m.vocab())],
            &[StyleId(1)],
            &[20],
        )
        .unwrap()
    };
    let logits = |m: &TransferModel| {
        let inputs = [MarkedIds::from_marked(&insert_sentence_markers(&fx.stories[1]), m.vocab())];
        let fused = m.fuse(&[StyleId(0)], &m.encode(&inputs).unwrap()).unwrap();
        m.decode(&fused, &[&[1, 9, 12]]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
    };
    let round_trip = forward(&a) == forward(&back) && logits(&a) == logits(&back);

    let (_, stories) = generate(&SyntheticConfig {
        per_style: 100,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let reorder_ok = stories.iter().enumerate().all(|(i, s)| {
        let rec = shuffle_sentences(s, i as u64);
        reorder(&rec.shuffled, &rec.gold_order).unwrap() == *s
    });
    outcome(
        deterministic && classifier_frozen && round_trip && reorder_ok,
        format!(
            "training repeatable {deterministic}; checkpoint forward equal {round_trip}; shuffle/reorder identity {reorder_ok}; frozen classifier unchanged {classifier_frozen}"
        ),
    )
}

fn main() -> ExitCode {
    let mut passed = Vec::new();
    passed.push(gate(1, "published overall scores recompute", 1.0, overall_arithmetic));
    passed.push(gate(2, "loss unit oracles", 1.0, loss_units));
    passed.push(gate(3, "gradient checks", 30.0, gradient_checks));
    passed.push(gate(4, "keyword pipeline", 10.0, keyword_pipeline));

    let (_, train_set) = generate(&SyntheticConfig::default()).unwrap();
    let (_, held_out) = generate(&SyntheticConfig {
        per_style: 50,
        seed: 1007,
        ..Default::default()
    })
    .unwrap();
    let held_in = &train_set[..200];

    let full = train(&train_set, &toy_config(&[]));
    let t = full.timings;
    println!(
        "  full toy run: classifier {:.0}s (held-out accuracy {:.3}), stage one {:.0}s, stage two {:.0}s",
        t.classifier, full.classifier_accuracy, t.stage1, t.stage2
    );

    passed.push(gate(5, "sentence-order prediction", 15.0 * 60.0, || {
        let acc = pointer_accuracy(&full.stage1, &held_out, Some(&full.dicts), 99).unwrap();
        let secs = t.classifier + t.stage1;
        outcome(
            acc >= 0.9 && secs < 15.0 * 60.0,
            format!("pointer exact-position accuracy {acc:.3} on held-out shuffles (need 0.900); training {secs:.0}s"),
        )
    }));

    passed.push(gate(6, "disentanglement shrinks style spread", 30.0 * 60.0, || {
        let short = [("steps", "300"), ("skip_stage2", "true")];
        let with = train(&train_set, &toy_config(&[short[0], short[1], ("lambda1", "1")]));
        let without = train(&train_set, &toy_config(&[short[0], short[1], ("lambda1", "0")]));
        let (a, b) = (centroid_spread(&with.stage1, &held_out), centroid_spread(&without.stage1, &held_out));
        let shrink = 1.0 - a / b;
        outcome(
            shrink >= 0.5,
            format!("centroid spread {a:.4} with lambda1=1 vs {b:.4} with lambda1=0: {:.1}% smaller (need 50%)", 100.0 * shrink),
        )
    }));

    passed.push(gate(7, "reconstruction and fill", 30.0 * 60.0, || {
        let rec = reconstruction_accuracy(&full, held_in).unwrap();
        let fill = fill_accuracy(full.stage2.as_ref().unwrap(), &full.dicts, held_in).unwrap();
        outcome(
            rec >= 0.9 && fill >= 0.95 && t.total() < 30.0 * 60.0,
            format!("stage-one self-transfer token accuracy {rec:.3} (need 0.900); stage-two fill accuracy {fill:.3} (need 0.950); training {:.0}s", t.total()),
        )
    }));

    let full_scores = score(&full, &held_out);
    passed.push(gate(8, "end-to-end transfer trade-off", 45.0 * 60.0, || {
        let s = full_scores;
        outcome(
            s.a_acc >= 70.0 && s.bleu1 >= 30.0 && s.keyword_survival >= 0.9 && t.total() < 45.0 * 60.0,
            format!(
                "a-Acc {:.1} (need 70), BLEU-1 {:.1} (need 30), keyword survival {:.3} (need 0.900) over {} transfers; training {:.0}s",
                s.a_acc, s.bleu1, s.keyword_survival, s.count, t.total()
            ),
        )
    }));

    passed.push(gate(9, "ablation directions", 60.0 * 60.0, || {
        let no_style = score(&train(&train_set, &toy_config(&[("lambda3", "0")])), &held_out);
        let no_fill = score(&train(&train_set, &toy_config(&[("skip_stage2", "true")])), &held_out);
        outcome(
            no_style.a_acc < full_scores.a_acc && no_fill.bleu1 < full_scores.bleu1,
            format!(
                "a-Acc {:.1} without style loss vs {:.1} full; BLEU-1 {:.1} without stage two vs {:.1} full",
                no_style.a_acc, full_scores.a_acc, no_fill.bleu1, full_scores.bleu1
            ),
        )
    }));

    passed.push(gate(10, "determinism and round trips", 10.0 * 60.0, determinism_and_round_trips));

    let n = passed.iter().filter(|p| **p).count();
    println!("acceptance: {n}/{} criteria passed", passed.len());
    if n == passed.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
