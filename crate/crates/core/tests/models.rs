mod common;

use candle_core::{DType, Device, Tensor};
use common::{fixture, scalar};
use restyle::corpus::{insert_sentence_markers, Story, StyleId};
use restyle::nn::{bilinear_pointer_probs, Checkpoint, FillModel, MarkedIds, StyleClassifier, TransferModel};
use restyle::objectives::loss_style;
use restyle::trainer::{classifier_examples, train_classifier, TrainOptions};

fn marked(model: &TransferModel, stories: &[Story]) -> Vec<MarkedIds> {
    stories
        .iter()
        .map(|s| MarkedIds::from_marked(&insert_sentence_markers(s), model.vocab()))
        .collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

#[test]
fn encode_and_fuse_shapes() {
    let fx = fixture(2);
    let model = fx.transfer(DType::F32);
    let short = Story::from_sentences(vec![vec!["Tom".into(), "ran".into(), ".".into()]], StyleId(0)).unwrap();
    let inputs = marked(&model, &[fx.stories[0].clone(), short]);
    let bundle = model.encode(&inputs).unwrap();
    assert_eq!(bundle.counts, vec![4, 1]);
    assert_eq!(bundle.reps.dims(), &[2, 4, 16]);
    let fused = model.fuse(&[StyleId(0), StyleId(1)], &bundle).unwrap();
    assert_eq!(fused.fused.dims(), &[2, 5, 16]);
    assert_eq!(fused.sample(0).unwrap().len(), 5);
    assert_eq!(fused.sample(1).unwrap().len(), 2);
    assert!(model.fuse(&[StyleId(0), StyleId(9)], &bundle).is_err());
    assert!(model.fuse(&[StyleId(0)], &bundle).is_err());
}

#[test]
fn swapping_the_style_changes_every_fused_slot() {
    let fx = fixture(2);
    let model = fx.transfer(DType::F64);
    let bundle = model.encode(&marked(&model, &fx.stories[..1])).unwrap();
    let a = model.fuse(&[StyleId(0)], &bundle).unwrap().sample(0).unwrap();
    let b = model.fuse(&[StyleId(1)], &bundle).unwrap().sample(0).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let diff: f32 = x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 1e-4, "slot unchanged by style swap");
    }
}

#[test]
fn pointer_hand_example() {
    let dev = Device::Cpu;
    let z = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &dev).unwrap();
    let w = Tensor::eye(2, DType::F64, &dev).unwrap();
    let p = rows(&bilinear_pointer_probs(&z, &w).unwrap());
    assert!((p[0][0] - 0.731_058_578_6).abs() < 1e-9);
    assert!((p[0][1] - 0.268_941_421_4).abs() < 1e-9);

    let one = Tensor::new(&[[0.3f64, -2.0]], &dev).unwrap();
    assert_eq!(rows(&bilinear_pointer_probs(&one, &w).unwrap()), vec![vec![1.0]]);

    let same = Tensor::new(&[[0.5f64, 0.1], [0.5, 0.1], [0.5, 0.1]], &dev).unwrap();
    for row in rows(&bilinear_pointer_probs(&same, &w).unwrap()) {
        for v in row {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}

#[test]
fn pointer_rows_are_distributions_over_each_samples_sentences() {
    let fx = fixture(2);
    let model = fx.transfer(DType::F64);
    let two = Story::from_sentences(
        vec![vec!["a".into(), ".".into()], vec!["b".into(), ".".into()]],
        StyleId(1),
    )
    .unwrap();
    let bundle = model.encode(&marked(&model, &[fx.stories[0].clone(), two])).unwrap();
    let fused = model.fuse(&[StyleId(0), StyleId(1)], &bundle).unwrap();
    let probs = model.pointer_predict(&fused).unwrap();
    assert_eq!(probs[0].len(), 4);
    assert_eq!(probs[1].len(), 2);
    for sample in &probs {
        for row in sample {
            assert_eq!(row.len(), sample.len());
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn decoder_is_causal_for_every_cut_up_to_eight_tokens() {
    let fx = fixture(2);
    let model = fx.transfer(DType::F64);
    let bundle = model.encode(&marked(&model, &fx.stories[..1])).unwrap();
    let fused = model.fuse(&[StyleId(1)], &bundle).unwrap();
    let base: Vec<u32> = (0..8).map(|i| 10 + i).collect();
    let full = model.decode(&fused, &[&base]).unwrap().get(0).unwrap();
    for cut in 1..8 {
        let mut changed = base.clone();
        for t in changed.iter_mut().skip(cut) {
            *t += 20;
        }
        let other = model.decode(&fused, &[&changed]).unwrap().get(0).unwrap();
        let a = rows(&full.narrow(0, 0, cut).unwrap());
        let b = rows(&other.narrow(0, 0, cut).unwrap());
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-12, "future tokens leaked at cut {cut}");
        }
    }
}

#[test]
fn cold_soft_rollout_follows_greedy_decoding() {
    let fx = fixture(2);
    let model = fx.transfer(DType::F64);
    let bundle = model.encode(&marked(&model, &fx.stories[..2])).unwrap();
    let fused = model.fuse(&[StyleId(1), StyleId(0)], &bundle).unwrap();
    let greedy = model.greedy(&fused, &[12, 12]).unwrap();
    let soft = model.soft_decode(&fused, 12, 1e-4).unwrap();
    for (b, seq) in greedy.iter().enumerate() {
        let probs = rows(&soft.get(b).unwrap());
        for (t, &id) in seq.iter().enumerate() {
            let best = (0..probs[t].len()).fold(0, |k, j| if probs[t][j] > probs[t][k] { j } else { k });
            assert_eq!(best as u32, id, "sample {b} step {t}");
        }
    }
}

#[test]
fn decoding_never_emits_control_tokens() {
    let fx = fixture(2);
    let model = fx.transfer(DType::F32);
    let out = model
        .generate(&marked(&model, &fx.stories[..4]), &[StyleId(1); 4], &[30; 4])
        .unwrap();
    let v = model.vocab();
    let banned = [v.pad(), v.bos(), v.marker(), v.key_separator(), v.id("⟨unk⟩")];
    for seq in out {
        assert!(seq.len() <= 30);
        assert!(seq.iter().all(|id| !banned.contains(id)));
    }
}

#[test]
fn untrained_classifier_is_uniform() {
    let fx = fixture(2);
    let clf = fx.classifier(DType::F64);
    let p = clf.classify_style(&fx.stories[0].tokens).unwrap();
    assert_eq!(p, vec![0.5, 0.5]);
}

fn trained_classifier(fx: &common::Fixture, dtype: DType) -> StyleClassifier {
    let mut clf = fx.classifier(dtype);
    let data = classifier_examples(&fx.stories, None);
    let opts = TrainOptions {
        steps: 5,
        batch_size: 4,
        learning_rate: 1e-2,
        ..Default::default()
    };
    train_classifier(&mut clf, &data, &[], &opts).unwrap();
    assert!(clf.is_frozen());
    clf
}

#[test]
fn style_loss_reaches_decoder_and_style_embedding_through_soft_rollout() {
    let fx = fixture(4);
    let model = fx.transfer(DType::F64);
    let clf = trained_classifier(&fx, DType::F64);
    let bundle = model.encode(&marked(&model, &fx.stories[..2])).unwrap();
    let fused = model.fuse(&[StyleId(1), StyleId(0)], &bundle).unwrap();
    let probs = model.soft_decode(&fused, 10, 1.0).unwrap();
    let loss = loss_style(&clf.logits_soft(&probs, &[10, 10]).unwrap(), &[1, 0]).unwrap();
    let grads = loss.backward().unwrap();
    for name in ["dec.0.ff.up.w", "dec.out.w", "style_emb", "tok_emb"] {
        let var = model.params().var(name).unwrap();
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(scalar(&g.abs().unwrap().sum_all().unwrap()) > 0.0, "{name}");
    }
    for (name, var) in clf.params().vars() {
        assert!(grads.get(var.as_tensor()).is_none(), "frozen classifier parameter {name} got a gradient");
    }
}

#[test]
fn soft_classifier_input_matches_hard_input_for_one_hot_rows() {
    let fx = fixture(4);
    let clf = trained_classifier(&fx, DType::F64);
    let ids = clf.vocab().encode(&fx.stories[1].tokens);
    let hard = rows(&clf.logits(&[&ids]).unwrap());
    let v = clf.vocab().len();
    let mut onehot = vec![0.0f64; ids.len() * v];
    for (t, &id) in ids.iter().enumerate() {
        onehot[t * v + id as usize] = 1.0;
    }
    let probs = Tensor::from_vec(onehot, (1, ids.len(), v), &Device::Cpu).unwrap();
    let soft = rows(&clf.logits_soft(&probs, &[ids.len()]).unwrap());
    for (a, b) in hard[0].iter().zip(&soft[0]) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn checkpoints_reproduce_forward_outputs_exactly() {
    let fx = fixture(2);
    let model = fx.transfer(DType::F32);
    let inputs = marked(&model, &fx.stories[..2]);
    let logits = |m: &TransferModel| {
        let fused = m.fuse(&[StyleId(1), StyleId(0)], &m.encode(&inputs).unwrap()).unwrap();
        let prefix: Vec<u32> = vec![1, 9, 10];
        m.decode(&fused, &[&prefix, &prefix])
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
    };
    let restored = TransferModel::from_checkpoint(&Checkpoint::from_bytes(&model.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(logits(&model), logits(&restored));
    assert_eq!(model.style_embeddings().unwrap(), restored.style_embeddings().unwrap());

    let clf = trained_classifier(&fx, DType::F32);
    let back = StyleClassifier::from_checkpoint(&clf.to_checkpoint().unwrap()).unwrap();
    assert!(back.is_frozen());
    let ids = clf.vocab().encode(&fx.stories[0].tokens);
    assert_eq!(rows(&clf.logits(&[&ids]).unwrap()), rows(&back.logits(&[&ids]).unwrap()));

    let filler = fx.filler(DType::F32);
    let back = FillModel::from_checkpoint(&filler.to_checkpoint().unwrap()).unwrap();
    let enc_a = filler.encode(&[&ids]).unwrap();
    let enc_b = back.encode(&[&ids]).unwrap();
    let pa = filler.decode(&enc_a, &[&ids[..5]]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let pb = back.decode(&enc_b, &[&ids[..5]]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn checkpoint_kinds_are_checked() {
    let fx = fixture(2);
    let ckpt = fx.filler(DType::F32).to_checkpoint().unwrap();
    assert!(TransferModel::from_checkpoint(&ckpt).is_err());
    assert!(StyleClassifier::from_checkpoint(&ckpt).is_err());
}

fn block_params(d: usize, ff: usize) -> usize {
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let ffn = d * ff + ff + ff * d + d;
    2 * ln + attn + ffn
}

#[test]
fn parameter_counts_follow_the_architecture() {
    let fx = fixture(2);
    let c = fx.cfg;
    let (d, v, f) = (c.d_model, c.vocab_size, c.ff_dim);
    let stack = |layers: usize| layers * block_params(d, f) + 2 * d;
    let dec_block = block_params(d, f) + 2 * d + 4 * (d * d + d);
    let decoder = c.decoder_layers * dec_block + 2 * d + d * v + v;
    let embeddings = v * d + c.max_len * d;

    let transfer = embeddings
        + c.num_styles * d
        + c.max_sentences * d
        + d * d
        + stack(c.encoder_layers)
        + stack(c.fusion_layers)
        + stack(c.pointer_layers)
        + decoder;
    assert_eq!(fx.transfer(DType::F32).params().num_params(), transfer);

    let classifier = embeddings + stack(c.encoder_layers) + d * c.num_styles + c.num_styles;
    assert_eq!(fx.classifier(DType::F32).params().num_params(), classifier);

    let filler = embeddings + stack(c.encoder_layers) + decoder;
    assert_eq!(fx.filler(DType::F32).params().num_params(), filler);
}

#[test]
fn same_seed_same_initialization() {
    let fx = fixture(2);
    let a = fx.transfer(DType::F32);
    let b = fx.transfer(DType::F32);
    assert!(a.params().same_values(b.params()).unwrap());
    let c = TransferModel::new(fx.cfg, fx.vocab.clone(), fx.styles.clone(), 99).unwrap();
    assert!(!a.params().same_values(c.params()).unwrap());
}

#[test]
fn soft_decode_rows_are_distributions() {
    let fx = fixture(2);
    let model = fx.transfer(DType::F64);
    let fused = model
        .fuse(&[StyleId(0)], &model.encode(&marked(&model, &fx.stories[..1])).unwrap())
        .unwrap();
    let p = model.soft_decode(&fused, 6, 0.7).unwrap();
    assert_eq!(p.dims(), &[1, 6, fx.vocab.len()]);
    for row in rows(&p.get(0).unwrap()) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(row[fx.vocab.marker() as usize], 0.0);
    }
    assert!(model.soft_decode(&fused, 0, 1.0).is_err());
    assert!(model.soft_decode(&fused, 3, 0.0).is_err());
}
