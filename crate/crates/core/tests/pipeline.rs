mod common;

use std::collections::BTreeMap;

use candle_core::DType;
use common::fixture;
use restyle::corpus::{group_by_style, StyleId};
use restyle::error::Error;
use restyle::keywords::{build_dictionary, CapitalizationTagger, KeywordConfig};
use restyle::pipeline::{records_to_jsonl, Pipeline, TransferRecord};
use restyle::vocab::{MASK, SENTENCE_MARKER};

#[test]
fn batch_transfer_keeps_order_and_strips_control_tokens() {
    let fx = fixture(3);
    let dicts = build_dictionary(&group_by_style(&fx.stories, &fx.styles), &KeywordConfig::default(), &CapitalizationTagger).unwrap();
    let stage1 = fx.transfer(DType::F32);
    let stage2 = fx.filler(DType::F32);
    let pipe = Pipeline::new(&stage1, Some(&stage2), &dicts);
    let sources = &fx.stories[..3];
    let targets = [StyleId(1), StyleId(0), StyleId(1)];
    let out = pipe.transfer_batch(sources, &targets).unwrap();
    assert_eq!(out.len(), 3);
    for ((r, s), t) in out.iter().zip(sources).zip(targets) {
        assert_eq!(r.source_style, s.style);
        assert_eq!(r.target_style, t);
        assert!(r.final_text.iter().all(|w| w != MASK && w != SENTENCE_MARKER));
        assert!(r.stage1_text.iter().all(|w| w != SENTENCE_MARKER));
        assert_eq!(r, &pipe.transfer(s, t).unwrap());
    }
    assert_eq!(out, pipe.transfer_batch(sources, &targets).unwrap());

    let records: Vec<TransferRecord> = out
        .iter()
        .map(|r| TransferRecord::new("a story .", r, &fx.styles).unwrap())
        .collect();
    let jsonl = records_to_jsonl(&records).unwrap();
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["source", "style", "target_style", "stage1", "output", "keywords"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}

#[test]
fn extracted_keywords_do_not_depend_on_the_target() {
    let fx = fixture(3);
    let dicts = build_dictionary(&group_by_style(&fx.stories, &fx.styles), &KeywordConfig::default(), &CapitalizationTagger).unwrap();
    let stage1 = fx.transfer(DType::F32);
    let stage2 = fx.filler(DType::F32);
    let pipe = Pipeline::new(&stage1, Some(&stage2), &dicts);
    let s = &fx.stories[0];
    let a = pipe.transfer(s, StyleId(0)).unwrap();
    let b = pipe.transfer(s, StyleId(1)).unwrap();
    assert_eq!(a.keywords_used, b.keywords_used);
}

#[test]
fn without_a_filler_stage_one_output_is_final() {
    let fx = fixture(2);
    let stage1 = fx.transfer(DType::F32);
    let dicts = BTreeMap::new();
    let pipe = Pipeline::new(&stage1, None, &dicts);
    let r = pipe.transfer(&fx.stories[0], StyleId(1)).unwrap();
    assert_eq!(r.stage1_text, r.final_text);
    assert!(r.keywords_used.is_empty());
}

#[test]
fn unknown_target_styles_are_rejected() {
    let fx = fixture(2);
    let stage1 = fx.transfer(DType::F32);
    let dicts = BTreeMap::new();
    let pipe = Pipeline::new(&stage1, None, &dicts);
    assert!(matches!(pipe.transfer(&fx.stories[0], StyleId(7)), Err(Error::StyleOutOfRange(7))));
    assert!(matches!(
        pipe.transfer_batch(&fx.stories[..2], &[StyleId(0)]),
        Err(Error::LengthMismatch(_))
    ));
}
