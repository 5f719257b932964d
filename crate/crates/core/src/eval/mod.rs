//! Automatic evaluation: transfer accuracy, content preservation, overall
//! scores and surface-feature analysis.

mod features;
mod metrics;

pub use features::{
    points_to_csv, project_2d, project_2d_with, standardize, style_features, style_features_with,
    PcaProjector, ProjectedPoint, Projector, StyleFeatureVector,
};
pub use metrics::{
    a_acc, bl_overall, bleu_n, bs_overall, corpus_bleu, greedy_match, overall, r_acc,
    semantic_sim, sentence_averaged_bleu, SemanticScore, StyleScorer, TokenEmbedder, BLEU_EPSILON,
};

use serde::{Deserialize, Serialize};

use crate::corpus::StyleId;
use crate::error::{Error, Result};

/// One row of automatic results; every field is a percentage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_acc: f64,
    pub a_acc: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub sem_p: f64,
    pub sem_r: f64,
    pub sem_f1: f64,
    pub bl_overall: f64,
    pub bs_overall: f64,
}

impl EvalReport {
    /// Fills in both overall scores from the component metrics.
    pub fn from_components(
        r_acc: f64,
        a_acc: f64,
        bleu1: f64,
        bleu2: f64,
        sem: SemanticScore,
    ) -> Self {
        Self {
            r_acc,
            a_acc,
            bleu1,
            bleu2,
            sem_p: sem.precision,
            sem_r: sem.recall,
            sem_f1: sem.f1,
            bl_overall: bl_overall(a_acc, bleu1, bleu2),
            bs_overall: bs_overall(a_acc, sem.f1),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BleuMode {
    #[default]
    Corpus,
    SentenceAveraged,
}

/// Scores aligned `outputs` against their `inputs` for transfer to `target`.
pub fn evaluate(
    outputs: &[Vec<String>],
    inputs: &[Vec<String>],
    target: StyleId,
    clf: &dyn StyleScorer,
    embedder: &dyn TokenEmbedder,
    bleu_mode: BleuMode,
) -> Result<EvalReport> {
    if outputs.len() != inputs.len() {
        return Err(Error::LengthMismatch(format!(
            "{} outputs vs {} inputs",
            outputs.len(),
            inputs.len()
        )));
    }
    let r = r_acc(outputs, inputs, target, clf)?;
    let a = a_acc(outputs, target, clf)?;
    let bleu = |n| match bleu_mode {
        BleuMode::Corpus => corpus_bleu(outputs, inputs, n),
        BleuMode::SentenceAveraged => sentence_averaged_bleu(outputs, inputs, n),
    };
    let (b1, b2) = (bleu(1)?, bleu(2)?);
    let mut sem = SemanticScore::default();
    for (o, i) in outputs.iter().zip(inputs) {
        let s = semantic_sim(o, i, embedder)?;
        sem.precision += s.precision;
        sem.recall += s.recall;
        sem.f1 += s.f1;
    }
    let n = outputs.len() as f64;
    sem.precision /= n;
    sem.recall /= n;
    sem.f1 /= n;
    Ok(EvalReport::from_components(r, a, b1, b2, sem))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ByFirstToken;
    impl StyleScorer for ByFirstToken {
        fn style_probs(&self, tokens: &[String]) -> Result<Vec<f64>> {
            Ok(if tokens[0] == "lo" { vec![0.1, 0.9] } else { vec![0.8, 0.2] })
        }
    }

    struct OneHot;
    impl TokenEmbedder for OneHot {
        fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f32>>> {
            Ok(tokens
                .iter()
                .map(|t| {
                    let mut v = vec![0.0; 26];
                    v[(t.as_bytes()[0] - b'a') as usize % 26] = 1.0;
                    v
                })
                .collect())
        }
    }

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn copying_the_input_gives_perfect_bleu_and_zero_r_acc() {
        let xs = vec![t("the fox ran home"), t("a cat sat down")];
        let rep = evaluate(&xs, &xs, StyleId(1), &ByFirstToken, &OneHot, BleuMode::Corpus).unwrap();
        assert_eq!(rep.bleu1, 100.0);
        assert_eq!(rep.r_acc, 0.0);
        assert_eq!(rep.a_acc, 0.0);
        assert!((rep.sem_f1 - 100.0).abs() < 1e-9);
    }

    #[test]
    fn report_overalls_match_their_components() {
        let outs = vec![t("lo the fox ran"), t("a cat sat down")];
        let ins = vec![t("the fox ran home"), t("a dog sat down")];
        let rep = evaluate(&outs, &ins, StyleId(1), &ByFirstToken, &OneHot, BleuMode::Corpus).unwrap();
        assert_eq!(rep.a_acc, 50.0);
        assert_eq!(rep.r_acc, 50.0);
        assert!((rep.bl_overall - bl_overall(rep.a_acc, rep.bleu1, rep.bleu2)).abs() < 1e-12);
        assert!((rep.bs_overall - bs_overall(rep.a_acc, rep.sem_f1)).abs() < 1e-12);
        for v in [rep.r_acc, rep.a_acc, rep.bleu1, rep.bleu2, rep.sem_p, rep.sem_r, rep.sem_f1] {
            assert!((0.0..=100.0).contains(&v));
        }
        let json = rep.to_json().unwrap();
        assert!(json.contains("bs_overall"));
        assert!(evaluate(&outs, &ins[..1], StyleId(1), &ByFirstToken, &OneHot, BleuMode::Corpus)
            .is_err());
    }

    #[test]
    fn printed_component_row_reproduces_overalls() {
        let rep = EvalReport::from_components(
            84.49,
            62.96,
            30.71,
            14.5,
            SemanticScore { precision: 68.76, recall: 71.69, f1: 70.16 },
        );
        assert!((rep.bl_overall - 37.72).abs() <= 0.02);
        assert!((rep.bs_overall - 66.46).abs() <= 0.02);
    }
}
