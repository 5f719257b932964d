//! Surface stylistic features and their 2-D projection.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{segment_sentences, LanguageRules, SimpleTokenizer, Tokenizer};

/// Seven surface counts describing a paragraph.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StyleFeatureVector {
    pub commas: u32,
    pub colons: u32,
    pub sentence_count: u32,
    pub question_marks: u32,
    pub left_quotes: u32,
    pub right_quotes: u32,
    pub avg_words_per_sentence: f64,
}

impl StyleFeatureVector {
    pub const DIM: usize = 7;

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.commas as f64,
            self.colons as f64,
            self.sentence_count as f64,
            self.question_marks as f64,
            self.left_quotes as f64,
            self.right_quotes as f64,
            self.avg_words_per_sentence,
        ]
    }
}

pub fn style_features(text: &str) -> StyleFeatureVector {
    style_features_with(text, &LanguageRules::default())
}

/// Straight double quotes alternate open/close in reading order.
pub fn style_features_with(text: &str, rules: &LanguageRules) -> StyleFeatureVector {
    let mut f = StyleFeatureVector::default();
    let mut straight_open = false;
    for c in text.chars() {
        match c {
            ',' | '，' | '、' => f.commas += 1,
            ':' | '：' => f.colons += 1,
            '?' | '？' => f.question_marks += 1,
            '“' | '「' | '『' => f.left_quotes += 1,
            '”' | '」' | '』' => f.right_quotes += 1,
            '"' => {
                if straight_open {
                    f.right_quotes += 1;
                } else {
                    f.left_quotes += 1;
                }
                straight_open = !straight_open;
            }
            _ => {}
        }
    }
    let sentences = segment_sentences(text, rules);
    f.sentence_count = sentences.len() as u32;
    let words: usize = sentences
        .iter()
        .map(|s| {
            SimpleTokenizer
                .tokenize(s)
                .iter()
                .filter(|t| t.chars().any(char::is_alphanumeric))
                .count()
        })
        .sum();
    f.avg_words_per_sentence = if sentences.is_empty() {
        0.0
    } else {
        words as f64 / sentences.len() as f64
    };
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub group: String,
}

/// Maps standardized feature rows to 2-D.
pub trait Projector {
    fn project(&self, standardized: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

/// Projection onto the top two principal components; each component's sign
/// is fixed so that its largest-magnitude loading is positive.
#[derive(Debug, Clone, Copy, Default)]
pub struct PcaProjector;

impl Projector for PcaProjector {
    fn project(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = x.nrows();
        let cov = (x.transpose() * x) / ((n.max(2) - 1) as f64);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let mut basis = DMatrix::zeros(x.ncols(), 2);
        for (k, &idx) in order.iter().take(2).enumerate() {
            let mut v = eig.eigenvectors.column(idx).clone_owned();
            let (imax, _) = v
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |acc, (i, &val)| if val.abs() > acc.1 + 1e-12 { (i, val.abs()) } else { acc });
            if v[imax] < 0.0 {
                v = -v;
            }
            if eig.eigenvalues[idx] <= 1e-12 {
                v.fill(0.0);
            }
            basis.set_column(k, &v);
        }
        Ok(x * basis)
    }
}

/// Z-scores every feature column; zero-variance columns become zero.
pub fn standardize(vectors: &[StyleFeatureVector]) -> DMatrix<f64> {
    let n = vectors.len();
    let mut m = DMatrix::from_fn(n, StyleFeatureVector::DIM, |i, j| vectors[i].to_array()[j]);
    for j in 0..StyleFeatureVector::DIM {
        let col = m.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            m[(i, j)] = if sd > 1e-12 { (m[(i, j)] - mean) / sd } else { 0.0 };
        }
    }
    m
}

/// Standardizes the features and projects them with `projector`. Identical
/// inputs all land on the origin.
pub fn project_2d_with(
    vectors: &[StyleFeatureVector],
    groups: &[String],
    projector: &dyn Projector,
) -> Result<Vec<ProjectedPoint>> {
    if vectors.len() < 2 {
        return Err(Error::Empty("projection needs at least two vectors".into()));
    }
    if groups.len() != vectors.len() {
        return Err(Error::LengthMismatch(format!(
            "{} vectors vs {} group labels",
            vectors.len(),
            groups.len()
        )));
    }
    let coords = projector.project(&standardize(vectors))?;
    Ok((0..vectors.len())
        .map(|i| ProjectedPoint {
            x: coords[(i, 0)],
            y: coords[(i, 1)],
            group: groups[i].clone(),
        })
        .collect())
}

pub fn project_2d(vectors: &[StyleFeatureVector], groups: &[String]) -> Result<Vec<ProjectedPoint>> {
    project_2d_with(vectors, groups, &PcaProjector)
}

/// CSV with header `x,y,group`.
pub fn points_to_csv(points: &[ProjectedPoint]) -> String {
    let mut out = String::from("x,y,group\n");
    for p in points {
        let group = if p.group.contains([',', '"', '\n']) {
            format!("\"{}\"", p.group.replace('"', "\"\""))
        } else {
            p.group.clone()
        };
        out.push_str(&format!("{},{},{}\n", p.x, p.y, group));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_all_zero() {
        assert_eq!(style_features(""), StyleFeatureVector::default());
    }

    #[test]
    fn counts_hand_example() {
        let f = style_features("Hi, there. Are you ok?");
        assert_eq!(f.commas, 1);
        assert_eq!(f.colons, 0);
        assert_eq!(f.sentence_count, 2);
        assert_eq!(f.question_marks, 1);
        assert_eq!((f.left_quotes, f.right_quotes), (0, 0));
        assert!((f.avg_words_per_sentence - 2.5).abs() < 1e-12);
    }

    #[test]
    fn counts_quotes_and_colons() {
        let f = style_features("She said: \u{201c}go.\u{201d}");
        assert_eq!(f.colons, 1);
        assert_eq!(f.left_quotes, 1);
        assert_eq!(f.right_quotes, 1);
        assert_eq!(f.sentence_count, 1);
        let g = style_features("\"a\" and \"b\".");
        assert_eq!((g.left_quotes, g.right_quotes), (2, 2));
    }

    fn feat(commas: u32, q: u32, avg: f64) -> StyleFeatureVector {
        StyleFeatureVector {
            commas,
            question_marks: q,
            sentence_count: 4,
            avg_words_per_sentence: avg,
            ..Default::default()
        }
    }

    #[test]
    fn separated_clusters_stay_separated() {
        let mut vs = Vec::new();
        let mut groups = Vec::new();
        for i in 0..6 {
            vs.push(feat(i % 2, 0, 5.0 + (i % 3) as f64 * 0.2));
            groups.push("plain".to_string());
            vs.push(feat(10 + i % 2, 4, 12.0 + (i % 3) as f64 * 0.2));
            groups.push("ornate".to_string());
        }
        let pts = project_2d(&vs, &groups).unwrap();
        assert_eq!(pts.len(), vs.len());
        let centroid = |g: &str| {
            let sel: Vec<&ProjectedPoint> = pts.iter().filter(|p| p.group == g).collect();
            let n = sel.len() as f64;
            (sel.iter().map(|p| p.x).sum::<f64>() / n, sel.iter().map(|p| p.y).sum::<f64>() / n)
        };
        let (a, b) = (centroid("plain"), centroid("ornate"));
        let between = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let mut intra: f64 = 0.0;
        for p in &pts {
            for q in &pts {
                if p.group == q.group {
                    intra = intra.max(((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt());
                }
            }
        }
        assert!(between > intra, "between {between} intra {intra}");
    }

    #[test]
    fn identical_inputs_collapse_to_origin() {
        let vs = vec![feat(1, 1, 3.0); 4];
        let pts = project_2d(&vs, &vec!["g".to_string(); 4]).unwrap();
        for p in &pts {
            assert_eq!((p.x, p.y), (0.0, 0.0));
        }
        assert!(project_2d(&vs[..1], &["g".to_string()]).is_err());
    }

    #[test]
    fn projection_is_deterministic() {
        let vs: Vec<_> = (0..5).map(|i| feat(i, i % 2, i as f64)).collect();
        let g = vec!["a".to_string(); 5];
        assert_eq!(project_2d(&vs, &g).unwrap(), project_2d(&vs, &g).unwrap());
        let csv = points_to_csv(&project_2d(&vs, &g).unwrap());
        assert!(csv.starts_with("x,y,group\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    fn paragraph() -> impl Strategy<Value = String> {
        let sentence = ("[a-z]{1,4}( [a-z]{1,4}){0,4}", 0..3usize, any::<bool>(), any::<bool>(), "[.?!]")
            .prop_map(|(words, commas, colon, quoted, end)| {
                let mut s = words;
                for _ in 0..commas {
                    s.push_str(", x");
                }
                if colon {
                    s.push_str(": y");
                }
                if quoted {
                    s = format!("\u{201c}{s}{end}\u{201d}");
                } else {
                    s.push_str(&end);
                }
                s
            });
        proptest::collection::vec(sentence, 1..5).prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn counts_add_over_concatenation(a in paragraph(), b in paragraph()) {
            let (fa, fb) = (style_features(&a), style_features(&b));
            let fab = style_features(&format!("{a} {b}"));
            prop_assert_eq!(fab.commas, fa.commas + fb.commas);
            prop_assert_eq!(fab.colons, fa.colons + fb.colons);
            prop_assert_eq!(fab.sentence_count, fa.sentence_count + fb.sentence_count);
            prop_assert_eq!(fab.question_marks, fa.question_marks + fb.question_marks);
            prop_assert_eq!(fab.left_quotes, fa.left_quotes + fb.left_quotes);
            prop_assert_eq!(fab.right_quotes, fa.right_quotes + fb.right_quotes);
        }
    }
}
