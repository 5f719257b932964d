//! Seeded two-style toy corpus.
//!
//! Every story has four sentences with a fixed discourse role per position
//! (setting, discovery, journey, ending). Both styles share the content
//! vocabulary (places, objects, companions, feelings) and differ in their
//! function words, verbs and punctuation. Protagonists are drawn from
//! style-specific name lists; one place name is shared by both styles often
//! enough to be filtered out as high frequency.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Story, StyleId, StyleVocabulary};
use crate::error::Result;

pub const PLAIN: &str = "plain";
pub const BARD: &str = "bard";

pub const PLAIN_NAMES: [&str; 12] = [
    "Anna", "Lucy", "Tom", "Ben", "Mia", "Sam", "Ella", "Jack", "Nora", "Leo", "Ruby", "Owen",
];
pub const BARD_NAMES: [&str; 12] = [
    "Oberon", "Portia", "Horatio", "Viola", "Banquo", "Cordelia", "Lysander", "Hermia", "Othello",
    "Juliet", "Romeo", "Ariel",
];
/// Shared by both styles; appears in a large fraction of all stories.
pub const SHARED_PLACE: &str = "Kingsbridge";

const PLACES: [&str; 8] = [
    "river", "forest", "market", "castle", "village", "harbor", "meadow", "mountain",
];
const OBJECTS: [&str; 8] = ["lamp", "key", "sword", "letter", "ring", "map", "coin", "flute"];
const COMPANIONS: [&str; 6] = ["fox", "horse", "owl", "dog", "goat", "crow"];
const FEELINGS: [&str; 6] = ["happy", "tired", "brave", "calm", "proud", "sad"];

/// Content of one story, independent of how it is phrased.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoryPlan {
    pub name: String,
    pub home: String,
    pub object: String,
    pub destination: String,
    pub companion: String,
    pub feeling: String,
    /// Template variant per sentence position.
    pub variants: [usize; 4],
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

impl StoryPlan {
    pub fn random(rng: &mut impl Rng, names: &[&str], shared_place_rate: f64) -> Self {
        let home = if rng.random_bool(shared_place_rate) {
            SHARED_PLACE
        } else {
            PLACES.choose(rng).unwrap()
        };
        let destination = loop {
            let d = *PLACES.choose(rng).unwrap();
            if d != home {
                break d;
            }
        };
        Self {
            name: names.choose(rng).unwrap().to_string(),
            home: home.to_string(),
            object: OBJECTS.choose(rng).unwrap().to_string(),
            destination: destination.to_string(),
            companion: COMPANIONS.choose(rng).unwrap().to_string(),
            feeling: FEELINGS.choose(rng).unwrap().to_string(),
            variants: [
                rng.random_range(0..2),
                rng.random_range(0..2),
                rng.random_range(0..2),
                rng.random_range(0..2),
            ],
        }
    }

    fn home_phrase(&self) -> String {
        if self.home == SHARED_PLACE {
            SHARED_PLACE.to_string()
        } else {
            format!("the {}", self.home)
        }
    }

    /// Sentences in the plain style.
    pub fn plain(&self) -> Vec<Vec<String>> {
        let n = &self.name;
        let v = self.variants;
        vec![
            words(&match v[0] {
                0 => format!("{n} lived near {} .", self.home_phrase()),
                _ => format!("{n} had a small house by {} .", self.home_phrase()),
            }),
            words(&match v[1] {
                0 => format!("one day {n} found a {} .", self.object),
                _ => format!("one morning {n} saw a {} on the road .", self.object),
            }),
            words(&match v[2] {
                0 => format!("{n} took the {} to the {} with a {} .", self.object, self.destination, self.companion),
                _ => format!("then {n} walked to the {} with a {} .", self.destination, self.companion),
            }),
            words(&match v[3] {
                0 => format!("in the end {n} felt {} .", self.feeling),
                _ => format!("at night {n} was {} and went to sleep .", self.feeling),
            }),
        ]
    }

    /// Sentences in the ornate style.
    pub fn bard(&self) -> Vec<Vec<String>> {
        let n = &self.name;
        let v = self.variants;
        vec![
            words(&match v[0] {
                0 => format!("{n} did dwell beside {} , forsooth .", self.home_phrase()),
                _ => format!("hark , {n} kept a humble hut by {} .", self.home_phrase()),
            }),
            words(&match v[1] {
                0 => format!("upon a morn , {n} espied a {} !", self.object),
                _ => format!("lo , {n} beheld a {} upon the way !", self.object),
            }),
            words(&match v[2] {
                0 => format!("{n} bore the {} unto the {} with a {} .", self.object, self.destination, self.companion),
                _ => format!("anon {n} hied unto the {} with a {} .", self.destination, self.companion),
            }),
            words(&match v[3] {
                0 => format!("wherefore was {n} so {} ?", self.feeling),
                _ => format!("at eve {n} was {} , and did slumber .", self.feeling),
            }),
        ]
    }

    pub fn render(&self, style: StyleId) -> Vec<Vec<String>> {
        if style.0 == 0 {
            self.plain()
        } else {
            self.bard()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub per_style: usize,
    pub seed: u64,
    pub shared_place_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            per_style: 250,
            seed: 7,
            shared_place_rate: 0.3,
        }
    }
}

pub fn styles() -> StyleVocabulary {
    StyleVocabulary::new([PLAIN, BARD]).expect("two distinct names")
}

/// Interleaved plain/bard stories (plain first), `2 × per_style` in total.
pub fn generate(cfg: &SyntheticConfig) -> Result<(StyleVocabulary, Vec<Story>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stories = Vec::with_capacity(cfg.per_style * 2);
    for _ in 0..cfg.per_style {
        for style in [StyleId(0), StyleId(1)] {
            let names: &[&str] = if style.0 == 0 { &PLAIN_NAMES } else { &BARD_NAMES };
            let plan = StoryPlan::random(&mut rng, names, cfg.shared_place_rate);
            stories.push(Story::from_sentences(plan.render(style), style)?);
        }
    }
    Ok((styles(), stories))
}
