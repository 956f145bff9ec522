//! Constructed corpora for the desk-scale demos. Every generator is a pure
//! function of its seed.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledSentence, TaggedSentence};

/// The four XOR points with labels 0 (false) and 1 (true).
pub fn xor() -> Vec<([f64; 2], usize)> {
    vec![([0.0, 0.0], 0), ([0.0, 1.0], 1), ([1.0, 0.0], 1), ([1.0, 1.0], 0)]
}

const SUBJECTS: [&str; 5] = ["it", "the film", "the food", "the show", "this book"];
const POLAR: [(&str, &str); 4] = [("good", "bad"), ("great", "awful"), ("nice", "poor"), ("fun", "dull")];
const HEDGES: [&str; 5] = ["quite", "really", "very", "pretty", "truly"];

/// `<subj> was not <a> , <subj> was actually <hedge> <b>` sentences. Every
/// sentence has a twin with `a` and `b` swapped and the opposite label, so
/// the two share one bag of words. `n` is rounded down to an even count.
pub fn negation_templates(n: usize, seed: u64) -> Vec<LabeledSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let subj = *SUBJECTS.choose(&mut rng).expect("nonempty");
        let (pos, neg) = *POLAR.choose(&mut rng).expect("nonempty");
        let hedge = *HEDGES.choose(&mut rng).expect("nonempty");
        for (a, b, label) in [(pos, neg, "neg"), (neg, pos, "pos")] {
            let text = format!("{subj} was not {a} , {subj} was actually {hedge} {b}");
            out.push(LabeledSentence {
                labels: vec![label.to_string()],
                words: text.split(' ').map(str::to_string).collect(),
            });
        }
    }
    out
}

/// The canonical twin pair used in the order-sensitivity check.
pub fn negation_pair() -> (Vec<String>, Vec<String>) {
    let w = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    (
        w("it was not good , it was actually quite bad"),
        w("it was not bad , it was actually quite good"),
    )
}

pub const RECALL_VOCAB: [&str; 4] = ["a", "b", "c", "d"];

/// Sequences of `lag + 1` uniform tokens over a 4-word vocabulary labelled
/// with the token `lag` steps before the last one.
pub fn recall(n: usize, lag: usize, seed: u64) -> Vec<LabeledSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let words: Vec<String> = (0..=lag)
                .map(|_| RECALL_VOCAB.choose(&mut rng).expect("nonempty").to_string())
                .collect();
            LabeledSentence {
                labels: vec![words[words.len() - 1 - lag].clone()],
                words,
            }
        })
        .collect()
}

/// Word groups of the two-topic corpus.
pub fn topic_words(per_topic: usize) -> [Vec<String>; 2] {
    [
        (0..per_topic).map(|i| format!("sun{i}")).collect(),
        (0..per_topic).map(|i| format!("ice{i}")).collect(),
    ]
}

/// Sentences drawn from a single topic each, so words of different topics
/// never co-occur.
pub fn two_topics(sentences: usize, per_topic: usize, len: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = topic_words(per_topic);
    (0..sentences)
        .map(|i| {
            let words = &topics[i % 2];
            (0..len).map(|_| words.choose(&mut rng).expect("nonempty").clone()).collect()
        })
        .collect()
}

pub const TAGS: [&str; 5] = ["DET", "ADJ", "NOUN", "VERB", "ADV"];

fn tag_lexicon(tag: &str) -> &'static [&'static str] {
    match tag {
        "DET" => &["the", "a", "every", "some", "this", "that"],
        "ADJ" => &["red", "small", "old", "quick", "happy", "dark", "loud"],
        "NOUN" => &["dog", "cat", "river", "idea", "child", "song", "tree", "car"],
        "VERB" => &["runs", "sees", "eats", "likes", "finds", "hears", "sings"],
        "ADV" => &["slowly", "often", "again", "quietly", "today"],
        _ => unreachable!("fixed tag set"),
    }
}

/// Tag bigram chain `DET ADJ* NOUN VERB (ADV)? (DET ADJ* NOUN)?` with words
/// drawn from disjoint per-tag lexicons; tags are a function of the word.
pub fn tagged(sentences: usize, seed: u64) -> Vec<TaggedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sentences);
    for _ in 0..sentences {
        let mut tags: Vec<&str> = Vec::new();
        let np = |tags: &mut Vec<&str>, rng: &mut ChaCha8Rng| {
            tags.push("DET");
            while tags.len() < 12 && rng.random_bool(0.4) {
                tags.push("ADJ");
            }
            tags.push("NOUN");
        };
        np(&mut tags, &mut rng);
        tags.push("VERB");
        if rng.random_bool(0.4) {
            tags.push("ADV");
        }
        if rng.random_bool(0.6) {
            np(&mut tags, &mut rng);
        }
        let words = tags
            .iter()
            .map(|t| tag_lexicon(t).choose(&mut rng).expect("nonempty").to_string())
            .collect();
        out.push(TaggedSentence {
            words,
            tags: tags.iter().map(|t| t.to_string()).collect(),
        });
    }
    out
}

/// Cyclic sentences `w_p w_{p+1} ...` over `period` distinct words with a
/// random phase `p` and a random length in `min_len..=max_len`.
pub fn periodic(sentences: usize, period: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sentences)
        .map(|_| {
            let phase = rng.random_range(0..period);
            let len = rng.random_range(min_len..=max_len);
            (0..len).map(|i| format!("w{}", (phase + i) % period)).collect()
        })
        .collect()
}

/// Unigram maximum-likelihood perplexity of `eval` tokens under counts from
/// `train`, with unseen tokens pooled into one extra class.
pub fn unigram_perplexity(train: &[Vec<String>], eval: &[Vec<String>]) -> f64 {
    use std::collections::HashMap;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut total = 0usize;
    for s in train {
        for w in s {
            *counts.entry(w.as_str()).or_default() += 1;
            total += 1;
        }
    }
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in eval {
        for w in s {
            // add-one mass for the unseen class keeps OOV tokens finite
            let c = counts.get(w.as_str()).copied().unwrap_or(0) as f64;
            let p = if c > 0.0 { c / (total as f64 + 1.0) } else { 1.0 / (total as f64 + 1.0) };
            nll -= p.ln();
            n += 1;
        }
    }
    (nll / n as f64).exp()
}
