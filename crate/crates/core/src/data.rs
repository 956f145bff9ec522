//! Corpus readers, vocabularies, window extraction and embedding-training
//! pairs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::treenn::{parse_sexp, BinaryTree};

pub const UNK: &str = "*UNK*";
pub const PAD: &str = "*PAD*";

const MIN_COUNT_HEADER: &str = "#min_count ";

/// Dense token indices. Index `len()` is `*UNK*` and `len() + 1` is
/// `*PAD*`, matching the reserved rows of a lookup table of the same size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
    pub min_count: usize,
}

impl Vocab {
    /// A vocabulary over `tokens` in the given order, e.g. a tag set.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.chars().any(char::is_whitespace) || t.is_empty() || t == UNK || t == PAD {
                return Err(Error::invalid("vocab", format!("invalid token `{t}`")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid("vocab", format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab {
            counts: vec![0; tokens.len()],
            tokens,
            index,
            min_count: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, `*PAD*` for the pad symbol and `*UNK*` otherwise.
    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) => i,
            None if token == PAD => self.pad(),
            None => self.unk(),
        }
    }

    pub fn token(&self, id: usize) -> &str {
        match id {
            i if i < self.tokens.len() => &self.tokens[i],
            i if i == self.pad() => PAD,
            _ => UNK,
        }
    }

    pub fn count(&self, id: usize) -> usize {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// A `#min_count N` header, then `token<TAB>count` per line. Tokens
    /// never contain spaces, so the header cannot collide with a token line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{MIN_COUNT_HEADER}{}\n", self.min_count);
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            out.push_str(&format!("{t}\t{c}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        let mut min_count = 0;
        for (ln, line) in text.lines().enumerate() {
            if let Some(n) = line.strip_prefix(MIN_COUNT_HEADER).filter(|_| ln == 0) {
                min_count = n.parse().map_err(|_| Error::Parse {
                    path: "<vocab>".into(),
                    line: 1,
                    msg: format!("bad min_count `{n}`"),
                })?;
                continue;
            }
            let (t, c) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: "<vocab>".into(),
                line: ln + 1,
                msg: "expected `token<TAB>count`".into(),
            })?;
            tokens.push(t.to_string());
            counts.push(c.parse().map_err(|_| Error::Parse {
                path: "<vocab>".into(),
                line: ln + 1,
                msg: format!("bad count `{c}`"),
            })?);
        }
        let mut v = Vocab::from_tokens(tokens)?;
        v.counts = counts;
        v.min_count = min_count;
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Vocab::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Keeps tokens seen at least `min_count` times, ordered by descending
/// count and then lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Vocab> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sentence in corpus {
        for t in sentence {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Empty("cannot build a vocabulary from an empty corpus"));
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count.max(1) && t != UNK && t != PAD)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut v = Vocab::from_tokens(kept.iter().map(|(t, _)| t.to_string()))?;
    v.counts = kept.iter().map(|&(_, c)| c).collect();
    v.min_count = min_count;
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSample {
    pub focus: usize,
    pub word: String,
    /// Offsets `-k..-1` then `+1..+k`.
    pub context: Vec<String>,
    pub label: Option<String>,
}

/// One sample per position, `*PAD*` beyond the sentence edges. In
/// positional mode context words carry their offset, as in `the:+2`.
pub fn extract_windows<S: AsRef<str>>(sentence: &[S], k: usize, positional: bool) -> Result<Vec<WindowSample>> {
    if k == 0 {
        return Err(Error::invalid("extract_windows", "k must be at least 1"));
    }
    if sentence.is_empty() {
        return Err(Error::Empty("extract_windows on an empty sentence"));
    }
    let n = sentence.len() as isize;
    let k = k as isize;
    Ok((0..n)
        .map(|i| {
            let context = (-k..=k)
                .filter(|&o| o != 0)
                .map(|o| {
                    let j = i + o;
                    if j < 0 || j >= n {
                        PAD.to_string()
                    } else {
                        let w = sentence[j as usize].as_ref();
                        if positional {
                            format!("{w}:{o:+}")
                        } else {
                            w.to_string()
                        }
                    }
                })
                .collect();
            WindowSample {
                focus: i as usize,
                word: sentence[i as usize].as_ref().to_string(),
                context,
                label: None,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SkipGramPair {
    pub focus: usize,
    pub context: usize,
    /// True for pairs drawn from the corpus, false for corrupted ones.
    pub observed: bool,
}

/// Every (focus, context) pair within `k` positions. With `dynamic`, each
/// focus samples its own window size uniformly from `1..=k`.
pub fn skipgram_pairs<R: Rng>(sentence: &[usize], k: usize, dynamic: bool, rng: &mut R) -> Vec<SkipGramPair> {
    let n = sentence.len();
    let mut out = Vec::new();
    for i in 0..n {
        let w = if dynamic && k > 1 { rng.random_range(1..=k) } else { k };
        let lo = i.saturating_sub(w);
        let hi = (i + w).min(n - 1);
        for j in lo..=hi {
            if j != i {
                out.push(SkipGramPair {
                    focus: sentence[i],
                    context: sentence[j],
                    observed: true,
                });
            }
        }
    }
    out
}

/// Replaces the focus (or the context) word with a different word drawn
/// uniformly from `0..vocab_size`.
pub fn corrupt<R: Rng>(pair: SkipGramPair, vocab_size: usize, replace_context: bool, rng: &mut R) -> Result<SkipGramPair> {
    if vocab_size < 2 {
        return Err(Error::invalid("corrupt", "need at least two words to corrupt a pair"));
    }
    let original = if replace_context { pair.context } else { pair.focus };
    let mut r = rng.random_range(0..vocab_size - 1);
    // skipping the original keeps the draw uniform over the other words
    if original < vocab_size && r >= original {
        r += 1;
    }
    let mut out = pair;
    if replace_context {
        out.context = r;
    } else {
        out.focus = r;
    }
    out.observed = false;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub tags: Vec<String>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn normalize(token: &str, lowercase: bool) -> String {
    if lowercase {
        token.to_lowercase()
    } else {
        token.to_string()
    }
}

/// `token<TAB>tag` lines; blank lines separate sentences.
pub fn parse_tagged(text: &str, source: &str) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    let mut cur = TaggedSentence {
        words: Vec::new(),
        tags: Vec::new(),
    };
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !cur.words.is_empty() {
                out.push(std::mem::replace(
                    &mut cur,
                    TaggedSentence {
                        words: Vec::new(),
                        tags: Vec::new(),
                    },
                ));
            }
            continue;
        }
        let mut fields = line.split('\t');
        match (fields.next(), fields.next(), fields.next()) {
            (Some(w), Some(t), None) if !w.is_empty() && !t.trim().is_empty() => {
                cur.words.push(w.to_string());
                cur.tags.push(t.trim().to_string());
            }
            _ => {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: ln + 1,
                    msg: format!("expected `token<TAB>tag`, found `{line}`"),
                })
            }
        }
    }
    if !cur.words.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

pub fn read_tagged(path: impl AsRef<Path>) -> Result<Vec<TaggedSentence>> {
    let path = path.as_ref();
    parse_tagged(&read(path)?, &path.display().to_string())
}

/// One s-expression per nonblank line.
pub fn parse_trees(text: &str, source: &str) -> Result<Vec<BinaryTree>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(ln, l)| {
            parse_sexp(l).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: ln + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn read_trees(path: impl AsRef<Path>) -> Result<Vec<BinaryTree>> {
    let path = path.as_ref();
    parse_trees(&read(path)?, &path.display().to_string())
}

/// One sentence per line, whitespace-separated tokens; blank lines skipped.
pub fn parse_plain(text: &str, lowercase: bool) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(|t| normalize(t, lowercase)).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn read_plain(path: impl AsRef<Path>, lowercase: bool) -> Result<Vec<Vec<String>>> {
    Ok(parse_plain(&read(path.as_ref())?, lowercase))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    /// Labels of one or more tasks, written `a|b` for multi-task corpora.
    pub labels: Vec<String>,
    pub words: Vec<String>,
}

/// `label<TAB>sentence` lines.
pub fn parse_labeled(text: &str, source: &str, lowercase: bool) -> Result<Vec<LabeledSentence>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: ln + 1,
            msg,
        };
        let (label, sentence) = line.split_once('\t').ok_or_else(|| err("expected `label<TAB>sentence`".into()))?;
        let words: Vec<String> = sentence.split_whitespace().map(|t| normalize(t, lowercase)).collect();
        if words.is_empty() || label.trim().is_empty() {
            return Err(err("empty label or sentence".into()));
        }
        out.push(LabeledSentence {
            labels: label.trim().split('|').map(str::to_string).collect(),
            words,
        });
    }
    Ok(out)
}

pub fn read_labeled(path: impl AsRef<Path>, lowercase: bool) -> Result<Vec<LabeledSentence>> {
    let path = path.as_ref();
    parse_labeled(&read(path)?, &path.display().to_string(), lowercase)
}
