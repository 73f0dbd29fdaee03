//! Byte-pair-encoding tokenizer over normalized caption text.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED: [&str; 5] = ["[SOS]", "[EOS]", "[UNK]", "[PAD]", "[MASK]"];

/// Prefix of word-initial symbols.
pub const MARKER: char = '\u{2581}';

const HEADER: &str = "bpe-vocab v1";

/// Lowercase, strip accents, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let stripped: String = text
        .nfd()
        .filter(|c| !is_combining_mark(*c))
        .collect::<String>()
        .to_lowercase();
    // lowercasing may itself produce decomposable characters
    let stripped: String = stripped.nfd().filter(|c| !is_combining_mark(*c)).collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum CharClass {
    Letter,
    Digit,
    Punct,
}

pub fn char_class(c: char) -> Option<CharClass> {
    if c == MARKER || c.is_whitespace() {
        None
    } else if c.is_alphabetic() {
        Some(CharClass::Letter)
    } else if c.is_numeric() {
        Some(CharClass::Digit)
    } else {
        Some(CharClass::Punct)
    }
}

/// Whether the non-marker characters of `token` span more than one class.
pub fn mixes_classes(token: &str) -> bool {
    let mut seen = None;
    for c in token.chars() {
        if let Some(k) = char_class(c) {
            match seen {
                None => seen = Some(k),
                Some(s) if s != k => return true,
                _ => {}
            }
        }
    }
    false
}

fn can_merge(a: &str, b: &str) -> bool {
    let mut joined = String::with_capacity(a.len() + b.len());
    joined.push_str(a);
    joined.push_str(b);
    !mixes_classes(&joined)
}

/// Splits a normalized word into its initial symbols.
pub fn word_symbols(word: &str) -> Vec<String> {
    std::iter::once(MARKER.to_string())
        .chain(word.chars().map(String::from))
        .collect()
}

fn merge_pair(symbols: &mut Vec<String>, a: &str, b: &str) -> bool {
    let mut changed = false;
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
            changed = true;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
    changed
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl Vocabulary {
    fn from_parts(alphabet: Vec<char>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            ids.insert(t.clone(), i);
        }
        for &c in &alphabet {
            let s = c.to_string();
            if ids.insert(s.clone(), tokens.len()).is_some() {
                return Err(Error::Tokenizer(format!("duplicate alphabet symbol {s:?}")));
            }
            tokens.push(s);
        }
        let mut ranks = HashMap::new();
        for (r, (a, b)) in merges.iter().enumerate() {
            if !ids.contains_key(a) || !ids.contains_key(b) {
                return Err(Error::Tokenizer(format!("merge {r} uses unknown symbol in {a:?} {b:?}")));
            }
            if ranks.insert((a.clone(), b.clone()), r).is_some() {
                return Err(Error::Tokenizer(format!("merge {a:?} {b:?} listed twice")));
            }
            let joined = format!("{a}{b}");
            if !ids.contains_key(&joined) {
                ids.insert(joined.clone(), tokens.len());
                tokens.push(joined);
            }
        }
        Ok(Vocabulary { tokens, ids, alphabet, merges, ranks })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Segments one normalized word (no whitespace) into symbols.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            match best {
                Some((r, _)) => {
                    let (a, b) = &self.merges[r];
                    merge_pair(&mut symbols, a, b);
                }
                None => return symbols,
            }
        }
    }

    /// Normalizes, segments and wraps the text in [SOS] ... [EOS].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![SOS];
        for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
            for sym in self.segment(word) {
                ids.push(self.id(&sym).unwrap_or(UNK));
            }
        }
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} outside vocabulary of {}", self.len())))?;
            if id < RESERVED.len() {
                continue;
            }
            out.push_str(tok);
        }
        Ok(out.replace(MARKER, " ").trim().to_string())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER} {}", self.len());
        let _ = writeln!(
            s,
            "# word-initial symbols carry U+2581 ({MARKER}); reserved ids 0-4 are {}",
            RESERVED.join(" ")
        );
        let _ = writeln!(s, "reserved {}", RESERVED.len());
        for r in RESERVED {
            let _ = writeln!(s, "{r}");
        }
        let _ = writeln!(s, "alphabet {}", self.alphabet.len());
        for c in &self.alphabet {
            let _ = writeln!(s, "{c}");
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Tokenizer(format!("malformed vocab file: {what}"));
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let size: usize = header
            .strip_prefix(HEADER)
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| bad("header"))?;
        let mut section = |name: &str| -> Result<Vec<&str>> {
            let line = lines.next().ok_or_else(|| bad(name))?;
            let n: usize = line
                .strip_prefix(name)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| bad(name))?;
            (0..n).map(|_| lines.next().ok_or_else(|| bad(name))).collect()
        };
        let reserved = section("reserved")?;
        if reserved != RESERVED {
            return Err(bad("reserved tokens"));
        }
        let alphabet = section("alphabet")?
            .into_iter()
            .map(|l| {
                let mut cs = l.chars();
                match (cs.next(), cs.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(bad("alphabet entry")),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let merges = section("merges")?
            .into_iter()
            .map(|l| {
                l.split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| bad("merge entry"))
            })
            .collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::from_parts(alphabet, merges)?;
        if vocab.len() != size {
            return Err(bad("size does not match header"));
        }
        Ok(vocab)
    }
}

/// Learns merges on `corpus` until the vocabulary reaches `vocab_size`
/// entries or no admissible pair occurs twice.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocabulary> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in corpus {
        for w in normalize(text.as_ref()).split(' ').filter(|w| !w.is_empty()) {
            *counts.entry(w.to_string()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Tokenizer("corpus has no words".into()));
    }
    let mut alphabet: Vec<char> = counts.keys().flat_map(|w| w.chars()).collect();
    alphabet.push(MARKER);
    alphabet.sort_unstable();
    alphabet.dedup();
    let base = RESERVED.len() + alphabet.len();
    if vocab_size < base {
        return Err(Error::Tokenizer(format!(
            "vocab size {vocab_size} is below the {} reserved + {} alphabet symbols",
            RESERVED.len(),
            alphabet.len()
        )));
    }

    let mut words: Vec<(Vec<String>, usize)> = counts.into_iter().map(|(w, n)| (word_symbols(&w), n)).collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    let mut known: std::collections::HashSet<String> = alphabet.iter().map(|c| c.to_string()).collect();
    let mut size = base;
    while size < vocab_size {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                if can_merge(&w[0], &w[1]) {
                    *pairs.entry((&w[0], &w[1])).or_default() += n;
                }
            }
        }
        let best = pairs
            .into_iter()
            .filter(|&(_, n)| n >= 2)
            .max_by(|(pa, na), (pb, nb)| na.cmp(nb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        for (syms, _) in &mut words {
            merge_pair(syms, &a, &b);
        }
        if known.insert(format!("{a}{b}")) {
            size += 1;
        }
        merges.push((a, b));
    }
    Vocabulary::from_parts(alphabet, merges)
}
