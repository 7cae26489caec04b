//! CMU-format pronunciation lexicon and keyword → phoneme-id queries.
//!
//! Lines look like `WORD  PH PH PH`, alternate pronunciations carry a `(n)`
//! suffix on the headword and vowels carry a lexical stress digit. Comment
//! lines start with `;;;`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

/// The 39 ARPAbet phonemes, lexicographic.
pub const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

const VOWELS: [&str; 15] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
];

pub const PAD: &str = "<pad>";
pub const PAD_ID: u32 = 0;

/// Phoneme symbol table. Index 0 is reserved for padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeVocabulary {
    symbols: Vec<String>,
    keep_stress: bool,
}

impl PhonemeVocabulary {
    /// Stress-stripped ARPAbet: PAD plus 39 symbols.
    pub fn arpabet() -> Self {
        Self::with_stress(false)
    }

    /// ARPAbet with or without stress-marked vowel variants (`AE0`, `AE1`, `AE2`).
    pub fn with_stress(keep_stress: bool) -> Self {
        let mut symbols: Vec<String> = ARPABET
            .iter()
            .flat_map(|&p| {
                if keep_stress && VOWELS.contains(&p) {
                    (0..3).map(|s| format!("{p}{s}")).collect::<Vec<_>>()
                } else {
                    vec![p.to_string()]
                }
            })
            .collect();
        symbols.sort();
        symbols.insert(0, PAD.to_string());
        Self {
            symbols,
            keep_stress,
        }
    }

    /// Number of identifiers including PAD.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn keeps_stress(&self) -> bool {
        self.keep_stress
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.symbols[1..]
            .binary_search_by(|s| s.as_str().cmp(symbol))
            .ok()
            .map(|i| i as u32 + 1)
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Normalizes a raw lexicon token to a vocabulary symbol.
    fn normalize(&self, raw: &str) -> Option<String> {
        let upper = raw.to_ascii_uppercase();
        let base = upper.trim_end_matches(|c: char| c.is_ascii_digit());
        let stress = &upper[base.len()..];
        if !ARPABET.contains(&base) || stress.len() > 1 {
            return None;
        }
        if stress.len() == 1 && !matches!(stress, "0" | "1" | "2") {
            return None;
        }
        let sym = if self.keep_stress && VOWELS.contains(&base) {
            if stress.is_empty() {
                return None;
            }
            upper
        } else {
            base.to_string()
        };
        self.id(&sym).map(|_| sym)
    }
}

impl Default for PhonemeVocabulary {
    fn default() -> Self {
        Self::arpabet()
    }
}

/// Word → pronunciations, first entry is the headword pronunciation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    vocab: PhonemeVocabulary,
    entries: BTreeMap<String, Vec<Vec<String>>>,
}

/// A keyword or phrase as phoneme identifiers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Query {
    pub ids: Vec<u32>,
    pub text: String,
}

impl Query {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn split_variant(head: &str) -> Option<(&str, usize)> {
    match head.strip_suffix(')').and_then(|h| h.rsplit_once('(')) {
        Some((word, n)) if !word.is_empty() => n.parse().ok().map(|n| (word, n)),
        _ => Some((head, 1)),
    }
}

impl Lexicon {
    pub fn empty(vocab: PhonemeVocabulary) -> Self {
        Self {
            vocab,
            entries: BTreeMap::new(),
        }
    }

    /// Parses CMU-dictionary text, stripping stress digits.
    pub fn parse(reader: impl BufRead) -> Result<Self> {
        Self::parse_with(reader, PhonemeVocabulary::arpabet())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        Self::parse(text.as_bytes())
    }

    pub fn parse_with(reader: impl BufRead, vocab: PhonemeVocabulary) -> Result<Self> {
        let mut staged: BTreeMap<String, BTreeMap<usize, Vec<String>>> = BTreeMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line?;
            let line = line.trim_end_matches('\r');
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with(";;;") {
                continue;
            }
            let mut tokens = trimmed.split_whitespace();
            let head = tokens.next().unwrap_or_default();
            let (word, variant) = split_variant(head).ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("malformed variant suffix in {head:?}"),
            })?;
            let mut phones = Vec::new();
            for tok in tokens {
                if tok.starts_with('#') {
                    break;
                }
                let sym = vocab.normalize(tok).ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("unknown phoneme {tok:?}"),
                })?;
                phones.push(sym);
            }
            if phones.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("{word} has an empty pronunciation"),
                });
            }
            let key = word.to_uppercase();
            let variants = staged.entry(key.clone()).or_default();
            if variants.insert(variant, phones).is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate pronunciation ({variant}) for {key}"),
                });
            }
        }
        let entries = staged
            .into_iter()
            .map(|(w, v)| (w, v.into_values().collect()))
            .collect();
        Ok(Self { vocab, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::from(e).at(path))?;
        Self::parse(std::io::BufReader::new(file)).map_err(|e| e.at(path))
    }

    /// CMU-format text; parses back to an identical lexicon.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (word, prons) in &self.entries {
            for (i, p) in prons.iter().enumerate() {
                if i == 0 {
                    let _ = writeln!(out, "{word}  {}", p.join(" "));
                } else {
                    let _ = writeln!(out, "{word}({})  {}", i + 1, p.join(" "));
                }
            }
        }
        out
    }

    /// Adds a pronunciation; the first one added for a word is its headword entry.
    pub fn insert(&mut self, word: &str, phones: &[&str]) -> Result<()> {
        let mut p = Vec::with_capacity(phones.len());
        for &ph in phones {
            p.push(
                self.vocab
                    .normalize(ph)
                    .ok_or_else(|| Error::domain(format!("unknown phoneme {ph:?}")))?,
            );
        }
        if p.is_empty() {
            return Err(Error::domain("empty pronunciation"));
        }
        self.entries.entry(word.to_uppercase()).or_default().push(p);
        Ok(())
    }

    pub fn vocab(&self) -> &PhonemeVocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(&word.to_uppercase())
    }

    pub fn pronunciations(&self, word: &str) -> Option<&[Vec<String>]> {
        self.entries.get(&word.to_uppercase()).map(Vec::as_slice)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn first_ids(&self, word: &str) -> Result<Vec<u32>> {
        let prons = self
            .pronunciations(word)
            .ok_or_else(|| Error::NotInLexicon(word.to_string()))?;
        Ok(prons[0]
            .iter()
            .map(|s| self.vocab.id(s).expect("lexicon symbols are in vocabulary"))
            .collect())
    }

    /// Query from the word's first-listed pronunciation.
    pub fn phonemize(&self, word: &str) -> Result<Query> {
        Ok(Query {
            ids: self.first_ids(word)?,
            text: word.to_uppercase(),
        })
    }

    /// Concatenation of each word's first pronunciation.
    pub fn phonemize_phrase<S: AsRef<str>>(&self, words: &[S]) -> Result<Query> {
        if words.is_empty() {
            return Err(Error::domain("empty phrase"));
        }
        let mut ids = Vec::new();
        for w in words {
            ids.extend(self.first_ids(w.as_ref())?);
        }
        let text = words
            .iter()
            .map(|w| w.as_ref().to_uppercase())
            .collect::<Vec<_>>()
            .join(" ");
        Ok(Query { ids, text })
    }

    /// Phoneme count of the headword pronunciation.
    pub fn phoneme_len(&self, word: &str) -> Option<usize> {
        self.pronunciations(word).map(|p| p[0].len())
    }

    pub fn decode(&self, query: &Query) -> Vec<&str> {
        query
            .ids
            .iter()
            .map(|&i| self.vocab.symbol(i).unwrap_or("?"))
            .collect()
    }
}
