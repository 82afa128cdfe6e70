//! Text analysis: forward maximum-matching G2P, per-character phoneme
//! counts, a positional prosody stand-in, and regulation of per-character
//! tokens to phoneme length.
//!
//! Runs once per request, before any incremental work.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

/// Phoneme id emitted for characters the lexicon does not cover.
pub const UNK_PHONEME: u32 = 0;
const UNK_SYMBOL: &str = "<unk>";

const BUILTIN_LEXICON: &str = include_str!("../data/lexicon.tsv");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrontendError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {tokens} per-character tokens but {counts} counts")]
    LengthMismatch { tokens: usize, counts: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexiconError {
    #[error("line {line}: expected `key<TAB>values`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: phrase {phrase:?} has {chars} characters but {syllables} syllables")]
    SyllableCount {
        line: usize,
        phrase: String,
        chars: usize,
        syllables: usize,
    },
    #[error("line {line}: syllable {syllable:?} maps to {count} phonemes, expected 1 to 3")]
    PhonemeCount {
        line: usize,
        syllable: String,
        count: usize,
    },
    #[error("syllable {0:?} is used by a phrase but has no phoneme mapping")]
    MissingSyllable(String),
    #[error("character {0:?} appears in a phrase but has no single-character entry")]
    MissingCharacter(char),
    #[error("cannot read lexicon: {0}")]
    Io(String),
}

/// Phrase dictionary plus syllable-to-phoneme table.
#[derive(Debug, Clone)]
pub struct Lexicon {
    phrases: HashMap<String, Vec<String>>,
    syllables: HashMap<String, Vec<u32>>,
    symbols: Vec<String>,
    max_phrase_len: usize,
}

impl Lexicon {
    /// The lexicon bundled with the crate.
    pub fn builtin() -> Self {
        Self::from_tsv(BUILTIN_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|e| LexiconError::Io(e.to_string()))?;
        Self::from_tsv(&text)
    }

    /// Parses the two-section TSV format: `phrase<TAB>syl1 syl2 …` lines, a
    /// `[phones]` header, then `syllable<TAB>ph1 ph2 …` lines. Phoneme
    /// symbols get ids in order of first appearance; id 0 is reserved for
    /// unknown characters.
    pub fn from_tsv(text: &str) -> Result<Self, LexiconError> {
        let mut phrases: HashMap<String, Vec<String>> = HashMap::new();
        let mut syllables = HashMap::new();
        let mut symbols = vec![UNK_SYMBOL.to_string()];
        let mut symbol_ids: HashMap<String, u32> = HashMap::new();
        let mut in_phones = false;

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if trimmed == "[phones]" {
                in_phones = true;
                continue;
            }
            let (key, values) = raw.split_once('\t').ok_or_else(|| LexiconError::Syntax {
                line,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            let values: Vec<&str> = values.split_whitespace().collect();
            if key.is_empty() || values.is_empty() {
                return Err(LexiconError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            }
            if in_phones {
                if values.len() > 3 {
                    return Err(LexiconError::PhonemeCount {
                        line,
                        syllable: key.to_string(),
                        count: values.len(),
                    });
                }
                let ids = values
                    .iter()
                    .map(|sym| {
                        *symbol_ids.entry(sym.to_string()).or_insert_with(|| {
                            symbols.push(sym.to_string());
                            (symbols.len() - 1) as u32
                        })
                    })
                    .collect();
                syllables.insert(key.to_string(), ids);
            } else {
                let chars = key.chars().count();
                if chars != values.len() {
                    return Err(LexiconError::SyllableCount {
                        line,
                        phrase: key.to_string(),
                        chars,
                        syllables: values.len(),
                    });
                }
                phrases.insert(key.to_string(), values.iter().map(|s| s.to_string()).collect());
            }
        }

        for (phrase, syls) in &phrases {
            for syl in syls {
                if !syllables.contains_key(syl) {
                    return Err(LexiconError::MissingSyllable(syl.clone()));
                }
            }
            for ch in phrase.chars() {
                if !phrases.contains_key(ch.encode_utf8(&mut [0; 4]) as &str) {
                    return Err(LexiconError::MissingCharacter(ch));
                }
            }
        }
        let max_phrase_len = phrases.keys().map(|p| p.chars().count()).max().unwrap_or(1);
        Ok(Self {
            phrases,
            syllables,
            symbols,
            max_phrase_len,
        })
    }

    pub fn max_phrase_len(&self) -> usize {
        self.max_phrase_len
    }

    /// Number of phoneme ids, including the unknown id.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn phoneme_id(&self, symbol: &str) -> Option<u32> {
        self.symbols.iter().position(|s| s == symbol).map(|i| i as u32)
    }

    pub fn contains_phrase(&self, phrase: &str) -> bool {
        self.phrases.contains_key(phrase)
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.phrases.keys().map(String::as_str)
    }

    /// Phonemes for each character of `phrase`, if it is an entry.
    fn phrase_phonemes(&self, phrase: &str) -> Option<impl Iterator<Item = &[u32]>> {
        let syls = self.phrases.get(phrase)?;
        Some(syls.iter().map(|s| self.syllables[s].as_slice()))
    }
}

/// Output of the frontend, all sequences already regulated to phoneme length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrontendOutput {
    pub phonemes: Vec<u32>,
    /// Phoneme tokens contributed by each character.
    pub char_counts: Vec<usize>,
    pub pw: Vec<u32>,
    pub pph: Vec<u32>,
    pub iph: Vec<u32>,
}

impl FrontendOutput {
    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.phonemes.len();
        self.char_counts.iter().sum::<usize>() == n && self.pw.len() == n && self.pph.len() == n && self.iph.len() == n
    }
}

/// Forward maximum matching: at each position take the longest lexicon
/// entry (at most `max_phrase_len` characters) that prefixes the remaining
/// text; fall back to [`UNK_PHONEME`] for uncovered characters.
pub fn g2p(text: &str, lex: &Lexicon) -> Result<(Vec<u32>, Vec<usize>), FrontendError> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(FrontendError::EmptyInput);
    }
    let mut phonemes = Vec::with_capacity(chars.len() * 2);
    let mut counts = Vec::with_capacity(chars.len());
    let mut pos = 0;
    let mut window = String::new();
    while pos < chars.len() {
        let longest = lex.max_phrase_len.min(chars.len() - pos);
        let mut matched = false;
        for len in (1..=longest).rev() {
            window.clear();
            window.extend(&chars[pos..pos + len]);
            if let Some(per_char) = lex.phrase_phonemes(&window) {
                for ph in per_char {
                    phonemes.extend_from_slice(ph);
                    counts.push(ph.len());
                }
                pos += len;
                matched = true;
                break;
            }
        }
        if !matched {
            phonemes.push(UNK_PHONEME);
            counts.push(1);
            pos += 1;
        }
    }
    Ok((phonemes, counts))
}

/// Per-character prosody tokens `(pw, pph, iph)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prosody {
    pub pw: Vec<u32>,
    pub pph: Vec<u32>,
    pub iph: Vec<u32>,
}

pub fn is_punctuation(ch: char) -> bool {
    ch.is_ascii_punctuation() || "，。！？、；：…".contains(ch)
}

/// Positional stand-in for a learned prosody predictor: a prosodic-word
/// boundary every 2 characters, a phrase boundary every 4, and an
/// intonational boundary at punctuation and at the final character.
pub fn predict_prosody(text: &str) -> Result<Prosody, FrontendError> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(FrontendError::EmptyInput);
    }
    let last = chars.len() - 1;
    let mut prosody = Prosody {
        pw: Vec::with_capacity(chars.len()),
        pph: Vec::with_capacity(chars.len()),
        iph: Vec::with_capacity(chars.len()),
    };
    for (i, &ch) in chars.iter().enumerate() {
        prosody.pw.push(u32::from((i + 1) % 2 == 0));
        prosody.pph.push(u32::from((i + 1) % 4 == 0));
        prosody.iph.push(u32::from(i == last || is_punctuation(ch)));
    }
    Ok(prosody)
}

/// Repeats the token of character `i` `counts[i]` times.
pub fn regulate<T: Copy>(tokens: &[T], counts: &[usize]) -> Result<Vec<T>, FrontendError> {
    if tokens.len() != counts.len() {
        return Err(FrontendError::LengthMismatch {
            tokens: tokens.len(),
            counts: counts.len(),
        });
    }
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (&tok, &n) in tokens.iter().zip(counts) {
        out.extend(std::iter::repeat_n(tok, n));
    }
    Ok(out)
}

/// Drops whitespace; the rest of the frontend sees only content characters.
pub fn normalize(text: &str) -> String {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

pub fn run_frontend(text: &str, lex: &Lexicon) -> Result<FrontendOutput, FrontendError> {
    let text = normalize(text);
    let (phonemes, char_counts) = g2p(&text, lex)?;
    let prosody = predict_prosody(&text)?;
    Ok(FrontendOutput {
        pw: regulate(&prosody.pw, &char_counts)?,
        pph: regulate(&prosody.pph, &char_counts)?,
        iph: regulate(&prosody.iph, &char_counts)?,
        phonemes,
        char_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOY: &str = "A\ta1\nB\tb1\nAB\ta1 b1\n[phones]\na1\tp1 p2\nb1\tp3\n";

    fn toy() -> Lexicon {
        Lexicon::from_tsv(TOY).unwrap()
    }

    fn ids(lex: &Lexicon, syms: &[&str]) -> Vec<u32> {
        syms.iter().map(|s| lex.phoneme_id(s).unwrap()).collect()
    }

    /// Longest lexicon entry prefixing the text at each position, found by
    /// scanning every entry rather than windowing.
    fn brute_force_segments(text: &str, lex: &Lexicon) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let rest: String = chars[pos..].iter().collect();
            let best = lex
                .phrases()
                .filter(|p| rest.starts_with(p))
                .max_by_key(|p| p.chars().count())
                .map(str::to_string)
                .unwrap_or_else(|| chars[pos].to_string());
            pos += best.chars().count();
            out.push(best);
        }
        out
    }

    fn segment_phonemes(segments: &[String], lex: &Lexicon) -> (Vec<u32>, Vec<usize>) {
        let mut ph = Vec::new();
        let mut counts = Vec::new();
        for seg in segments {
            match lex.phrase_phonemes(seg) {
                Some(per_char) => {
                    for p in per_char {
                        ph.extend_from_slice(p);
                        counts.push(p.len());
                    }
                }
                None => {
                    ph.push(UNK_PHONEME);
                    counts.push(1);
                }
            }
        }
        (ph, counts)
    }

    #[test]
    fn toy_lexicon_ids() {
        let lex = toy();
        assert_eq!(lex.vocab_size(), 4);
        assert_eq!(lex.symbol(0), Some("<unk>"));
        assert_eq!(lex.max_phrase_len(), 2);
    }

    #[test]
    fn g2p_phrase_split_across_characters() {
        let lex = toy();
        let (ph, counts) = g2p("AB", &lex).unwrap();
        assert_eq!(ph, ids(&lex, &["p1", "p2", "p3"]));
        assert_eq!(counts, vec![2, 1]);
    }

    #[test]
    fn g2p_single_entry() {
        let lex = Lexicon::from_tsv("A\ta1\n[phones]\na1\tp1\n").unwrap();
        assert_eq!(g2p("A", &lex).unwrap(), (ids(&lex, &["p1"]), vec![1]));
    }

    #[test]
    fn g2p_unknown_character_falls_back() {
        let lex = Lexicon::from_tsv("A\ta1\n[phones]\na1\tp1\n").unwrap();
        let (ph, counts) = g2p("AX", &lex).unwrap();
        assert_eq!(ph, vec![lex.phoneme_id("p1").unwrap(), UNK_PHONEME]);
        assert_eq!(counts, vec![1, 1]);
    }

    #[test]
    fn g2p_empty_is_an_error() {
        assert_eq!(g2p("", &toy()), Err(FrontendError::EmptyInput));
    }

    #[test]
    fn phrase_reading_overrides_single_characters() {
        // 一个 reads yi2 ge4 as a phrase; 一 alone reads yi1.
        let lex = Lexicon::builtin();
        let (phrase, _) = g2p("一个", &lex).unwrap();
        let (single, _) = g2p("一", &lex).unwrap();
        assert_ne!(phrase[..single.len()], single[..]);
    }

    #[test]
    fn lexicon_validation_errors() {
        assert!(matches!(
            Lexicon::from_tsv("AB\ta1 b1\n[phones]\na1\tp1\nb1\tp2\n"),
            Err(LexiconError::MissingCharacter('A'))
        ));
        assert!(matches!(
            Lexicon::from_tsv("A\ta1 a2\n[phones]\na1\tp1\n"),
            Err(LexiconError::SyllableCount { .. })
        ));
        assert!(matches!(
            Lexicon::from_tsv("A\ta1\n[phones]\na1\tp1 p2 p3 p4\n"),
            Err(LexiconError::PhonemeCount { .. })
        ));
        assert!(matches!(
            Lexicon::from_tsv("A\tz9\n[phones]\na1\tp1\n"),
            Err(LexiconError::MissingSyllable(_))
        ));
    }

    #[test]
    fn builtin_lexicon_is_covered() {
        let lex = Lexicon::builtin();
        assert!(lex.phrases().count() >= 40);
        assert!(lex.max_phrase_len() >= 3);
        for phrase in lex.phrases() {
            let (ph, counts) = g2p(phrase, &lex).unwrap();
            assert!(!ph.contains(&UNK_PHONEME), "{phrase}");
            assert!(ph.iter().all(|&id| (id as usize) < lex.vocab_size()));
            assert_eq!(counts.iter().sum::<usize>(), ph.len());
        }
    }

    #[test]
    fn prosody_rule() {
        let p = predict_prosody("今天天气").unwrap();
        assert_eq!(p.pw, vec![0, 1, 0, 1]);
        assert_eq!(p.pph, vec![0, 0, 0, 1]);
        assert_eq!(p.iph, vec![0, 0, 0, 1]);
        let p = predict_prosody("好").unwrap();
        assert_eq!((p.pw, p.pph, p.iph), (vec![0], vec![0], vec![1]));
        let p = predict_prosody("今天天气。").unwrap();
        assert_eq!(p.iph, vec![0, 0, 0, 0, 1]);
        let p = predict_prosody("你好，再见").unwrap();
        assert_eq!(p.iph, vec![0, 0, 1, 0, 1]);
        assert_eq!(predict_prosody(""), Err(FrontendError::EmptyInput));
    }

    #[test]
    fn regulate_examples() {
        assert_eq!(regulate(&[0, 1], &[2, 1]).unwrap(), vec![0, 0, 1]);
        assert_eq!(regulate(&[1], &[3]).unwrap(), vec![1, 1, 1]);
        assert_eq!(regulate(&[0, 1, 0], &[1, 0, 2]).unwrap(), vec![0, 0, 0]);
        assert_eq!(
            regulate(&[0, 1], &[1]),
            Err(FrontendError::LengthMismatch { tokens: 2, counts: 1 })
        );
    }

    #[test]
    fn run_frontend_fixture() {
        let lex = Lexicon::builtin();
        let out = run_frontend("你好，中国人", &lex).unwrap();
        let sym: Vec<&str> = out.phonemes.iter().map(|&p| lex.symbol(p).unwrap()).collect();
        assert_eq!(
            sym,
            vec!["n", "i2", "h", "ao3", "sp", "zh", "ong1", "g", "u", "o2", "r", "en2"]
        );
        assert_eq!(out.char_counts, vec![2, 2, 1, 2, 3, 2]);
        assert_eq!(out.pw, vec![0, 0, 1, 1, 0, 1, 1, 0, 0, 0, 1, 1]);
        assert!(out.is_consistent());
    }

    #[test]
    fn run_frontend_rejects_blank_text() {
        let lex = Lexicon::builtin();
        assert_eq!(run_frontend("", &lex), Err(FrontendError::EmptyInput));
        assert_eq!(run_frontend("  \t", &lex), Err(FrontendError::EmptyInput));
    }

    #[test]
    fn repeated_two_phoneme_character_is_additive() {
        let lex = Lexicon::builtin();
        for n in 1..10 {
            let text = "好".repeat(n);
            assert_eq!(run_frontend(&text, &lex).unwrap().len(), 2 * n);
        }
    }

    proptest! {
        #[test]
        fn regulate_matches_flat_map(pairs in proptest::collection::vec((0u32..5, 0usize..4), 0..30)) {
            let (tokens, counts): (Vec<u32>, Vec<usize>) = pairs.iter().copied().unzip();
            let expected: Vec<u32> = pairs.iter().flat_map(|&(t, c)| vec![t; c]).collect();
            prop_assert_eq!(regulate(&tokens, &counts).unwrap(), expected);
        }

        #[test]
        fn g2p_matches_brute_force(picks in proptest::collection::vec(0usize..1000, 1..25)) {
            let lex = Lexicon::builtin();
            let mut alphabet: Vec<String> = lex.phrases().map(str::to_string).collect();
            alphabet.sort();
            alphabet.push("X".into());
            let text: String = picks.iter().map(|&i| alphabet[i % alphabet.len()].as_str()).collect();
            let segments = brute_force_segments(&text, &lex);
            prop_assert_eq!(g2p(&text, &lex).unwrap(), segment_phonemes(&segments, &lex));
        }

        #[test]
        fn frontend_lengths_agree(picks in proptest::collection::vec(0usize..1000, 1..25)) {
            let lex = Lexicon::builtin();
            let mut alphabet: Vec<String> = lex.phrases().map(str::to_string).collect();
            alphabet.sort();
            let text: String = picks.iter().map(|&i| alphabet[i % alphabet.len()].as_str()).collect();
            let out = run_frontend(&text, &lex).unwrap();
            prop_assert!(out.is_consistent());
            prop_assert_eq!(out.char_counts.len(), text.chars().count());
        }
    }
}
