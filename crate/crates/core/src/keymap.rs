//! Keyboard layouts and the pinyin-to-keystroke mapping.
//!
//! A [`KeyLayout`] maps every lowercase letter onto a key symbol. On the
//! full keyboard the mapping is the identity; on the phone keypad letters
//! collapse onto the digits `2`..`9`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const KEYPAD: [(char, &str); 8] = [
    ('2', "abc"),
    ('3', "def"),
    ('4', "ghi"),
    ('5', "jkl"),
    ('6', "mno"),
    ('7', "pqrs"),
    ('8', "tuv"),
    ('9', "wxyz"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KeyLayout {
    #[serde(rename = "26")]
    TwentySixKey,
    #[serde(rename = "9")]
    NineKey,
}

impl KeyLayout {
    pub fn name(self) -> &'static str {
        match self {
            KeyLayout::TwentySixKey => "26",
            KeyLayout::NineKey => "9",
        }
    }

    /// Key symbol produced by a lowercase letter.
    pub fn key_of(self, letter: char) -> Option<char> {
        if !letter.is_ascii_lowercase() {
            return None;
        }
        match self {
            KeyLayout::TwentySixKey => Some(letter),
            KeyLayout::NineKey => KEYPAD
                .iter()
                .find(|(_, group)| group.contains(letter))
                .map(|&(digit, _)| digit),
        }
    }

    /// Letters that share a key. Empty for symbols outside the alphabet.
    pub fn letters_of(self, key: char) -> &'static str {
        const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";
        match self {
            KeyLayout::TwentySixKey => match LETTERS.find(key) {
                Some(i) => &LETTERS[i..i + 1],
                None => "",
            },
            KeyLayout::NineKey => KEYPAD
                .iter()
                .find(|&&(digit, _)| digit == key)
                .map(|&(_, group)| group)
                .unwrap_or(""),
        }
    }

    pub fn is_key(self, key: char) -> bool {
        !self.letters_of(key).is_empty()
    }

    /// All key symbols in keypad order.
    pub fn keys(self) -> Vec<char> {
        match self {
            KeyLayout::TwentySixKey => ('a'..='z').collect(),
            KeyLayout::NineKey => KEYPAD.iter().map(|&(d, _)| d).collect(),
        }
    }
}

impl fmt::Display for KeyLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KeyLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "26" | "26-key" | "qwerty" => Ok(KeyLayout::TwentySixKey),
            "9" | "9-key" | "t9" => Ok(KeyLayout::NineKey),
            other => Err(Error::Config(format!("unknown layout {other:?}, expected 26 or 9"))),
        }
    }
}

/// Raw keystrokes as typed, validated against a layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeySequence {
    symbols: Vec<char>,
    layout: KeyLayout,
}

impl KeySequence {
    /// Parses typed keys. Uppercase letters are lowered; the apostrophe
    /// separator used when displaying segmentations is rejected.
    pub fn parse(text: &str, layout: KeyLayout) -> Result<Self> {
        let mut symbols = Vec::with_capacity(text.len());
        for c in text.chars() {
            let c = c.to_ascii_lowercase();
            if !layout.is_key(c) {
                return Err(Error::InvalidKey {
                    key: c,
                    layout: layout.name(),
                });
            }
            symbols.push(c);
        }
        Ok(KeySequence { symbols, layout })
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn layout(&self) -> KeyLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn starts_with(&self, other: &KeySequence) -> bool {
        self.layout == other.layout && self.symbols.starts_with(&other.symbols)
    }
}

impl fmt::Display for KeySequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.symbols.iter().try_for_each(|c| write!(f, "{c}"))
    }
}

/// Maps pinyin chunks back onto the keys that type them.
pub fn p2i<S: AsRef<str>>(chunks: &[S], layout: KeyLayout) -> Result<KeySequence> {
    let mut symbols = Vec::new();
    for chunk in chunks {
        let chunk = chunk.as_ref();
        for letter in chunk.chars() {
            let key = layout
                .key_of(letter.to_ascii_lowercase())
                .ok_or_else(|| Error::InvalidChunk {
                    chunk: chunk.to_string(),
                    reason: format!("{letter:?} is not a letter a-z"),
                })?;
            symbols.push(key);
        }
    }
    Ok(KeySequence { symbols, layout })
}

/// Whether a partial segmentation restores to a prefix of `x`.
pub fn is_input_prefix<S: AsRef<str>>(partial: &[S], x: &KeySequence) -> Result<bool> {
    let restored = p2i(partial, x.layout)?;
    Ok(x.starts_with(&restored))
}

/// Whether a complete segmentation restores to exactly `x`.
pub fn restores_exactly<S: AsRef<str>>(chunks: &[S], x: &KeySequence) -> Result<bool> {
    Ok(p2i(chunks, x.layout)? == *x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keys(s: &str, layout: KeyLayout) -> KeySequence {
        KeySequence::parse(s, layout).unwrap()
    }

    #[test]
    fn full_keyboard_is_identity() {
        let out = p2i(&["wo", "ban"], KeyLayout::TwentySixKey).unwrap();
        assert_eq!(out.to_string(), "woban");
    }

    #[test]
    fn keypad_groups() {
        let out = p2i(&["wo"], KeyLayout::NineKey).unwrap();
        assert_eq!(out.to_string(), "96");
        let sentence = ["wo", "ai", "zi", "ran", "yu", "yan", "chu", "li"];
        let out = p2i(&sentence, KeyLayout::NineKey).unwrap();
        assert_eq!(out.to_string(), "9624947269892624854");
        for (digit, group) in KEYPAD {
            for l in group.chars() {
                assert_eq!(KeyLayout::NineKey.key_of(l), Some(digit));
            }
        }
        for l in 'a'..='z' {
            assert!(KeyLayout::NineKey.key_of(l).is_some());
        }
    }

    #[test]
    fn empty_chunks() {
        let empty: [&str; 0] = [];
        assert!(p2i(&empty, KeyLayout::NineKey).unwrap().is_empty());
        assert!(is_input_prefix(&empty, &keys("woban", KeyLayout::TwentySixKey)).unwrap());
    }

    #[test]
    fn rejects_non_letters() {
        assert!(matches!(
            p2i(&["w'o"], KeyLayout::TwentySixKey),
            Err(Error::InvalidChunk { .. })
        ));
        assert!(p2i(&["wo2"], KeyLayout::NineKey).is_err());
        assert!(KeySequence::parse("wo'ban", KeyLayout::TwentySixKey).is_err());
        assert!(KeySequence::parse("961", KeyLayout::NineKey).is_err());
    }

    #[test]
    fn uppercase_is_lowered() {
        assert_eq!(keys("WoBan", KeyLayout::TwentySixKey).to_string(), "woban");
    }

    #[test]
    fn prefix_check() {
        let x = keys("woban", KeyLayout::TwentySixKey);
        assert!(is_input_prefix(&["wo", "ba"], &x).unwrap());
        assert!(!is_input_prefix(&["wo", "ba", "ba"], &x).unwrap());
        assert!(restores_exactly(&["wo", "ban"], &x).unwrap());
        assert!(!restores_exactly(&["wo", "ba"], &x).unwrap());
    }

    fn chunk_strategy() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-z]{0,5}", 0..6)
    }

    proptest! {
        #[test]
        fn p2i_is_a_homomorphism(a in chunk_strategy(), b in chunk_strategy(), nine in any::<bool>()) {
            let layout = if nine { KeyLayout::NineKey } else { KeyLayout::TwentySixKey };
            let joined: Vec<String> = a.iter().chain(b.iter()).cloned().collect();
            let mut expected = p2i(&a, layout).unwrap().symbols().to_vec();
            expected.extend_from_slice(p2i(&b, layout).unwrap().symbols());
            let whole = p2i(&joined, layout).unwrap();
            prop_assert_eq!(whole.symbols(), &expected[..]);
            let total: usize = joined.iter().map(|c| c.len()).sum();
            prop_assert_eq!(p2i(&joined, layout).unwrap().len(), total);
        }

        #[test]
        fn prefix_closed(chunks in chunk_strategy(), target in "[a-z]{1,12}") {
            let x = p2i(&[target.as_str()], KeyLayout::NineKey).unwrap();
            if is_input_prefix(&chunks, &x).unwrap() {
                for cut in 0..=chunks.len() {
                    prop_assert!(is_input_prefix(&chunks[..cut], &x).unwrap());
                }
            }
        }
    }
}
