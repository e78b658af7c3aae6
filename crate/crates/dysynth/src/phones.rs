//! Phoneme inventory, pause symbol and the small grapheme-to-phoneme lexicon.
//!
//! The inventory is a closed ARPAbet subset plus one reserved pause token.
//! Alignment files label silence segments `"sp"`; in phoneme sequences the
//! same event is the `PAUSE` token. Both spellings map to the same vocabulary
//! id.

use crate::{Error, Result};

/// Reserved pause token in phoneme sequences.
pub const PAUSE: &str = "PAU";
/// Silence label used by alignment files.
pub const SILENCE: &str = "sp";

/// Closed phoneme inventory. Index order is the model vocabulary; `PAU` is id 0.
pub const INVENTORY: &[&str] = &[
    PAUSE, "AA", "AE", "AH", "AO", "AW", "AY", "B", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "K", "L", "M", "N", "OW", "P", "R", "S", "T", "UH", "UW", "V", "W", "Z",
];

/// Phonemes treated as voiced when generating toy prosody targets.
pub const VOICED: &[&str] = &[
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "D", "DH", "EH", "ER", "EY", "G", "IH", "IY", "L",
    "M", "N", "OW", "R", "UH", "UW", "V", "W", "Z",
];

pub fn vocab_size() -> usize {
    INVENTORY.len()
}

/// Vocabulary id of a phoneme symbol; accepts the alignment silence spelling.
pub fn phone_id(symbol: &str) -> Result<usize> {
    let symbol = if symbol == SILENCE { PAUSE } else { symbol };
    INVENTORY
        .iter()
        .position(|&p| p == symbol)
        .ok_or_else(|| Error::UnknownPhoneme(symbol.to_string()))
}

pub fn is_pause(symbol: &str) -> bool {
    symbol == PAUSE || symbol == SILENCE
}

pub fn is_voiced(symbol: &str) -> bool {
    VOICED.contains(&symbol)
}

/// Built-in pronunciation lexicon for the toy corpus and for text input.
pub const LEXICON: &[(&str, &[&str])] = &[
    ("a", &["AH"]),
    ("and", &["AE", "N", "D"]),
    ("bad", &["B", "AE", "D"]),
    ("ball", &["B", "AO", "L"]),
    ("blue", &["B", "L", "UW"]),
    ("cat", &["K", "AE", "T"]),
    ("dog", &["D", "AO", "G"]),
    ("fast", &["F", "AE", "S", "T"]),
    ("good", &["G", "UH", "D"]),
    ("here", &["HH", "IY", "R"]),
    ("like", &["L", "AY", "K"]),
    ("man", &["M", "AE", "N"]),
    ("moon", &["M", "UW", "N"]),
    ("now", &["N", "AW"]),
    ("play", &["P", "L", "EY"]),
    ("ran", &["R", "AE", "N"]),
    ("red", &["R", "EH", "D"]),
    ("say", &["S", "EY"]),
    ("see", &["S", "IY"]),
    ("slow", &["S", "L", "OW"]),
    ("speak", &["S", "P", "IY", "K"]),
    ("sun", &["S", "AH", "N"]),
    ("talk", &["T", "AO", "K"]),
    ("the", &["DH", "AH"]),
    ("there", &["DH", "EH", "R"]),
    ("to", &["T", "UW"]),
    ("walk", &["W", "AO", "K"]),
    ("we", &["W", "IY"]),
    ("woman", &["W", "UH", "M", "AH", "N"]),
    ("would", &["W", "UH", "D"]),
];

pub fn lexicon_lookup(word: &str) -> Option<&'static [&'static str]> {
    LEXICON
        .iter()
        .find(|(w, _)| *w == word)
        .map(|(_, phones)| *phones)
}

/// Crude per-letter fallback for words outside the lexicon.
fn letter_phone(c: char) -> Option<&'static str> {
    Some(match c.to_ascii_lowercase() {
        'a' => "AE",
        'b' => "B",
        'c' | 'k' | 'q' => "K",
        'd' => "D",
        'e' => "EH",
        'f' => "F",
        'g' | 'j' => "G",
        'h' => "HH",
        'i' => "IH",
        'l' => "L",
        'm' => "M",
        'n' => "N",
        'o' => "OW",
        'p' => "P",
        'r' => "R",
        's' | 'x' => "S",
        't' => "T",
        'u' => "AH",
        'v' => "V",
        'w' => "W",
        'y' => "IY",
        'z' => "Z",
        _ => return None,
    })
}

/// Convert text to phonemes via lexicon lookup.
///
/// Unknown words fail unless `letter_fallback` is set, in which case each
/// mappable letter contributes one phoneme.
pub fn text_to_phones(text: &str, letter_fallback: bool) -> Result<Vec<Vec<String>>> {
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        let word: String = raw
            .chars()
            .filter(|c| c.is_alphabetic())
            .flat_map(|c| c.to_lowercase())
            .collect();
        if word.is_empty() {
            continue;
        }
        if let Some(phones) = lexicon_lookup(&word) {
            words.push(phones.iter().map(|p| p.to_string()).collect());
        } else if letter_fallback {
            let phones: Vec<String> = word
                .chars()
                .filter_map(letter_phone)
                .map(|p| p.to_string())
                .collect();
            if phones.is_empty() {
                return Err(Error::UnknownWord(word));
            }
            words.push(phones);
        } else {
            return Err(Error::UnknownWord(word));
        }
    }
    Ok(words)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventory_is_closed_and_unique() {
        for (i, a) in INVENTORY.iter().enumerate() {
            for b in &INVENTORY[i + 1..] {
                assert_ne!(a, b);
            }
        }
        for (_, phones) in LEXICON {
            for p in *phones {
                assert!(phone_id(p).is_ok(), "lexicon phone {p} not in inventory");
            }
        }
    }

    #[test]
    fn silence_maps_to_pause_id() {
        assert_eq!(phone_id(SILENCE).unwrap(), phone_id(PAUSE).unwrap());
        assert_eq!(phone_id(PAUSE).unwrap(), 0);
    }

    #[test]
    fn text_lookup_and_fallback() {
        let phones = text_to_phones("Bad and good", false).unwrap();
        assert_eq!(phones.len(), 3);
        assert_eq!(phones[0], vec!["B", "AE", "D"]);
        assert!(text_to_phones("zyzzyva walks", false).is_err());
        assert!(text_to_phones("zyzzyva", true).is_ok());
    }
}
