use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
const BLANK_SYMBOL: &str = "<blank>";

/// Output symbol inventory. Id 0 is always blank; the remaining ids are
/// single characters, so tokenization is a per-character lookup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TokenInventory {
    symbols: Vec<String>,
    index: HashMap<char, usize>,
}

impl TokenInventory {
    /// Builds an inventory over `chars`, with blank prepended.
    pub fn from_chars(chars: &str) -> Result<Self> {
        let mut symbols = vec![BLANK_SYMBOL.to_string()];
        symbols.extend(chars.chars().map(String::from));
        Self::try_from(symbols)
    }

    /// Blank plus the 15 tone symbols `0`-`9`, `a`-`e`.
    pub fn tone_digits() -> Self {
        Self::from_chars("0123456789abcde").expect("static inventory")
    }

    /// Lower-case letters, space and apostrophe, padded with unused
    /// placeholder symbols up to `size` entries.
    pub fn letters_padded(size: usize) -> Self {
        let mut symbols = vec![BLANK_SYMBOL.to_string()];
        symbols.extend(" 'abcdefghijklmnopqrstuvwxyz".chars().map(String::from));
        let mut k = 0;
        while symbols.len() < size {
            symbols.push(format!("<unused{k}>"));
            k += 1;
        }
        Self::try_from(symbols).expect("static inventory")
    }

    /// Full-scale stand-in used until a corpus inventory is loaded.
    pub fn placeholder(size: usize) -> Self {
        Self::letters_padded(size)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank_id(&self) -> usize {
        BLANK
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("character {c:?} not in token inventory")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| match id {
                BLANK => Err(Error::Input("blank in label sequence".into())),
                id if id < self.len() => Ok(self.symbols[id].as_str()),
                id => Err(Error::Input(format!("token id {id} outside inventory of {}", self.len()))),
            })
            .collect()
    }

    /// Checks that `ids` is a valid blank-free label sequence.
    pub fn validate_labels(&self, ids: &[usize]) -> Result<()> {
        self.decode(ids).map(|_| ())
    }
}

impl TryFrom<Vec<String>> for TokenInventory {
    type Error = Error;

    fn try_from(symbols: Vec<String>) -> Result<Self> {
        if symbols.first().map(String::as_str) != Some(BLANK_SYMBOL) {
            return Err(Error::Config(format!("token inventory must start with {BLANK_SYMBOL}")));
        }
        let mut index = HashMap::new();
        for (id, s) in symbols.iter().enumerate().skip(1) {
            let mut chars = s.chars();
            if let (Some(c), None) = (chars.next(), chars.next()) {
                if index.insert(c, id).is_some() {
                    return Err(Error::Config(format!("duplicate symbol {s:?}")));
                }
            }
        }
        Ok(Self { symbols, index })
    }
}

impl From<TokenInventory> for Vec<String> {
    fn from(t: TokenInventory) -> Self {
        t.symbols
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let inv = TokenInventory::tone_digits();
        assert_eq!(inv.len(), 16);
        let ids = inv.encode("3a0e").unwrap();
        assert_eq!(ids, vec![4, 11, 1, 15]);
        assert_eq!(inv.decode(&ids).unwrap(), "3a0e");
        assert!(inv.encode("z").is_err());
        assert!(inv.decode(&[0]).is_err());
    }

    #[test]
    fn padded_inventory_has_requested_size() {
        let inv = TokenInventory::letters_padded(256);
        assert_eq!(inv.len(), 256);
        assert_eq!(inv.encode("a b").unwrap().len(), 3);
    }

    #[test]
    fn serializes_as_plain_list() {
        let inv = TokenInventory::tone_digits();
        let text = serde_json::to_string(&inv).unwrap();
        assert!(text.starts_with("[\"<blank>\",\"0\""));
        let back: TokenInventory = serde_json::from_str(&text).unwrap();
        assert_eq!(back, inv);
        assert!(serde_json::from_str::<TokenInventory>("[\"a\"]").is_err());
    }
}
