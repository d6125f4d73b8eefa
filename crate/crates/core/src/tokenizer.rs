//! Byte-level tokenizer for toy models: ids 0..=255 are raw bytes, the six
//! harmony delimiters follow, and everything above is reserved.

use thiserror::Error;

use crate::harmony::DELIMITERS;

pub const BYTE_TOKENS: u32 = 256;
pub const START: u32 = 256;
pub const CHANNEL: u32 = 257;
pub const MESSAGE: u32 = 258;
pub const END: u32 = 259;
pub const CALL: u32 = 260;
pub const RETURN: u32 = 261;

/// Smallest vocabulary that can express every harmony stream.
pub const MIN_VOCAB: usize = 262;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenizerError {
    #[error("token {0} is reserved")]
    Reserved(u32),
    #[error("decoded bytes are not valid UTF-8")]
    Utf8,
}

/// Special id for a delimiter string, in the order of `harmony::DELIMITERS`.
pub fn special_id(delim: &str) -> Option<u32> {
    DELIMITERS.iter().position(|d| *d == delim).map(|i| BYTE_TOKENS + i as u32)
}

pub fn is_special(token: u32) -> bool {
    (BYTE_TOKENS..MIN_VOCAB as u32).contains(&token)
}

pub fn encode(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len());
    let mut rest = text;
    while !rest.is_empty() {
        let next = DELIMITERS
            .iter()
            .filter_map(|d| rest.find(d).map(|i| (i, *d)))
            .min_by_key(|(i, _)| *i);
        match next {
            Some((i, d)) => {
                out.extend(rest[..i].bytes().map(u32::from));
                out.push(special_id(d).expect("delimiter"));
                rest = &rest[i + d.len()..];
            }
            None => {
                out.extend(rest.bytes().map(u32::from));
                break;
            }
        }
    }
    out
}

pub fn decode(tokens: &[u32]) -> Result<String, TokenizerError> {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t < BYTE_TOKENS {
            bytes.push(t as u8);
        } else if is_special(t) {
            bytes.extend_from_slice(DELIMITERS[(t - BYTE_TOKENS) as usize].as_bytes());
        } else {
            return Err(TokenizerError::Reserved(t));
        }
    }
    String::from_utf8(bytes).map_err(|_| TokenizerError::Utf8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_map_to_fixed_ids() {
        assert_eq!(encode("<|start|>user<|message|>hi<|end|>"), vec![START, 117, 115, 101, 114, MESSAGE, 104, 105, END]);
        assert_eq!(encode("<|channel|><|call|><|return|>"), vec![CHANNEL, CALL, RETURN]);
        assert_eq!(decode(&[300]), Err(TokenizerError::Reserved(300)));
        assert_eq!(decode(&[0xff]), Err(TokenizerError::Utf8));
    }

    proptest! {
        #[test]
        fn round_trip(s in "(<\\|end\\|>|<\\|start\\|>|[a-z<|> é]){0,40}") {
            prop_assert_eq!(decode(&encode(&s)).unwrap(), s);
        }
    }
}
