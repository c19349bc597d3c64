//! Byte-level tokenizer. Token id = byte value, and the NUL byte doubles as
//! the end-of-sequence marker, so a 256-entry vocabulary covers any UTF-8
//! text in any language.

use crate::error::{Error, Result};

pub const EOS: u32 = 0;

#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB: usize = 256;

    /// Encodes text as bytes, dropping NUL bytes which are reserved for EOS.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().filter(|&b| b != 0).map(u32::from).collect()
    }

    /// Encodes a training target: text bytes followed by EOS.
    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    /// Decodes ids up to the first EOS. Invalid UTF-8 is replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == EOS {
                break;
            }
            let b = u8::try_from(id).map_err(|_| Error::OutOfVocab { id, vocab: Self::VOCAB })?;
            bytes.push(b);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multilingual_round_trip() {
        let tok = ByteTokenizer;
        for text in ["a dog on a sofa", "ein Hund auf dem Sofa", "沙发上的狗", "สุนัข"] {
            assert_eq!(tok.decode(&tok.encode(text)).unwrap(), text);
        }
    }

    #[test]
    fn target_ends_with_eos_and_decode_stops_there() {
        let tok = ByteTokenizer;
        let ids = tok.encode_target("hi");
        assert_eq!(ids, vec![104, 105, EOS]);
        assert_eq!(tok.decode(&[104, EOS, 105]).unwrap(), "h");
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        assert!(ByteTokenizer.decode(&[300]).is_err());
    }
}
