//! Byte-level tokenizer: one token per UTF-8 byte plus three reserved
//! specials above the byte range.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Token ids for `text` and, for every character, the index of the token
/// holding its first byte.
pub fn tokenize(text: &str) -> (Vec<u32>, Vec<usize>) {
    let ids = text.bytes().map(u32::from).collect();
    let char_to_token = text.char_indices().map(|(byte, _)| byte).collect();
    (ids, char_to_token)
}

/// Inverse of [`tokenize`]. Special tokens are dropped.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Character index of a byte offset inside `text`.
pub fn char_index_of_byte(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty() {
        assert_eq!(tokenize(""), (vec![], vec![]));
    }

    #[test]
    fn ascii_word() {
        let (ids, map) = tokenize("Therefore");
        assert_eq!(ids.len(), 9);
        assert_eq!(map, (0..9).collect::<Vec<_>>());
        assert_eq!(detokenize(&ids), "Therefore");
    }

    #[test]
    fn multibyte_characters_map_to_first_byte() {
        let (ids, map) = tokenize("a–b");
        assert_eq!(ids.len(), 5);
        assert_eq!(map, vec![0, 1, 4]);
    }

    proptest! {
        #[test]
        fn round_trips(text in "\\PC{0,40}") {
            let (ids, _) = tokenize(&text);
            prop_assert_eq!(detokenize(&ids), text);
        }

        #[test]
        fn char_spans_contain_their_character(text in "\\PC{1,40}") {
            let (ids, map) = tokenize(&text);
            prop_assert_eq!(map.len(), text.chars().count());
            for (i, (byte, ch)) in text.char_indices().enumerate() {
                let tok = map[i];
                // The token's byte span [tok, tok+1) lies inside the char's bytes.
                prop_assert!(tok >= byte && tok < byte + ch.len_utf8());
                prop_assert!(tok < ids.len());
                if i > 0 {
                    prop_assert!(map[i - 1] < tok);
                }
            }
        }
    }
}
