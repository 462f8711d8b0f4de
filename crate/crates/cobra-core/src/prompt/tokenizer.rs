//! Deterministic byte-level tokenizer with a fixed special-token table.
//!
//! Ids 0..=255 are raw bytes; special markers get ids from 256 up and are
//! recognized longest-match-first while scanning. Encoding is injective and
//! `detokenize(tokenize(text)) == text` for any UTF-8 input.

pub const USER: &str = "<|user|>";
pub const ASSISTANT: &str = "<|assistant|>";
pub const END_OF_TEXT: &str = "<|endoftext|>";

pub const USER_ID: u32 = 256;
pub const ASSISTANT_ID: u32 = 257;
pub const END_OF_TEXT_ID: u32 = 258;

/// Number of ids the tokenizer can emit; the model vocabulary must be at
/// least this large.
pub const MIN_VOCAB: usize = 259;

/// Longest first so prefixes never shadow longer markers.
const SPECIALS: [(&str, u32); 3] = [
    (END_OF_TEXT, END_OF_TEXT_ID),
    (ASSISTANT, ASSISTANT_ID),
    (USER, USER_ID),
];

pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

/// Byte-level encoding; total on arbitrary byte strings.
pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(bytes.len());
    let mut i = 0;
    'outer: while i < bytes.len() {
        for (marker, id) in SPECIALS {
            let m = marker.as_bytes();
            if bytes[i..].starts_with(m) {
                ids.push(id);
                i += m.len();
                continue 'outer;
            }
        }
        ids.push(bytes[i] as u32);
        i += 1;
    }
    ids
}

/// Exact inverse of [`tokenize_bytes`]; unknown ids map to the replacement
/// marker's UTF-8 bytes.
pub fn detokenize_bytes(ids: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            USER_ID => out.extend_from_slice(USER.as_bytes()),
            ASSISTANT_ID => out.extend_from_slice(ASSISTANT.as_bytes()),
            END_OF_TEXT_ID => out.extend_from_slice(END_OF_TEXT.as_bytes()),
            _ => out.extend_from_slice("\u{FFFD}".as_bytes()),
        }
    }
    out
}

/// Inverse of [`tokenize`]; unknown ids render as the replacement marker.
pub fn detokenize(ids: &[u32]) -> String {
    let mut bytes: Vec<u8> = Vec::with_capacity(ids.len());
    let mut out = String::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        }
    };
    for &id in ids {
        if id < 256 {
            bytes.push(id as u8);
            continue;
        }
        flush(&mut bytes, &mut out);
        match id {
            USER_ID => out.push_str(USER),
            ASSISTANT_ID => out.push_str(ASSISTANT),
            END_OF_TEXT_ID => out.push_str(END_OF_TEXT),
            _ => out.push('\u{FFFD}'),
        }
    }
    flush(&mut bytes, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_single_ids() {
        assert_eq!(tokenize(END_OF_TEXT), vec![END_OF_TEXT_ID]);
        assert_eq!(tokenize(USER), vec![USER_ID]);
        assert_eq!(tokenize(ASSISTANT), vec![ASSISTANT_ID]);
    }

    #[test]
    fn plain_ascii_maps_to_byte_ids() {
        assert_eq!(tokenize("ab"), vec![97, 98]);
        assert_eq!(tokenize("In:"), vec![73, 110, 58]);
    }

    #[test]
    fn roundtrip_simple() {
        for s in ["hello world", "", "In:x\nOut:", "<|user|>\nhi<|endoftext|>\n"] {
            assert_eq!(detokenize(&tokenize(s)), s);
        }
    }

    #[test]
    fn all_256_byte_tokens_roundtrip() {
        // Exhaustive sweep over the byte-level path.
        for b in 0..=255u32 {
            assert_eq!(tokenize_bytes(&detokenize_bytes(&[b])), vec![b]);
        }
        // And as one long string of every byte value.
        let all: Vec<u32> = (0..256).collect();
        assert_eq!(tokenize_bytes(&detokenize_bytes(&all)), all);
        // The string path stays lossless wherever UTF-8 can express the id.
        for b in 0..128u32 {
            let s = detokenize(&[b]);
            assert_eq!(tokenize(&s), vec![b]);
        }
    }

    #[test]
    fn byte_roundtrip_survives_marker_fragments() {
        let mixed: Vec<u8> = [
            b"half <|user".as_slice(),
            &[0xC0, 0xFF, 0x80],
            b"|><|endoftext|>tail",
        ]
        .concat();
        assert_eq!(detokenize_bytes(&tokenize_bytes(&mixed)), mixed);
    }

    #[test]
    fn unknown_id_becomes_replacement_marker() {
        let s = detokenize(&[97, 9999, 98]);
        assert_eq!(s, "a\u{FFFD}b");
    }

    #[test]
    fn partial_marker_is_plain_text() {
        let ids = tokenize("<|user|");
        assert_eq!(ids.len(), 7);
        assert!(ids.iter().all(|&i| i < 256));
        assert_eq!(detokenize(&ids), "<|user|");
    }

    #[test]
    fn multibyte_utf8_roundtrips() {
        for s in ["héllo", "日本語のテスト", "emoji 🐍 and snake"] {
            assert_eq!(detokenize(&tokenize(s)), s);
        }
    }
}
