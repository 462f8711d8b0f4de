//! Prompt construction: byte-exact chat and base templates, OCR-token
//! ordering, and the tokenizer. Rendered strings are pinned by golden files
//! in the test fixtures.

pub mod tokenizer;

pub use tokenizer::{detokenize, tokenize};

use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    User,
    Assistant,
}

/// Where the OCR reference string goes relative to the question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OcrOrdering {
    /// "Reference OCR token: ...\nQuestion"
    First,
    /// "Question\nReference OCR token: ..."
    Last,
    #[default]
    None,
}

impl std::str::FromStr for OcrOrdering {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "first" => Ok(Self::First),
            "last" => Ok(Self::Last),
            "none" => Ok(Self::None),
            other => Err(ModelError::Config(format!("unknown ocr ordering {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Conversation {
    pub turns: Vec<(Role, String)>,
}

impl Conversation {
    pub fn single(question: impl Into<String>) -> Self {
        Self {
            turns: vec![(Role::User, question.into())],
        }
    }

    pub fn push_user(&mut self, text: impl Into<String>) {
        self.turns.push((Role::User, text.into()));
    }

    pub fn push_assistant(&mut self, text: impl Into<String>) {
        self.turns.push((Role::Assistant, text.into()));
    }

    fn check_alternation(&self) -> Result<(), ModelError> {
        if self.turns.is_empty() {
            return Err(ModelError::Precondition("conversation is empty".into()));
        }
        for (i, (role, _)) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if *role != expected {
                return Err(ModelError::Precondition(format!(
                    "turn {i} must be {expected:?}; conversations start with the user and alternate"
                )));
            }
        }
        Ok(())
    }
}

/// Chat-tuned template. A final user turn leaves the assistant header open
/// for generation.
pub fn render_chat(conv: &Conversation) -> Result<String, ModelError> {
    conv.check_alternation()?;
    let mut out = String::new();
    for (role, text) in &conv.turns {
        match role {
            Role::User => {
                out.push_str(tokenizer::USER);
                out.push('\n');
                out.push_str(text);
                out.push_str(tokenizer::END_OF_TEXT);
                out.push('\n');
            }
            Role::Assistant => {
                out.push_str(tokenizer::ASSISTANT);
                out.push('\n');
                out.push_str(text);
                out.push_str(tokenizer::END_OF_TEXT);
                out.push('\n');
            }
        }
    }
    if matches!(conv.turns.last(), Some((Role::User, _))) {
        out.push_str(tokenizer::ASSISTANT);
        out.push('\n');
    }
    Ok(out)
}

/// Template for backbones that were never chat-tuned. A final user turn
/// leaves a bare "Out:" for generation.
pub fn render_base(conv: &Conversation) -> Result<String, ModelError> {
    conv.check_alternation()?;
    let mut out = String::new();
    for (role, text) in &conv.turns {
        match role {
            Role::User => {
                out.push_str("In:");
                out.push_str(text);
                out.push('\n');
            }
            Role::Assistant => {
                out.push_str("Out:");
                out.push_str(text);
                out.push_str(tokenizer::END_OF_TEXT);
                out.push('\n');
            }
        }
    }
    if matches!(conv.turns.last(), Some((Role::User, _))) {
        out.push_str("Out:");
    }
    Ok(out)
}

/// Parse a chat rendering back into the turn list; inverse of [`render_chat`].
pub fn parse_chat(s: &str) -> Result<Conversation, ModelError> {
    let mut conv = Conversation::default();
    let mut rest = s;
    loop {
        if rest.is_empty() {
            break;
        }
        let (role, after) = if let Some(a) = rest.strip_prefix(tokenizer::USER) {
            (Role::User, a)
        } else if let Some(a) = rest.strip_prefix(tokenizer::ASSISTANT) {
            (Role::Assistant, a)
        } else {
            return Err(ModelError::Precondition(format!(
                "expected a role marker, found {:?}",
                &rest[..rest.len().min(16)]
            )));
        };
        let after = after.strip_prefix('\n').ok_or_else(|| {
            ModelError::Precondition("role marker must be followed by a newline".into())
        })?;
        // A trailing assistant header with no payload means "generate here".
        if role == Role::Assistant && after.is_empty() {
            break;
        }
        let end = after.find(tokenizer::END_OF_TEXT).ok_or_else(|| {
            ModelError::Precondition("turn payload missing its end-of-text marker".into())
        })?;
        conv.turns.push((role, after[..end].to_string()));
        rest = after[end + tokenizer::END_OF_TEXT.len()..]
            .strip_prefix('\n')
            .ok_or_else(|| {
                ModelError::Precondition("end-of-text must be followed by a newline".into())
            })?;
    }
    conv.check_alternation()?;
    Ok(conv)
}

/// Parse a base rendering back into the turn list; inverse of [`render_base`].
pub fn parse_base(s: &str) -> Result<Conversation, ModelError> {
    let mut conv = Conversation::default();
    let mut rest = s;
    loop {
        if rest.is_empty() {
            break;
        }
        if let Some(after) = rest.strip_prefix("In:") {
            let end = after.find('\n').ok_or_else(|| {
                ModelError::Precondition("instruction line must end with a newline".into())
            })?;
            conv.turns.push((Role::User, after[..end].to_string()));
            rest = &after[end + 1..];
        } else if let Some(after) = rest.strip_prefix("Out:") {
            if after.is_empty() {
                break;
            }
            let end = after.find(tokenizer::END_OF_TEXT).ok_or_else(|| {
                ModelError::Precondition("answer missing its end-of-text marker".into())
            })?;
            conv.turns.push((Role::Assistant, after[..end].to_string()));
            rest = after[end + tokenizer::END_OF_TEXT.len()..]
                .strip_prefix('\n')
                .ok_or_else(|| {
                    ModelError::Precondition("end-of-text must be followed by a newline".into())
                })?;
        } else {
            return Err(ModelError::Precondition(format!(
                "expected In:/Out:, found {:?}",
                &rest[..rest.len().min(16)]
            )));
        }
    }
    conv.check_alternation()?;
    Ok(conv)
}

/// Parse line-delimited role-tagged records ("user: ..." / "assistant: ...")
/// into a conversation. Blank lines and `#` comments are skipped. Escaped
/// "\n" sequences in a payload become real newlines.
pub fn conversation_from_records(text: &str) -> Result<Conversation, ModelError> {
    let mut conv = Conversation::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (role, payload) = if let Some(p) = line.strip_prefix("user:") {
            (Role::User, p)
        } else if let Some(p) = line.strip_prefix("assistant:") {
            (Role::Assistant, p)
        } else {
            return Err(ModelError::Precondition(format!(
                "line {}: expected a 'user:' or 'assistant:' record",
                lineno + 1
            )));
        };
        let payload = payload.strip_prefix(' ').unwrap_or(payload);
        conv.turns.push((role, payload.replace("\\n", "\n")));
    }
    conv.check_alternation()?;
    Ok(conv)
}

/// Inverse of [`conversation_from_records`].
pub fn conversation_to_records(conv: &Conversation) -> String {
    let mut out = String::new();
    for (role, text) in &conv.turns {
        let tag = match role {
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        out.push_str(&format!("{tag}: {}\n", text.replace('\n', "\\n")));
    }
    out
}

/// Compose the instruction string from a question and an OCR reference,
/// with exactly one newline between the two segments.
pub fn apply_ocr_ordering(question: &str, ocr_tokens: &str, ordering: OcrOrdering) -> String {
    match ordering {
        OcrOrdering::First => format!("Reference OCR token: {ocr_tokens}\n{question}"),
        OcrOrdering::Last => format!("{question}\nReference OCR token: {ocr_tokens}"),
        OcrOrdering::None => question.to_string(),
    }
}

/// Token ids plus per-position answer flags for one training conversation.
/// The final turn must be an assistant answer; its tokens (and the closing
/// end-of-text) are the flagged span.
pub fn training_ids_chat(conv: &Conversation) -> Result<(Vec<u32>, Vec<bool>), ModelError> {
    conv.check_alternation()?;
    if !matches!(conv.turns.last(), Some((Role::Assistant, _))) {
        return Err(ModelError::Precondition(
            "training conversations end with an assistant answer".into(),
        ));
    }
    let mut prompt_conv = conv.clone();
    let (_, answer) = prompt_conv.turns.pop().unwrap();
    let prompt = render_chat(&prompt_conv)?;
    let mut ids = tokenize(&prompt);
    let prompt_len = ids.len();
    let answer_ids = tokenize(&format!("{answer}{}", tokenizer::END_OF_TEXT));
    ids.extend(&answer_ids);
    let mut flags = vec![false; ids.len()];
    for f in flags.iter_mut().skip(prompt_len) {
        *f = true;
    }
    Ok((ids, flags))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_turn_chat_template_is_exact() {
        let conv = Conversation::single("hi");
        assert_eq!(
            render_chat(&conv).unwrap(),
            "<|user|>\nhi<|endoftext|>\n<|assistant|>\n"
        );
    }

    #[test]
    fn empty_instruction_renders_with_empty_payload() {
        let conv = Conversation::single("");
        assert_eq!(
            render_chat(&conv).unwrap(),
            "<|user|>\n<|endoftext|>\n<|assistant|>\n"
        );
    }

    #[test]
    fn assistant_first_is_an_ordering_error() {
        let conv = Conversation {
            turns: vec![(Role::Assistant, "hello".into())],
        };
        assert!(render_chat(&conv).is_err());
        assert!(render_base(&conv).is_err());
    }

    #[test]
    fn two_turn_chat_roundtrips_through_the_parser() {
        let mut conv = Conversation::single("What is in the image?");
        conv.push_assistant("A dog on a bench.");
        conv.push_user("What color is it?");
        let rendered = render_chat(&conv).unwrap();
        let parsed = parse_chat(&rendered).unwrap();
        assert_eq!(parsed, conv);
    }

    #[test]
    fn single_turn_base_template_is_exact() {
        let conv = Conversation::single("describe the scene");
        assert_eq!(render_base(&conv).unwrap(), "In:describe the scene\nOut:");
    }

    #[test]
    fn base_two_turn_form_is_exact() {
        let mut conv = Conversation::single("X1");
        conv.push_assistant("A1");
        conv.push_user("X2");
        assert_eq!(
            render_base(&conv).unwrap(),
            "In:X1\nOut:A1<|endoftext|>\nIn:X2\nOut:"
        );
    }

    #[test]
    fn base_roundtrips_through_the_parser() {
        let mut conv = Conversation::single("first q");
        conv.push_assistant("first a");
        conv.push_user("second q");
        let parsed = parse_base(&render_base(&conv).unwrap()).unwrap();
        assert_eq!(parsed, conv);
    }

    #[test]
    fn renderers_agree_on_turn_structure() {
        let mut conv = Conversation::single("q1");
        conv.push_assistant("a1");
        conv.push_user("q2");
        let chat = render_chat(&conv).unwrap();
        let base = render_base(&conv).unwrap();
        assert_eq!(chat.matches("q1").count(), base.matches("q1").count());
        assert_eq!(chat.matches("a1").count(), base.matches("a1").count());
        assert_eq!(chat.matches("q2").count(), base.matches("q2").count());
    }

    #[test]
    fn ocr_first_matches_the_published_format() {
        let s = apply_ocr_ordering("What is written?", "STOP", OcrOrdering::First);
        assert_eq!(s, "Reference OCR token: STOP\nWhat is written?");
    }

    #[test]
    fn ocr_none_returns_question_unchanged() {
        let q = "What is written?";
        assert_eq!(apply_ocr_ordering(q, "STOP", OcrOrdering::None), q);
    }

    #[test]
    fn ocr_orderings_are_segment_reversals() {
        let first = apply_ocr_ordering("Q text", "OCR text", OcrOrdering::First);
        let last = apply_ocr_ordering("Q text", "OCR text", OcrOrdering::Last);
        let mut fb: Vec<u8> = first.bytes().collect();
        let mut lb: Vec<u8> = last.bytes().collect();
        fb.sort_unstable();
        lb.sort_unstable();
        assert_eq!(fb, lb, "same byte multiset");
        assert_ne!(first, last);
        let fseg: Vec<&str> = first.split('\n').collect();
        let lseg: Vec<&str> = last.split('\n').collect();
        assert_eq!(fseg[0], lseg[1]);
        assert_eq!(fseg[1], lseg[0]);
    }

    #[test]
    fn record_files_roundtrip() {
        let text = "# a comment\nuser: What is shown?\nassistant: A dog.\\nOn a bench.\nuser: Where?\n";
        let conv = conversation_from_records(text).unwrap();
        assert_eq!(conv.turns.len(), 3);
        assert_eq!(conv.turns[1].1, "A dog.\nOn a bench.");
        let records = conversation_to_records(&conv);
        let back = conversation_from_records(&records).unwrap();
        assert_eq!(back, conv);
    }

    #[test]
    fn record_files_reject_untagged_lines() {
        assert!(conversation_from_records("hello\n").is_err());
        assert!(conversation_from_records("assistant: answer first\n").is_err());
    }

    #[test]
    fn training_ids_flag_exactly_the_answer_span() {
        let mut conv = Conversation::single("What color is the sky?");
        conv.push_assistant("blue");
        let (ids, flags) = training_ids_chat(&conv).unwrap();
        let answer_tokens = tokenize(&format!("blue{}", tokenizer::END_OF_TEXT));
        let flagged: usize = flags.iter().filter(|&&f| f).count();
        assert_eq!(flagged, answer_tokens.len());
        // Flags cover a contiguous suffix.
        let first = flags.iter().position(|&f| f).unwrap();
        assert!(flags[first..].iter().all(|&f| f));
        assert_eq!(&ids[first..], &answer_tokens[..]);
    }
}
