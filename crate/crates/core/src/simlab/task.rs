//! Token layout, prompts and the answer checker of the synthetic addition task.

use crate::trace::{TokenId, Vocabulary};

pub const DIGITS: u32 = 10;
pub const OP: TokenId = 10;
pub const EQ: TokenId = 11;
/// Default answer separator.
pub const SEP: TokenId = 12;
pub const END: TokenId = 13;
/// Alternative separator, accepted only when no pillar is planted.
pub const MARKER: TokenId = 14;
pub const STYLE_START: TokenId = 15;
pub const STYLE_SURFACES: [&str; 16] = [
    "\n\n", "$", "\\", "frac", "So", "Wait", "**", "###", "{", "}", "Let", "Then", "\n", "(", ")", "Now",
];
pub const CONTENT_START: TokenId = STYLE_START + STYLE_SURFACES.len() as TokenId;
/// Reserved ids at the top of the vocabulary that neither policy ever emits.
pub const PHANTOMS: usize = 6;
pub const MIN_VOCAB: usize = CONTENT_START as usize + 2 + PHANTOMS;

const CONTENT_WORDS: [&str; 24] = [
    "the", "sum", "value", "is", "we", "add", "digits", "of", "carry", "result", "first", "second", "number",
    "gives", "check", "total", "and", "to", "get", "answer", "here", "mod", "ten", "it",
];

/// Default planted style tokens.
pub fn default_planted() -> Vec<TokenId> {
    (STYLE_START..STYLE_START + 12).collect()
}

pub fn is_digit(t: TokenId) -> bool {
    t < DIGITS
}

pub fn style_tokens() -> std::ops::Range<TokenId> {
    STYLE_START..CONTENT_START
}

pub fn content_tokens(vocab_size: usize) -> std::ops::Range<TokenId> {
    CONTENT_START..(vocab_size - PHANTOMS) as TokenId
}

pub fn phantom_tokens(vocab_size: usize) -> std::ops::Range<TokenId> {
    (vocab_size - PHANTOMS) as TokenId..vocab_size as TokenId
}

pub fn vocabulary(vocab_size: usize) -> Vocabulary {
    let mut names: Vec<String> = (0..DIGITS).map(|d| d.to_string()).collect();
    names.extend(["+", "=", "\\boxed", "<|end|>", "####"].map(String::from));
    names.extend(STYLE_SURFACES.map(String::from));
    for (i, _) in content_tokens(vocab_size).enumerate() {
        names.push(match CONTENT_WORDS.get(i) {
            Some(w) => w.to_string(),
            None => format!("w{i}"),
        });
    }
    for i in 0..PHANTOMS {
        names.push(format!("<|reserved_{i}|>"));
    }
    Vocabulary::new(names)
}

/// `⟨d₁, +, d₂, =⟩` for prompt `id`.
pub fn prompt_tokens(id: u64) -> [TokenId; 4] {
    [((id / 10) % 10) as TokenId, OP, (id % 10) as TokenId, EQ]
}

/// The correct answer digit, `(d₁ + d₂) mod 10`.
pub fn answer_digit(prompt: &[TokenId]) -> TokenId {
    (prompt[0] + prompt[2]) % DIGITS
}

/// Accepts exactly the completions whose first separator is followed by the
/// answer digit and then end-of-sequence, with nothing after.
pub fn check(prompt: &[TokenId], completion: &[TokenId], separators: &[TokenId]) -> bool {
    let Some(i) = completion.iter().position(|t| separators.contains(t)) else {
        return false;
    };
    completion.len() == i + 3 && completion[i + 1] == answer_digit(prompt) && completion[i + 2] == END
}
