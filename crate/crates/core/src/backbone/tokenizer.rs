use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const N_SPECIAL: usize = 4;

/// The 60 printable symbols the model reads and writes, ids `4..64`.
pub const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ12345:|";

/// Token ids plus the boundary between prompt and completion.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub prompt_len: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Text of the completion region, stopping at the first EOS.
    pub fn completion_text(&self) -> String {
        let tail = &self.ids[self.prompt_len.min(self.ids.len())..];
        let end = tail.iter().position(|&t| t == EOS).unwrap_or(tail.len());
        render(&tail[..end])
    }

    /// Next-token targets aligned with logits rows: row `i` predicts token
    /// `i + 1`, and only completion tokens are targets.
    pub fn completion_targets(&self) -> Vec<Option<usize>> {
        let n = self.ids.len();
        (0..n)
            .map(|i| {
                if i + 1 < n && i + 1 >= self.prompt_len {
                    Some(self.ids[i + 1])
                } else {
                    None
                }
            })
            .collect()
    }
}

pub fn char_to_id(c: char) -> Result<usize> {
    ALPHABET
        .chars()
        .position(|a| a == c)
        .map(|p| p + N_SPECIAL)
        .ok_or(Error::OutOfAlphabet(c))
}

pub fn id_to_char(id: usize) -> Option<char> {
    id.checked_sub(N_SPECIAL).and_then(|i| ALPHABET.chars().nth(i))
}

fn encode_chars(text: &str, out: &mut Vec<usize>) -> Result<()> {
    for c in text.chars() {
        out.push(char_to_id(c)?);
    }
    Ok(())
}

fn render(ids: &[usize]) -> String {
    ids.iter().filter_map(|&t| id_to_char(t)).collect()
}

/// `[BOS] text`, all prompt.
pub fn tokenize(text: &str) -> Result<TokenSeq> {
    let mut ids = vec![BOS];
    encode_chars(text, &mut ids)?;
    let prompt_len = ids.len();
    Ok(TokenSeq { ids, prompt_len })
}

/// Alphabet symbols of the sequence; special tokens are dropped.
pub fn detokenize(seq: &TokenSeq) -> String {
    render(&seq.ids)
}

/// `[BOS] input [SEP]`, a prompt ready for generation or scoring.
pub fn encode_prompt(input: &str) -> Result<TokenSeq> {
    let mut ids = vec![BOS];
    encode_chars(input, &mut ids)?;
    ids.push(SEP);
    let prompt_len = ids.len();
    Ok(TokenSeq { ids, prompt_len })
}

/// `[BOS] input [SEP] output [EOS]` with the completion starting after SEP.
pub fn encode_pair(input: &str, output: &str) -> Result<TokenSeq> {
    let mut seq = encode_prompt(input)?;
    encode_chars(output, &mut seq.ids)?;
    seq.ids.push(EOS);
    Ok(seq)
}
