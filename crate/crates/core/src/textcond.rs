//! Toy prompt encoding with layer-index prefixes and learned layer embeddings.
//!
//! Each of the three prompts (fg, bg, blended) is prefixed with its layer
//! index as `"<index>, <prompt>"`, tokenized by whitespace, and looked up in
//! a trainable token table. The block's row of the layer table is then added
//! to every token embedding of that block.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const PAD_ID: usize = 0;
pub const UNKNOWN_ID: usize = 1;
pub const EMPTY_PROMPT_ID: usize = 2;
pub const RESERVED_IDS: usize = 3;
pub const NUM_TEXT_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary; duplicate tokens keep their first id.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for t in tokens {
            let t: String = t.into();
            if t.is_empty() || index.contains_key(&t) {
                continue;
            }
            index.insert(t.clone(), list.len() + RESERVED_IDS);
            list.push(t);
        }
        Vocabulary {
            tokens: list,
            index,
        }
    }

    /// Total id count including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED_IDS
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNKNOWN_ID)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()))
            .collect()
    }

    /// One token per line; line `n` (0-based) holds id `n + 3`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, l) in lines.iter().enumerate() {
            if l.trim().is_empty() || l.chars().any(char::is_whitespace) {
                return Err(Error::format(format!(
                    "vocabulary line {} is not a single token",
                    i + 1
                )));
            }
        }
        let v = Vocabulary::new(lines.iter().map(|l| l.to_string()));
        if v.tokens.len() != lines.len() {
            return Err(Error::format("vocabulary contains duplicate tokens"));
        }
        Ok(v)
    }
}

/// `"<index>, <prompt>"` for layer index 1, 2 or 3.
pub fn prefix_index(prompt: &str, layer_index: usize) -> Result<String> {
    if !(1..=NUM_TEXT_LAYERS).contains(&layer_index) {
        return Err(Error::invalid(format!(
            "layer index {layer_index} outside 1..=3"
        )));
    }
    Ok(format!("{layer_index}, {prompt}"))
}

/// Token ids for the three prompt blocks, before embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokens {
    pub ids: Vec<usize>,
    /// Layer index (1..=3) of every position.
    pub layer_index: Vec<usize>,
    /// True at pad positions.
    pub padding: Vec<bool>,
    pub block_len: usize,
}

impl TextTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn from_blocks(blocks: [Vec<usize>; 3], block_len: usize) -> Self {
        let mut ids = Vec::with_capacity(3 * block_len);
        let mut layer_index = Vec::with_capacity(3 * block_len);
        let mut padding = Vec::with_capacity(3 * block_len);
        for (b, block) in blocks.iter().enumerate() {
            for i in 0..block_len {
                let id = block.get(i).copied().unwrap_or(PAD_ID);
                ids.push(id);
                layer_index.push(b + 1);
                padding.push(id == PAD_ID);
            }
        }
        TextTokens {
            ids,
            layer_index,
            padding,
            block_len,
        }
    }
}

pub fn tokenize_prompts<S: AsRef<str>>(
    prompts: &[S; 3],
    vocab: &Vocabulary,
    block_len: usize,
) -> Result<TextTokens> {
    let mut blocks: [Vec<usize>; 3] = Default::default();
    for (i, p) in prompts.iter().enumerate() {
        let mut ids = vocab.tokenize(&prefix_index(p.as_ref(), i + 1)?);
        ids.truncate(block_len);
        blocks[i] = ids;
    }
    Ok(TextTokens::from_blocks(blocks, block_len))
}

/// The unconditional branch: every block is the empty-prompt sentinel.
pub fn null_tokens(block_len: usize) -> TextTokens {
    TextTokens::from_blocks(
        [
            vec![EMPTY_PROMPT_ID],
            vec![EMPTY_PROMPT_ID],
            vec![EMPTY_PROMPT_ID],
        ],
        block_len,
    )
}

/// Token-table lookup plus layer-table row, recorded on `tape`.
pub fn embed_tokens(
    tape: &mut Tape,
    tokens: &TextTokens,
    vocab_table: Var,
    layer_table: Var,
) -> Result<Var> {
    let tok = tape.gather_rows(vocab_table, &tokens.ids)?;
    let layer_rows: Vec<usize> = tokens.layer_index.iter().map(|i| i - 1).collect();
    let lay = tape.gather_rows(layer_table, &layer_rows)?;
    tape.add(tok, lay)
}

/// Encoded prompts: the tokens plus their embedding values.
#[derive(Debug, Clone, PartialEq)]
pub struct TextContext {
    pub tokens: TextTokens,
    pub embeddings: Tensor,
}

fn materialize(tokens: TextTokens, vocab_table: &Tensor, layer_table: &Tensor) -> Result<TextContext> {
    let mut tape = Tape::new();
    let v = tape.constant(vocab_table.clone());
    let l = tape.constant(layer_table.clone());
    let e = embed_tokens(&mut tape, &tokens, v, l)?;
    Ok(TextContext {
        embeddings: tape.tensor(e),
        tokens,
    })
}

pub fn encode<S: AsRef<str>>(
    prompts: &[S; 3],
    vocab: &Vocabulary,
    vocab_table: &Tensor,
    layer_table: &Tensor,
    block_len: usize,
) -> Result<TextContext> {
    let tokens = tokenize_prompts(prompts, vocab, block_len)?;
    materialize(tokens, vocab_table, layer_table)
}

pub fn null_context(
    vocab_table: &Tensor,
    layer_table: &Tensor,
    block_len: usize,
) -> Result<TextContext> {
    materialize(null_tokens(block_len), vocab_table, layer_table)
}
