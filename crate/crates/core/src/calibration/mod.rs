//! Calibration corpus: synthetic image/question/chain-of-thought samples,
//! JSONL persistence, and a small SGD loop that makes the dense model
//! meaningful before it is pruned.

mod synth;
pub mod tokenizer;
mod train;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sequence;

pub use synth::{generate_synthetic_corpus, number_word, DEFAULT_CORPUS_SIZE};
pub use tokenizer::{detokenize, tokenize};
pub use train::{train, TrainOptions, TrainReport};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    pub vision_embeddings: Vec<Vec<f64>>,
    pub prompt_text: String,
    pub response_text: String,
    pub latent_answer: i64,
    /// Prompt tokens followed by response tokens.
    pub token_ids: Vec<u32>,
    /// True exactly on response tokens.
    pub loss_mask: Vec<bool>,
    /// Response character index to response-relative token index.
    pub char_to_token: Vec<usize>,
}

impl CalibrationSample {
    pub fn new(
        vision_embeddings: Vec<Vec<f64>>,
        prompt_text: String,
        response_text: String,
        latent_answer: i64,
    ) -> Self {
        let (prompt_ids, _) = tokenize(&prompt_text);
        let (response_ids, char_to_token) = tokenize(&response_text);
        let mut loss_mask = vec![false; prompt_ids.len()];
        loss_mask.resize(prompt_ids.len() + response_ids.len(), true);
        let mut token_ids = prompt_ids;
        token_ids.extend(response_ids);
        CalibrationSample {
            vision_embeddings,
            prompt_text,
            response_text,
            latent_answer,
            token_ids,
            loss_mask,
            char_to_token,
        }
    }

    /// Index of the first response token within `token_ids`.
    pub fn response_start(&self) -> usize {
        self.loss_mask.iter().position(|&m| m).unwrap_or(self.loss_mask.len())
    }

    pub fn response_len(&self) -> usize {
        self.token_ids.len() - self.response_start()
    }

    pub fn sequence(&self) -> Sequence {
        Sequence {
            vision: self.vision_embeddings.clone(),
            tokens: self.token_ids.clone(),
        }
    }

    /// Text-token mask covering the response positions listed in
    /// `response_positions` (response-relative).
    pub fn response_mask(&self, response_positions: impl IntoIterator<Item = usize>) -> Vec<bool> {
        let start = self.response_start();
        let mut mask = vec![false; self.token_ids.len()];
        for p in response_positions {
            mask[start + p] = true;
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<CalibrationSample>,
    pub seed: u64,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    vision_embeddings: Vec<Vec<f64>>,
    prompt_text: String,
    response_text: String,
    latent_answer: i64,
}

pub fn corpus_to_jsonl(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for s in &corpus.samples {
        let line = CorpusLine {
            vision_embeddings: s.vision_embeddings.clone(),
            prompt_text: s.prompt_text.clone(),
            response_text: s.response_text.clone(),
            latent_answer: s.latent_answer,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, corpus_to_jsonl(corpus)?.as_bytes())
}

/// Parse JSONL. Blank lines are skipped; errors carry 1-based line numbers.
pub fn parse_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::CorpusLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| Error::CorpusLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.response_text.is_empty() {
            return Err(Error::CorpusLine {
                line: line_no,
                message: "empty response_text".into(),
            });
        }
        samples.push(CalibrationSample::new(
            parsed.vision_embeddings,
            parsed.prompt_text,
            parsed.response_text,
            parsed.latent_answer,
        ));
    }
    if samples.is_empty() {
        return Err(Error::CorpusLine {
            line: 0,
            message: "corpus is empty".into(),
        });
    }
    Ok(Corpus { samples, seed: 0 })
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(f))
}
