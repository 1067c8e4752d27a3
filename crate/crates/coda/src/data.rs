//! Corpus ingestion, vocabulary construction, synthetic copy/reverse task
//! generation and batch assembly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{BOS_ID, EOS_ID, PAD_ID, UNK_ID};
use crate::training::Batch;
use crate::{Error, Result};

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tokenizer {
    Char,
    Whitespace,
}

impl Tokenizer {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Tokenizer::Char),
            "whitespace" => Ok(Tokenizer::Whitespace),
            other => Err(Error::Config(format!("unknown tokenizer '{other}'"))),
        }
    }

    fn split(self, line: &str) -> Vec<String> {
        match self {
            Tokenizer::Char => line.chars().map(String::from).collect(),
            Tokenizer::Whitespace => line.split_whitespace().map(String::from).collect(),
        }
    }
}

/// Deterministic vocabulary: reserved ids 0..=3, then tokens in first
/// occurrence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    fn new() -> Self {
        let id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let token_to_id =
            id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { id_to_token, token_to_id }
    }

    fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len();
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    /// Lookup with UNK fallback; never extends the vocabulary.
    pub fn encode_token(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct TextCorpus {
    pub vocab: Vocab,
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct PairCorpus {
    pub vocab: Vocab,
    pub train: Vec<(Vec<usize>, Vec<usize>)>,
    pub valid: Vec<(Vec<usize>, Vec<usize>)>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if text.is_empty() {
        return Err(Error::Data(format!("empty corpus file {}", path.display())));
    }
    Ok(text.lines().map(String::from).collect())
}

/// 95/5 split point by line order; the validation tail is never empty once
/// there are at least two lines.
fn split_point(n: usize) -> usize {
    if n < 2 {
        n
    } else {
        (n * 95 / 100).clamp(1, n - 1)
    }
}

/// Plain-text ingestion for LM tasks. Char tokenization keeps newline as a
/// token so the stream round-trips line structure.
pub fn ingest_corpus(path: &Path, tokenizer: Tokenizer) -> Result<TextCorpus> {
    let lines = read_lines(path)?;
    let mut vocab = Vocab::new();
    let mut encoded: Vec<Vec<usize>> = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let mut ids: Vec<usize> =
            tokenizer.split(line).iter().map(|t| vocab.intern(t)).collect();
        if tokenizer == Tokenizer::Char && i + 1 < lines.len() {
            ids.push(vocab.intern("\n"));
        }
        encoded.push(ids);
    }
    let cut = split_point(encoded.len());
    let valid = encoded.split_off(cut);
    Ok(TextCorpus { vocab, train: encoded, valid })
}

/// `source<TAB>target` ingestion for seq2seq tasks.
pub fn ingest_tsv(path: &Path, tokenizer: Tokenizer) -> Result<PairCorpus> {
    let lines = read_lines(path)?;
    let mut vocab = Vocab::new();
    let mut pairs = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let (src, tgt) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("malformed TSV at line {}: missing tab", i + 1))
        })?;
        let s: Vec<usize> = tokenizer.split(src).iter().map(|t| vocab.intern(t)).collect();
        let t: Vec<usize> = tokenizer.split(tgt).iter().map(|t| vocab.intern(t)).collect();
        if s.is_empty() || t.is_empty() {
            return Err(Error::Data(format!("malformed TSV at line {}: empty side", i + 1)));
        }
        pairs.push((s, t));
    }
    let cut = split_point(pairs.len());
    let valid = pairs.split_off(cut);
    Ok(PairCorpus { vocab, train: pairs, valid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Copy,
    Reverse,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SynthKind::Copy),
            "reverse" => Ok(SynthKind::Reverse),
            other => Err(Error::Config(format!("unknown synthetic task '{other}'"))),
        }
    }
}

/// Uniformly random source strings over payload ids `4..vocab_size`; target
/// is the source, or the reversed source. Deterministic under `seed`.
pub fn synth_task(
    kind: SynthKind,
    vocab_size: usize,
    length_range: (usize, usize),
    count: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if vocab_size < 5 {
        return Err(Error::Config(format!("vocab_size must be >= 5, got {vocab_size}")));
    }
    let (lo, hi) = length_range;
    if lo < 1 || hi < lo {
        return Err(Error::Config(format!("invalid length range {lo}..{hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(lo..=hi);
        let src: Vec<usize> = (0..len).map(|_| rng.gen_range(4..vocab_size)).collect();
        let tgt = match kind {
            SynthKind::Copy => src.clone(),
            SynthKind::Reverse => src.iter().rev().copied().collect(),
        };
        pairs.push((src, tgt));
    }
    Ok(pairs)
}

fn pad_to(mut row: Vec<usize>, len: usize) -> Vec<usize> {
    row.resize(len, PAD_ID);
    row
}

/// Rectangular seq2seq batches: decoder input is BOS-shifted, decoder
/// targets end with EOS, both padded with id 0.
pub fn seq2seq_batches(pairs: &[(Vec<usize>, Vec<usize>)], batch_size: usize) -> Vec<Batch> {
    pairs
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let src_len = chunk.iter().map(|(s, _)| s.len()).max().unwrap_or(1);
            let tgt_len = chunk.iter().map(|(_, t)| t.len()).max().unwrap_or(1) + 1;
            let mut src = Vec::new();
            let mut tgt_in = Vec::new();
            let mut tgt_out = Vec::new();
            for (s, t) in chunk {
                src.push(pad_to(s.clone(), src_len));
                let mut ti = vec![BOS_ID];
                ti.extend_from_slice(t);
                tgt_in.push(pad_to(ti, tgt_len));
                let mut to = t.clone();
                to.push(EOS_ID);
                tgt_out.push(pad_to(to, tgt_len));
            }
            Batch::Seq2Seq { src, tgt_in, tgt_out }
        })
        .collect()
}

/// Contiguous fixed-length LM windows over the concatenated line stream,
/// grouped into batches. Targets are the next-token shift.
pub fn lm_batches(lines: &[Vec<usize>], seq_len: usize, batch_size: usize) -> Vec<Batch> {
    let stream: Vec<usize> = lines.iter().flatten().copied().collect();
    let mut windows: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut i = 0;
    while i + seq_len + 1 <= stream.len() {
        windows.push((
            stream[i..i + seq_len].to_vec(),
            stream[i + 1..i + seq_len + 1].to_vec(),
        ));
        i += seq_len;
    }
    windows
        .chunks(batch_size.max(1))
        .map(|chunk| Batch::Lm {
            tokens: chunk.iter().map(|(t, _)| t.clone()).collect(),
            targets: chunk.iter().map(|(_, t)| t.clone()).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn char_vocab_by_first_occurrence() {
        let f = write_tmp("ab\nba");
        let corpus = ingest_corpus(f.path(), Tokenizer::Char).unwrap();
        assert_eq!(corpus.vocab.len(), 7);
        assert_eq!(corpus.vocab.token(4), "a");
        assert_eq!(corpus.vocab.token(5), "b");
        assert_eq!(corpus.vocab.token(6), "\n");
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let f = write_tmp("ab\nba");
        let corpus = ingest_corpus(f.path(), Tokenizer::Char).unwrap();
        assert_eq!(corpus.vocab.encode_token("z"), UNK_ID);
    }

    #[test]
    fn reingest_is_identical() {
        let f = write_tmp("hello world\nworld hello\nfoo bar");
        let a = ingest_corpus(f.path(), Tokenizer::Whitespace).unwrap();
        let b = ingest_corpus(f.path(), Tokenizer::Whitespace).unwrap();
        assert_eq!(a.vocab, b.vocab);
        assert_eq!(a.train, b.train);
        assert_eq!(a.valid, b.valid);
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("");
        assert!(ingest_corpus(f.path(), Tokenizer::Char).is_err());
    }

    #[test]
    fn malformed_tsv_reports_line_number() {
        let f = write_tmp("a b\tc d\nno tab here");
        let err = ingest_tsv(f.path(), Tokenizer::Whitespace).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn copy_targets_equal_sources() {
        let pairs = synth_task(SynthKind::Copy, 12, (3, 10), 50, 9).unwrap();
        assert_eq!(pairs.len(), 50);
        for (s, t) in &pairs {
            assert_eq!(s, t);
            assert!(s.len() >= 3 && s.len() <= 10);
            assert!(s.iter().all(|&id| (4..12).contains(&id)));
        }
    }

    #[test]
    fn reverse_of_palindrome_is_itself() {
        let pairs = synth_task(SynthKind::Reverse, 8, (4, 4), 200, 1).unwrap();
        for (s, t) in &pairs {
            let rev: Vec<usize> = s.iter().rev().copied().collect();
            assert_eq!(&rev, t);
            if s == &rev {
                assert_eq!(s, t);
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synth_task(SynthKind::Copy, 12, (3, 10), 20, 5).unwrap();
        let b = synth_task(SynthKind::Copy, 12, (3, 10), 20, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seq2seq_batch_shapes() {
        let pairs = vec![(vec![4, 5], vec![4, 5]), (vec![6, 7, 8], vec![8, 7, 6])];
        let batches = seq2seq_batches(&pairs, 2);
        assert_eq!(batches.len(), 1);
        let Batch::Seq2Seq { src, tgt_in, tgt_out } = &batches[0] else { panic!() };
        assert_eq!(src[0], vec![4, 5, PAD_ID]);
        assert_eq!(tgt_in[0], vec![BOS_ID, 4, 5, PAD_ID]);
        assert_eq!(tgt_out[0], vec![4, 5, EOS_ID, PAD_ID]);
        assert_eq!(tgt_in[1], vec![BOS_ID, 8, 7, 6]);
        assert_eq!(tgt_out[1], vec![8, 7, 6, EOS_ID]);
    }

    #[test]
    fn lm_windows_shift_by_one() {
        let lines = vec![vec![4, 5, 6, 7, 8, 9, 10]];
        let batches = lm_batches(&lines, 3, 4);
        let Batch::Lm { tokens, targets } = &batches[0] else { panic!() };
        assert_eq!(tokens[0], vec![4, 5, 6]);
        assert_eq!(targets[0], vec![5, 6, 7]);
        assert_eq!(tokens[1], vec![7, 8, 9]);
        assert_eq!(targets[1], vec![8, 9, 10]);
    }
}
