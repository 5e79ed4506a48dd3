use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;
pub const NUM_RESERVED: usize = 5;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];

const FILE_MAGIC: &str = "#varmae-vocab";

/// Word-level vocabulary. Reserved ids `0..5` are `[PAD] [MASK] [CLS] [SEP]
/// [UNK]`; corpus tokens follow in descending frequency, ties broken
/// lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
    corpus_hash: String,
}

/// One encoded sentence (or sentence pair). `line` is the 1-based source line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub line: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions eligible for masking: everything except `[CLS]`/`[SEP]`.
    pub fn maskable_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != CLS && id != SEP && id != PAD)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sentence length `n`: number of maskable tokens.
    pub fn n(&self) -> usize {
        self.maskable_positions().len()
    }
}

/// SHA-256 over the non-blank lines of a corpus, newline-joined.
pub fn corpus_hash<S: AsRef<str>>(lines: &[S]) -> String {
    let mut h = Sha256::new();
    for line in lines.iter().map(AsRef::as_ref).filter(|l| !l.trim().is_empty()) {
        h.update(line.trim().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn build_vocab<S: AsRef<str>>(lines: &[S], min_count: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut non_blank = 0;
    for line in lines {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        non_blank += 1;
        for tok in line.split_whitespace() {
            if RESERVED_TOKENS.contains(&tok) {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    if non_blank == 0 {
        return Err(Error::Empty("corpus has no non-blank lines".into()));
    }
    let threshold = min_count.max(1);
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= threshold).collect();
    if kept.is_empty() {
        return Err(Error::Empty(format!("no token occurs at least {threshold} times")));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Ok(Vocabulary::from_tokens(tokens, threshold, corpus_hash(lines)))
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, min_count: usize, corpus_hash: String) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            min_count,
            corpus_hash,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    /// Id of `token`; unknown and reserved strings map to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&id) if id >= NUM_RESERVED => id,
            _ => UNK,
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// Hash identifying the id assignment (token list only).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// `[CLS] w1 .. wn`
    pub fn encode(&self, text: &str, line: usize) -> Result<TokenSequence> {
        let mut ids = vec![CLS];
        ids.extend(text.split_whitespace().map(|t| self.id(t)));
        if ids.len() == 1 {
            return Err(Error::Data {
                line,
                msg: "empty sentence".into(),
            });
        }
        Ok(TokenSequence { ids, line })
    }

    /// `[CLS] a [SEP] b`
    pub fn encode_pair(&self, a: &str, b: &str, line: usize) -> Result<TokenSequence> {
        let mut seq = self.encode(a, line)?;
        seq.ids.push(SEP);
        let before = seq.ids.len();
        seq.ids.extend(b.split_whitespace().map(|t| self.id(t)));
        if seq.ids.len() == before {
            return Err(Error::Data {
                line,
                msg: "empty second segment".into(),
            });
        }
        Ok(seq)
    }

    /// Encodes every non-blank line; line numbers are 1-based.
    pub fn encode_corpus<S: AsRef<str>>(&self, lines: &[S]) -> Result<Vec<TokenSequence>> {
        lines
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.as_ref().trim().is_empty())
            .map(|(i, l)| self.encode(l.as_ref(), i + 1))
            .collect()
    }

    /// Vocabulary file: a four-line header (tool version, min_count, corpus
    /// hash, token count) then one non-reserved token per line in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{FILE_MAGIC} version={}\n", env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("#min_count={}\n", self.min_count));
        s.push_str(&format!("#corpus_sha256={}\n", self.corpus_hash));
        s.push_str(&format!("#tokens={}\n", self.tokens.len() - NUM_RESERVED));
        for t in self.words() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(content: &str) -> Result<Self> {
        let mut lines = content.lines();
        let mut header = |n: usize, prefix: &str| -> Result<String> {
            let l = lines.next().ok_or_else(|| Error::Data {
                line: n,
                msg: "truncated vocabulary header".into(),
            })?;
            l.strip_prefix(prefix).map(str::to_string).ok_or_else(|| Error::Data {
                line: n,
                msg: format!("expected header starting with '{prefix}'"),
            })
        };
        header(1, FILE_MAGIC)?;
        let min_count: usize = header(2, "#min_count=")?.parse().map_err(|_| Error::Data {
            line: 2,
            msg: "bad min_count".into(),
        })?;
        let corpus_hash = header(3, "#corpus_sha256=")?;
        let count: usize = header(4, "#tokens=")?.parse().map_err(|_| Error::Data {
            line: 4,
            msg: "bad token count".into(),
        })?;
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for (i, l) in lines.enumerate() {
            if l.is_empty() || l.split_whitespace().count() != 1 || RESERVED_TOKENS.contains(&l) {
                return Err(Error::Data {
                    line: i + 5,
                    msg: format!("invalid token entry '{l}'"),
                });
            }
            tokens.push(l.to_string());
        }
        if tokens.len() - NUM_RESERVED != count || count == 0 {
            return Err(Error::Data {
                line: 4,
                msg: format!("header says {count} tokens, file has {}", tokens.len() - NUM_RESERVED),
            });
        }
        let vocab = Vocabulary::from_tokens(tokens, min_count, corpus_hash);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Data {
                line: 5,
                msg: "duplicate tokens".into(),
            });
        }
        Ok(vocab)
    }
}
