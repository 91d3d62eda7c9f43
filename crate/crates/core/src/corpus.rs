//! Text ingestion, tokenization and sequence packing.
//!
//! Id layout: regular symbols ranked by frequency (ties by symbol), then an
//! unknown id if the vocabulary was truncated, then the separator, then the
//! mask token last.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::masking::{TokenId, Vocab};
use crate::{Error, Result};

const DATASET_MAGIC: &[u8; 8] = b"ESOLMDS1";
const UNK: &str = "<unk>";
const SEP: &str = "<sep>";
const MASK: &str = "<mask>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizeMode {
    Char,
    Word,
}

impl std::str::FromStr for TokenizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "char" => Ok(Self::Char),
            "word" => Ok(Self::Word),
            other => Err(Error::Config(format!("unknown tokenizer mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for TokenizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Char => "char",
            Self::Word => "word",
        })
    }
}

fn symbols_of(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Char => text.chars().map(String::from).collect(),
        TokenizeMode::Word => text.split_whitespace().map(String::from).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    mode: TokenizeMode,
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
    unk_id: Option<TokenId>,
    vocab: Vocab,
}

impl Tokenizer {
    fn from_symbols(mode: TokenizeMode, symbols: Vec<String>, truncated: bool) -> Result<Self> {
        let n = symbols.len();
        let unk_id = truncated.then_some(n as TokenId);
        let separator = (n + usize::from(truncated)) as TokenId;
        let vocab = Vocab::new(separator as usize + 2, separator)?;
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as TokenId)).collect();
        Ok(Self {
            mode,
            symbols,
            index,
            unk_id,
            vocab,
        })
    }

    pub fn mode(&self) -> TokenizeMode {
        self.mode
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.unk_id
    }

    /// Symbols outside the vocabulary map to the unknown id, or are an error
    /// when the vocabulary was not truncated.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        symbols_of(text, self.mode)
            .into_iter()
            .map(|s| match (self.index.get(&s), self.unk_id) {
                (Some(&id), _) => Ok(id),
                (None, Some(unk)) => Ok(unk),
                (None, None) => Err(Error::Config(format!("symbol {s:?} is not in the vocabulary"))),
            })
            .collect()
    }

    /// Human-readable rendering. Specials print as `<unk>`, `<sep>`, `<mask>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let parts: Vec<&str> = ids.iter().map(|&id| self.symbol(id)).collect();
        match self.mode {
            TokenizeMode::Char => parts.concat(),
            TokenizeMode::Word => parts.join(" "),
        }
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        if let Some(s) = self.symbols.get(id as usize) {
            s
        } else if Some(id) == self.unk_id {
            UNK
        } else if id == self.vocab.separator_id() {
            SEP
        } else {
            MASK
        }
    }

    /// `# mode=... size=...` header, then `id<TAB>json-string` per id.
    pub fn to_vocab_file(&self) -> String {
        let mut out = format!(
            "# mode={} size={} unk={} separator={} mask={}\n",
            self.mode,
            self.vocab.size(),
            self.unk_id.map_or("none".to_string(), |u| u.to_string()),
            self.vocab.separator_id(),
            self.vocab.mask_id()
        );
        for id in 0..self.vocab.size() as TokenId {
            let json = serde_json::to_string(self.symbol(id)).expect("string serializes");
            out.push_str(&format!("{id}\t{json}\n"));
        }
        out
    }

    pub fn from_vocab_file(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|h| h.strip_prefix("# "))
            .ok_or_else(|| Error::Dataset("vocab file lacks its header".into()))?;
        let fields: HashMap<&str, &str> = header.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Dataset(format!("vocab header lacks `{k}`")));
        let mode: TokenizeMode = get("mode")?.parse()?;
        let truncated = get("unk")? != "none";
        let size: usize = get("size")?.parse().map_err(|_| Error::Dataset("bad vocab size".into()))?;
        let regular = size - 2 - usize::from(truncated);
        let mut symbols = Vec::with_capacity(regular);
        for (expected, line) in lines.take(regular).enumerate() {
            let (id, json) = line
                .split_once('\t')
                .ok_or_else(|| Error::Dataset(format!("bad vocab line `{line}`")))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(Error::Dataset(format!("vocab ids out of order at `{line}`")));
            }
            symbols.push(serde_json::from_str(json).map_err(|e| Error::Dataset(format!("bad vocab symbol: {e}")))?);
        }
        if symbols.len() != regular {
            return Err(Error::Dataset("vocab file is truncated".into()));
        }
        Self::from_symbols(mode, symbols, truncated)
    }
}

/// Frequency-ranked vocabulary over `texts`. `max_size` caps the total id
/// count including specials; when it bites, the rarest symbols share an
/// unknown id.
pub fn build_vocab(texts: &[&str], mode: TokenizeMode, max_size: usize) -> Result<Tokenizer> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for t in texts {
        for s in symbols_of(t, mode) {
            *counts.entry(s).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut symbols: Vec<String> = ranked.into_iter().map(|(s, _)| s).collect();
    let truncated = symbols.len() + 2 > max_size;
    if truncated {
        if max_size < 4 {
            return Err(Error::Config(format!("max vocabulary size {max_size} leaves no room for symbols")));
        }
        symbols.truncate(max_size - 3);
    }
    Tokenizer::from_symbols(mode, symbols, truncated)
}

/// Blank-line separated paragraphs, each trimmed of surrounding newlines.
pub fn split_documents(text: &str) -> Vec<&str> {
    text.split("\n\n")
        .map(|d| d.trim_matches('\n'))
        .filter(|d| !d.trim().is_empty())
        .collect()
}

/// A `.txt` file, or every `.txt` file in a directory in name order.
pub fn read_texts(path: &Path) -> Result<Vec<String>> {
    let mut files: Vec<PathBuf> = if path.is_dir() {
        std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect()
    } else {
        vec![path.to_path_buf()]
    };
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty("no .txt files in corpus directory"));
    }
    files.iter().map(|f| Ok(std::fs::read_to_string(f)?)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedDataset {
    pub examples: Vec<Vec<TokenId>>,
    pub context_length: usize,
    pub vocab: Vocab,
    /// Tokens left over after the last full window.
    pub dropped: usize,
}

/// Joins documents with the separator and cuts exact windows; the trailing
/// remainder is dropped.
pub fn pack(documents: &[Vec<TokenId>], context_length: usize, vocab: Vocab) -> Result<PackedDataset> {
    if context_length < 2 {
        return Err(Error::Config(format!("context length must be at least 2, got {context_length}")));
    }
    let mut stream = Vec::new();
    for (i, doc) in documents.iter().enumerate() {
        if i > 0 {
            stream.push(vocab.separator_id());
        }
        if let Some(pos) = doc.iter().position(|&t| t == vocab.mask_id()) {
            return Err(Error::MaskInCleanSequence { position: pos });
        }
        stream.extend_from_slice(doc);
    }
    let examples: Vec<Vec<TokenId>> = stream.chunks_exact(context_length).map(<[TokenId]>::to_vec).collect();
    Ok(PackedDataset {
        dropped: stream.len() - examples.len() * context_length,
        examples,
        context_length,
        vocab,
    })
}

impl PackedDataset {
    /// `ESOLMDS1`, then u32 context length, u32 K, u32 separator id, u64
    /// count, then the ids as u32, all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(self.context_length as u32).to_le_bytes())?;
        w.write_all(&(self.vocab.size() as u32).to_le_bytes())?;
        w.write_all(&self.vocab.separator_id().to_le_bytes())?;
        w.write_all(&(self.examples.len() as u64).to_le_bytes())?;
        for ex in &self.examples {
            for &t in ex {
                w.write_all(&t.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Dataset("file too short for a header".into()))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Dataset("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut u32_field = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut b4).map_err(|_| Error::Dataset("truncated header".into()))?;
            Ok(u32::from_le_bytes(b4))
        };
        let context_length = u32_field(r)? as usize;
        let k = u32_field(r)? as usize;
        let sep = u32_field(r)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| Error::Dataset("truncated header".into()))?;
        let count = u64::from_le_bytes(b8) as usize;
        let vocab = Vocab::new(k, sep)?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != count * context_length * 4 {
            return Err(Error::Dataset(format!(
                "body holds {} bytes, header implies {}",
                body.len(),
                count * context_length * 4
            )));
        }
        let ids: Vec<TokenId> = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if ids.iter().any(|&t| t as usize >= k || t == vocab.mask_id()) {
            return Err(Error::Dataset("token id outside the vocabulary or equal to the mask".into()));
        }
        Ok(Self {
            examples: ids.chunks_exact(context_length.max(1)).map(<[TokenId]>::to_vec).collect(),
            context_length,
            vocab,
            dropped: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn abab_vocab() {
        let t = build_vocab(&["abab"], TokenizeMode::Char, 256).unwrap();
        assert_eq!(t.vocab().size(), 4);
        assert_eq!(t.encode("ba").unwrap(), vec![1, 0]);
        assert_eq!((t.vocab().separator_id(), t.vocab().mask_id()), (2, 3));
        assert!(t.unk_id().is_none());
        assert!(build_vocab(&[""], TokenizeMode::Char, 256).is_err());
    }

    #[test]
    fn truncation_uses_unknown() {
        let fits = build_vocab(&["aaabbc"], TokenizeMode::Char, 5).unwrap();
        assert!(fits.unk_id().is_none());
        let t = build_vocab(&["aaabbc"], TokenizeMode::Char, 4).unwrap();
        assert_eq!(t.vocab().size(), 4);
        assert_eq!(t.encode("abc").unwrap(), vec![0, 1, 1]);
        assert_eq!(t.unk_id(), Some(1));
        assert_eq!(t.decode(&[0, 1, 2]), "a<unk><sep>");
    }

    #[test]
    fn vocab_file_is_deterministic_and_reloads() {
        let text = "the cat sat.\n\nthe dog ran \"home\"\t!";
        let a = build_vocab(&[text], TokenizeMode::Char, 256).unwrap();
        let b = build_vocab(&[text], TokenizeMode::Char, 256).unwrap();
        assert_eq!(a.to_vocab_file(), b.to_vocab_file());
        assert_eq!(Tokenizer::from_vocab_file(&a.to_vocab_file()).unwrap(), a);
        let w = build_vocab(&[text], TokenizeMode::Word, 4).unwrap();
        assert_eq!(Tokenizer::from_vocab_file(&w.to_vocab_file()).unwrap(), w);
    }

    #[test]
    fn pack_examples() {
        let v = Vocab::new(6, 4).unwrap();
        let p = pack(&[vec![1, 2], vec![3]], 3, v).unwrap();
        assert_eq!(p.examples, vec![vec![1, 2, 4]]);
        assert_eq!(p.dropped, 1);
        assert_eq!(pack(&[vec![1, 2, 3]], 3, v).unwrap().examples, vec![vec![1, 2, 3]]);
        assert!(pack(&[vec![1]], 3, v).unwrap().examples.is_empty());
        assert!(pack(&[vec![1]], 1, v).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let v = Vocab::new(6, 4).unwrap();
        let p = pack(&[vec![0, 1, 2, 3, 0, 1, 2]], 3, v).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let back = PackedDataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.examples, p.examples);
        buf.pop();
        assert!(PackedDataset::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn documents_split_on_blank_lines() {
        assert_eq!(split_documents("a b\nc\n\n\nd\n\n"), vec!["a b\nc", "d"]);
    }

    proptest! {
        #[test]
        fn char_round_trip(text in "[a-z .,\n]{1,60}") {
            let t = build_vocab(&[&text], TokenizeMode::Char, 256).unwrap();
            prop_assert_eq!(t.decode(&t.encode(&text).unwrap()), text);
        }

        #[test]
        fn pack_conserves_tokens(docs in prop::collection::vec(prop::collection::vec(0u32..4, 0..10), 1..6), ctx in 2usize..7) {
            let v = Vocab::new(6, 4).unwrap();
            let p = pack(&docs, ctx, v).unwrap();
            let total: usize = docs.iter().map(Vec::len).sum::<usize>() + docs.len() - 1;
            prop_assert_eq!(p.examples.len() * ctx + p.dropped, total);
            prop_assert!(p.examples.iter().all(|e| e.len() == ctx && !e.contains(&5)));
        }
    }
}
