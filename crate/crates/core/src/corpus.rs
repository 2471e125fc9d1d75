//! Character vocabulary, the simulated high-/low-resource corpus and batching.
//!
//! The low-resource language is simulated by shifting every token id of a
//! randomly chosen line by the base vocabulary size `N`: ids `[0, N)` are the
//! high-resource language, ids `[N, 2N)` the low-resource one. Decoding with
//! `id mod N` recovers the original character.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of the corpus (by characters) kept for training; the rest is validation.
pub const TRAIN_FRACTION: f64 = 0.9;

/// Crop attempts allowed per batch row when a language filter is active.
pub const FILTER_RETRIES_PER_ROW: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    /// High-resource: ids below `N`.
    #[serde(rename = "HR")]
    High,
    /// Low-resource: ids in `[N, 2N)`.
    #[serde(rename = "LR")]
    Low,
}

impl Language {
    pub const BOTH: [Language; 2] = [Language::High, Language::Low];

    pub fn tag(self) -> &'static str {
        match self {
            Language::High => "HR",
            Language::Low => "LR",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HR" | "HIGH" => Ok(Language::High),
            "LR" | "LOW" => Ok(Language::Low),
            other => Err(Error::InvalidArgument(format!("unknown language {other:?}"))),
        }
    }
}

/// Language of a token id given the base vocabulary size `N`.
pub fn token_language(id: usize, base_size: usize) -> Result<Language> {
    if id < base_size {
        Ok(Language::High)
    } else if id < 2 * base_size {
        Ok(Language::Low)
    } else {
        Err(Error::TokenOutOfRange { id, limit: 2 * base_size })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    bilingual: bool,
}

/// Builds the sorted character vocabulary of `text`.
pub fn build_vocab(text: &str) -> Result<Vocab> {
    if text.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut chars: Vec<char> = text.chars().collect();
    chars.sort_unstable();
    chars.dedup();
    Ok(Vocab { chars, bilingual: false })
}

impl Vocab {
    pub fn from_chars(mut chars: Vec<char>, bilingual: bool) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let n = chars.len();
        chars.sort_unstable();
        chars.dedup();
        if chars.len() != n {
            return Err(Error::InvalidArgument("duplicate characters in vocabulary".into()));
        }
        Ok(Vocab { chars, bilingual })
    }

    /// The same characters with the low-resource id range enabled.
    pub fn bilingual(mut self) -> Self {
        self.bilingual = true;
        self
    }

    pub fn is_bilingual(&self) -> bool {
        self.bilingual
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// `N`, the number of distinct characters.
    pub fn base_size(&self) -> usize {
        self.chars.len()
    }

    /// `2N` when bilingual, else `N`.
    pub fn total_size(&self) -> usize {
        if self.bilingual {
            2 * self.chars.len()
        } else {
            self.chars.len()
        }
    }

    pub fn id(&self, c: char) -> Result<usize> {
        self.chars.binary_search(&c).map_err(|_| Error::UnknownChar(c))
    }

    pub fn char_of(&self, id: usize) -> Result<char> {
        if id >= self.total_size() {
            return Err(Error::TokenOutOfRange { id, limit: self.total_size() });
        }
        Ok(self.chars[id % self.base_size()])
    }

    pub fn language(&self, id: usize) -> Result<Language> {
        if id >= self.total_size() {
            return Err(Error::TokenOutOfRange { id, limit: self.total_size() });
        }
        token_language(id, self.base_size())
    }

    pub fn encode(&self, text: &str, lang: Language) -> Result<Vec<u16>> {
        if lang == Language::Low && !self.bilingual {
            return Err(Error::InvalidArgument("low-resource ids need a bilingual vocabulary".into()));
        }
        let shift = match lang {
            Language::High => 0,
            Language::Low => self.base_size(),
        };
        text.chars().map(|c| Ok((self.id(c)? + shift) as u16)).collect()
    }

    pub fn decode(&self, ids: &[u16]) -> Result<String> {
        ids.iter().map(|&id| self.char_of(id as usize)).collect()
    }

    /// Human-readable token label, e.g. `a_HR` or `A_LR`.
    pub fn label(&self, id: usize) -> String {
        match (self.char_of(id), self.language(id)) {
            (Ok(c), Ok(lang)) => format!("{}_{}", escape_char(c), lang),
            _ => format!("<{id}>"),
        }
    }
}

/// Splits text into newline-terminated lines (the final line may lack one).
pub fn split_lines(text: &str) -> Vec<&str> {
    text.split_inclusive('\n').collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub split: Split,
    pub ids: Vec<u16>,
    /// Offset of the first token of every line in `ids`.
    pub line_starts: Vec<usize>,
    /// Language of each line, parallel to `line_starts`.
    pub line_langs: Vec<Language>,
    pub base_size: usize,
    pub seed: u64,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn language_at(&self, pos: usize) -> Language {
        if (self.ids[pos] as usize) < self.base_size {
            Language::High
        } else {
            Language::Low
        }
    }

    /// Token range `[start, end)` of line `i`.
    pub fn line_range(&self, i: usize) -> std::ops::Range<usize> {
        let end = self.line_starts.get(i + 1).copied().unwrap_or(self.ids.len());
        self.line_starts[i]..end
    }

    /// Counts of every token id below `vocab_size`.
    pub fn token_counts(&self, vocab_size: usize) -> Vec<u64> {
        let mut counts = vec![0u64; vocab_size];
        for &id in &self.ids {
            if let Some(c) = counts.get_mut(id as usize) {
                *c += 1;
            }
        }
        counts
    }

    /// A stream made only of the lines tagged `lang`, in their original order.
    pub fn filter_language(&self, lang: Language) -> TokenStream {
        let mut out = TokenStream {
            split: self.split,
            ids: Vec::new(),
            line_starts: Vec::new(),
            line_langs: Vec::new(),
            base_size: self.base_size,
            seed: self.seed,
        };
        for (i, &l) in self.line_langs.iter().enumerate() {
            if l == lang {
                out.line_starts.push(out.ids.len());
                out.line_langs.push(l);
                out.ids.extend_from_slice(&self.ids[self.line_range(i)]);
            }
        }
        out
    }

    /// Splits at token offset `at`; a line cut in two keeps its tag on both sides.
    pub fn split_at(&self, at: usize) -> (TokenStream, TokenStream) {
        let at = at.min(self.ids.len());
        let mut head = TokenStream {
            split: Split::Train,
            ids: self.ids[..at].to_vec(),
            line_starts: Vec::new(),
            line_langs: Vec::new(),
            base_size: self.base_size,
            seed: self.seed,
        };
        let mut tail = TokenStream {
            split: Split::Val,
            ids: self.ids[at..].to_vec(),
            line_starts: Vec::new(),
            line_langs: Vec::new(),
            base_size: self.base_size,
            seed: self.seed,
        };
        for (i, &lang) in self.line_langs.iter().enumerate() {
            let r = self.line_range(i);
            if r.start < at {
                head.line_starts.push(r.start);
                head.line_langs.push(lang);
            }
            if r.end > at || (r.start >= at && r.start < self.ids.len()) {
                tail.line_starts.push(r.start.max(at) - at);
                tail.line_langs.push(lang);
            }
        }
        (head, tail)
    }
}

/// Assigns each line to the low-resource language with probability `ratio`
/// and concatenates the shifted ids into one stream.
pub fn simulate_bilingual(lines: &[&str], ratio: f64, seed: u64, vocab: &Vocab) -> Result<TokenStream> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} outside [0, 1]")));
    }
    let vocab = vocab.clone().bilingual();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = TokenStream {
        split: Split::Train,
        ids: Vec::new(),
        line_starts: Vec::with_capacity(lines.len()),
        line_langs: Vec::with_capacity(lines.len()),
        base_size: vocab.base_size(),
        seed,
    };
    for line in lines {
        let draw: f64 = rng.random();
        let lang = if draw < ratio { Language::Low } else { Language::High };
        stream.line_starts.push(stream.ids.len());
        stream.line_langs.push(lang);
        stream.ids.extend(vocab.encode(line, lang)?);
    }
    Ok(stream)
}

/// Vocabulary plus train/val streams, as written by `prepare-data`.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub ratio: f64,
    pub seed: u64,
    pub train: TokenStream,
    pub val: TokenStream,
}

impl PreparedData {
    /// Builds the vocabulary, assigns languages line by line, then splits
    /// 90/10 by token prefix so validation holds both languages.
    pub fn prepare(text: &str, ratio: f64, seed: u64) -> Result<Self> {
        let vocab = build_vocab(text)?.bilingual();
        let stream = simulate_bilingual(&split_lines(text), ratio, seed, &vocab)?;
        let at = (stream.len() as f64 * TRAIN_FRACTION) as usize;
        let (train, val) = stream.split_at(at);
        Ok(PreparedData { vocab, ratio, seed, train, val })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_ids(&dir.join("train.bin"), &self.train.ids)?;
        write_ids(&dir.join("val.bin"), &self.val.ids)?;
        let chars: String = self.vocab.chars().iter().copied().collect();
        let meta = format!(
            "chars={}\nbase_size={}\ntotal_size={}\nratio={}\nseed={}\ntrain_tokens={}\nval_tokens={}\n",
            escape_str(&chars),
            self.vocab.base_size(),
            self.vocab.total_size(),
            self.ratio,
            self.seed,
            self.train.len(),
            self.val.len(),
        );
        fs::write(dir.join("meta.txt"), meta)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_text = fs::read_to_string(dir.join("meta.txt"))?;
        let mut chars = None;
        let mut ratio = None;
        let mut seed = None;
        let mut base_size = None;
        let mut lens = (None, None);
        for line in meta_text.lines() {
            let Some((key, value)) = line.split_once('=') else { continue };
            let bad = |_| Error::Format(format!("meta.txt: bad value for {key}"));
            match key {
                "chars" => chars = Some(unescape_str(value)?),
                "ratio" => ratio = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                "base_size" => base_size = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "train_tokens" => lens.0 = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "val_tokens" => lens.1 = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                _ => {}
            }
        }
        let missing = |k: &str| Error::Format(format!("meta.txt: missing {k}"));
        let chars = chars.ok_or_else(|| missing("chars"))?;
        let vocab = Vocab::from_chars(chars.chars().collect(), true)?;
        if base_size.is_some_and(|n| n != vocab.base_size()) {
            return Err(Error::Format("meta.txt: base_size disagrees with chars".into()));
        }
        let seed = seed.ok_or_else(|| missing("seed"))?;
        let newline = vocab.id('\n').ok();
        let load = |name: &str, split: Split, expect: Option<usize>| -> Result<TokenStream> {
            let ids = read_ids(&dir.join(name))?;
            if expect.is_some_and(|n| n != ids.len()) {
                return Err(Error::Format(format!("{name}: length disagrees with meta.txt")));
            }
            if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab.total_size()) {
                return Err(Error::TokenOutOfRange { id: bad as usize, limit: vocab.total_size() });
            }
            Ok(rebuild_lines(ids, split, vocab.base_size(), newline, seed))
        };
        let train = load("train.bin", Split::Train, lens.0)?;
        let val = load("val.bin", Split::Val, lens.1)?;
        Ok(PreparedData { vocab, ratio: ratio.ok_or_else(|| missing("ratio"))?, seed, train, val })
    }
}

fn rebuild_lines(ids: Vec<u16>, split: Split, base_size: usize, newline: Option<usize>, seed: u64) -> TokenStream {
    let mut line_starts = Vec::new();
    let mut line_langs = Vec::new();
    let mut at_line_start = true;
    for (pos, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if at_line_start {
            line_starts.push(pos);
            line_langs.push(if id < base_size { Language::High } else { Language::Low });
        }
        at_line_start = newline == Some(id % base_size);
    }
    TokenStream { split, ids, line_starts, line_langs, base_size, seed }
}

pub fn write_ids(path: &Path, ids: &[u16]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for &id in ids {
        w.write_u16::<LittleEndian>(id)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ids(path: &Path) -> Result<Vec<u16>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::Format(format!("{}: odd byte count", path.display())));
    }
    let mut cursor = bytes.as_slice();
    let mut ids = Vec::with_capacity(bytes.len() / 2);
    while !cursor.is_empty() {
        ids.push(cursor.read_u16::<LittleEndian>()?);
    }
    Ok(ids)
}

pub fn escape_char(c: char) -> String {
    match c {
        '\n' => "\\n".into(),
        '\t' => "\\t".into(),
        '\r' => "\\r".into(),
        '\\' => "\\\\".into(),
        ' ' => "\\s".into(),
        ',' => "\\c".into(),
        c => c.to_string(),
    }
}

fn escape_str(s: &str) -> String {
    s.chars().map(escape_char).collect()
}

fn unescape_str(s: &str) -> Result<String> {
    let mut out = String::new();
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match it.next() {
            Some('n') => '\n',
            Some('t') => '\t',
            Some('r') => '\r',
            Some('s') => ' ',
            Some('c') => ',',
            Some('\\') => '\\',
            other => return Err(Error::Format(format!("bad escape \\{other:?}"))),
        });
    }
    Ok(out)
}

/// Next-token training batch, row-major `batch_size × block_size`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub block_size: usize,
    pub inputs: Vec<u16>,
    pub targets: Vec<u16>,
}

impl Batch {
    pub fn from_rows(rows: &[(&[u16], &[u16])]) -> Result<Self> {
        let block_size = rows.first().map(|r| r.0.len()).unwrap_or(0);
        let mut b = Batch { batch_size: rows.len(), block_size, inputs: Vec::new(), targets: Vec::new() };
        for (x, y) in rows {
            if x.len() != block_size || y.len() != block_size {
                return Err(Error::Shape("ragged batch rows".into()));
            }
            b.inputs.extend_from_slice(x);
            b.targets.extend_from_slice(y);
        }
        Ok(b)
    }

    pub fn positions(&self) -> usize {
        self.batch_size * self.block_size
    }
}

/// Draws `batch_size` uniformly random crops of `block_size + 1` tokens.
///
/// With `lang_filter`, a crop is redrawn until every target token belongs
/// to that language; after [`FILTER_RETRIES_PER_ROW`] failures per row this
/// gives up.
pub fn sample_batch<R: Rng + ?Sized>(
    stream: &TokenStream,
    block_size: usize,
    batch_size: usize,
    rng: &mut R,
    lang_filter: Option<Language>,
) -> Result<Batch> {
    if stream.len() <= block_size + 1 {
        return Err(Error::StreamTooShort { len: stream.len(), block_size });
    }
    let span = stream.len() - block_size;
    let mut batch = Batch {
        batch_size,
        block_size,
        inputs: Vec::with_capacity(batch_size * block_size),
        targets: Vec::with_capacity(batch_size * block_size),
    };
    for _ in 0..batch_size {
        let mut tries = 0;
        let start = loop {
            let start = rng.random_range(0..span);
            let ok = match lang_filter {
                None => true,
                Some(lang) => (start + 1..start + 1 + block_size).all(|p| stream.language_at(p) == lang),
            };
            if ok {
                break start;
            }
            tries += 1;
            if tries >= FILTER_RETRIES_PER_ROW {
                return Err(Error::LanguageFilterUnsatisfiable(lang_filter.unwrap_or(Language::High)));
            }
        };
        batch.inputs.extend_from_slice(&stream.ids[start..start + block_size]);
        batch.targets.extend_from_slice(&stream.ids[start + 1..start + 1 + block_size]);
    }
    Ok(batch)
}

/// Non-overlapping evaluation blocks covering the whole stream.
///
/// Every target position is covered exactly once; the final block may be shorter.
pub fn sequential_blocks(stream: &TokenStream, block_size: usize) -> Vec<(usize, usize)> {
    let n_targets = stream.len().saturating_sub(1);
    (0..n_targets)
        .step_by(block_size.max(1))
        .map(|start| (start, block_size.min(n_targets - start)))
        .collect()
}
