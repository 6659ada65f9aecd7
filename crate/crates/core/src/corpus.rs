//! Notes, code tables, vocabularies and fixed-length encodings.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::Rng;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercases, splits on runs of non-alphanumeric characters and drops
/// tokens made only of digits.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !t.chars().all(|c| c.is_ascii_digit()))
        .map(str::to_lowercase)
        .collect()
}

/// A clinical note and its reference code set (empty for unlabeled notes).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub codes: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    min_count: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens whose corpus frequency is at least `min_count`, ordered
    /// by descending frequency then lexicographically.
    pub fn build(documents: &[Document], min_count: usize) -> Result<Self> {
        Self::from_texts(documents.iter().map(|d| d.text.as_str()), min_count)
    }

    pub fn from_texts<'t>(texts: impl IntoIterator<Item = &'t str>, min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::invalid("min_count must be at least 1"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            min_count,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.get(token).is_some_and(|&i| i > UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Tokens for the given ids, skipping PAD and UNK.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i > UNK)
            .filter_map(|&i| self.tokens.get(i).cloned())
            .collect()
    }

    /// SHA-256 over the ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let v: Vocabulary = serde_json::from_slice(&fs::read(path)?)?;
        if v.tokens.len() < 2 || v.tokens[PAD] != PAD_TOKEN || v.tokens[UNK] != UNK_TOKEN {
            return Err(Error::invalid("vocabulary file lacks the PAD/UNK prefix"));
        }
        Ok(Self::from_tokens(v.tokens, v.min_count))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeTitle {
    pub code: String,
    pub long_title: String,
    pub short_title: String,
}

impl CodeTitle {
    pub fn concatenated(&self) -> String {
        format!("{} {}", self.long_title, self.short_title)
    }
}

/// Ordered code universe; position defines the label index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeTitleTable {
    entries: Vec<CodeTitle>,
    index: HashMap<String, usize>,
}

impl CodeTitleTable {
    pub fn new(entries: Vec<CodeTitle>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.code.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate code `{}`", e.code)));
            }
        }
        Ok(CodeTitleTable { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CodeTitle] {
        &self.entries
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.code.as_str())
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn concatenated_titles(&self) -> Vec<String> {
        self.entries.iter().map(CodeTitle::concatenated).collect()
    }

    /// Binary label vector in table order.
    pub fn label_vector<'c>(&self, codes: impl IntoIterator<Item = &'c String>) -> Result<Vec<u8>> {
        let mut v = vec![0u8; self.len()];
        for c in codes {
            let i = self.index_of(c).ok_or_else(|| Error::UnknownCode(c.clone()))?;
            v[i] = 1;
        }
        Ok(v)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            for field in [&e.code, &e.long_title, &e.short_title] {
                h.update(field.as_bytes());
                h.update([0u8]);
            }
        }
        hex::encode(h.finalize())
    }

    /// Reads the tab-separated `code, long_title, short_title` file (header
    /// row required).
    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        match lines.next() {
            Some((_, h)) if h.split('\t').count() == 3 => {}
            _ => return Err(parse_err(1, "expected a 3-column header row".into())),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [code, long, short] = cols[..] else {
                return Err(parse_err(i + 1, format!("expected 3 tab-separated columns, got {}", cols.len())));
            };
            if code.is_empty() {
                return Err(parse_err(i + 1, "empty code".into()));
            }
            entries.push(CodeTitle {
                code: code.to_string(),
                long_title: long.to_string(),
                short_title: short.to_string(),
            });
        }
        CodeTitleTable::new(entries)
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("code\tlong_title\tshort_title\n");
        for e in &self.entries {
            for field in [&e.code, &e.long_title, &e.short_title] {
                if field.contains(['\t', '\n']) {
                    return Err(Error::invalid(format!("field `{field}` contains a tab or newline")));
                }
            }
            out.push_str(&format!("{}\t{}\t{}\n", e.code, e.long_title, e.short_title));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Token-id matrix of the concatenated code titles, `n_y × n_t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TitleMatrix {
    n_t: usize,
    ids: Vec<usize>,
}

impl TitleMatrix {
    pub fn n_y(&self) -> usize {
        self.ids.len().checked_div(self.n_t).unwrap_or(0)
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.n_t..(i + 1) * self.n_t]
    }

    /// Row-major ids.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn from_ids(n_t: usize, ids: Vec<usize>) -> Result<Self> {
        if n_t == 0 || !ids.len().is_multiple_of(n_t) {
            return Err(Error::invalid("title ids are not a whole number of rows"));
        }
        Ok(TitleMatrix { n_t, ids })
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_t as u64).to_le_bytes());
        for &id in &self.ids {
            h.update((id as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn fit_length(mut ids: Vec<usize>, n: usize) -> Vec<usize> {
    ids.truncate(n);
    ids.resize(n, PAD);
    ids
}

pub fn build_title_matrix(table: &CodeTitleTable, vocab: &Vocabulary, n_t: usize) -> Result<TitleMatrix> {
    if n_t == 0 {
        return Err(Error::invalid("n_t must be at least 1"));
    }
    let ids = table
        .entries()
        .iter()
        .flat_map(|e| fit_length(vocab.encode(&e.concatenated()), n_t))
        .collect();
    Ok(TitleMatrix { n_t, ids })
}

/// A document as model input: exactly `n_x` ids plus its label vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub token_ids: Vec<usize>,
    pub label_vector: Vec<u8>,
    pub source_id: String,
}

impl EncodedExample {
    pub fn targets(&self) -> Vec<f64> {
        self.label_vector.iter().map(|&b| f64::from(b)).collect()
    }

    pub fn has_labels(&self) -> bool {
        self.label_vector.contains(&1)
    }
}

/// Keeps the first `n_x` tokens (right-padding with PAD); unknown tokens
/// map to UNK.
pub fn encode_document(doc: &Document, vocab: &Vocabulary, table: &CodeTitleTable, n_x: usize) -> Result<EncodedExample> {
    if n_x == 0 {
        return Err(Error::invalid("n_x must be at least 1"));
    }
    Ok(EncodedExample {
        token_ids: fit_length(vocab.encode(&doc.text), n_x),
        label_vector: table.label_vector(&doc.codes)?,
        source_id: doc.id.clone(),
    })
}

pub fn read_documents(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("duplicate document id `{}`", doc.id),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_documents(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let mut out = Vec::new();
    for d in docs {
        serde_json::to_writer(&mut out, d)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Reads a dataset file and its code table, checking every label exists.
pub fn load_dataset(docs_path: impl AsRef<Path>, codes_path: impl AsRef<Path>) -> Result<(Vec<Document>, CodeTitleTable)> {
    let table = CodeTitleTable::read_tsv(codes_path)?;
    let docs = read_documents(docs_path)?;
    for d in &docs {
        if let Some(c) = d.codes.iter().find(|c| table.index_of(c).is_none()) {
            return Err(Error::UnknownCode(c.clone()));
        }
    }
    Ok((docs, table))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Document>,
    pub val: Vec<Document>,
    pub test: Vec<Document>,
}

/// Partitions documents as listed in the manifest, in manifest order.
pub fn split_dataset(docs: &[Document], manifest: &SplitManifest) -> Result<Splits> {
    let by_id: HashMap<&str, &Document> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut seen = HashSet::new();
    let mut take = |ids: &[String]| -> Result<Vec<Document>> {
        ids.iter()
            .map(|id| {
                if !seen.insert(id.clone()) {
                    return Err(Error::invalid(format!("document `{id}` appears in more than one split")));
                }
                by_id
                    .get(id.as_str())
                    .map(|d| (*d).clone())
                    .ok_or_else(|| Error::invalid(format!("split manifest names unknown document `{id}`")))
            })
            .collect()
    };
    Ok(Splits {
        train: take(&manifest.train)?,
        val: take(&manifest.val)?,
        test: take(&manifest.test)?,
    })
}

/// Parameters of the planted-signal generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_docs: usize,
    pub n_codes: usize,
    /// Distinct word types: two trigger tokens per code plus noise words.
    pub vocab_size: usize,
    pub seed: u64,
    pub min_labels: usize,
    pub max_labels: usize,
    pub min_noise: usize,
    pub max_noise: usize,
    /// Units (noise words or trigger phrases) per sentence.
    pub sentence_len: usize,
    /// Code popularity follows `1 / (rank + 1)^zipf_exponent`.
    pub zipf_exponent: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_docs: 200,
            n_codes: 50,
            vocab_size: 500,
            seed: 0,
            min_labels: 1,
            max_labels: 4,
            min_noise: 20,
            max_noise: 40,
            sentence_len: 8,
            zipf_exponent: 0.5,
            train_fraction: 2.0 / 3.0,
            val_fraction: 1.0 / 6.0,
        }
    }
}

pub struct SyntheticDataset {
    pub documents: Vec<Document>,
    pub code_table: CodeTitleTable,
    pub splits: SplitManifest,
    /// The two-token trigger phrase of each code, in table order.
    pub triggers: Vec<[String; 2]>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const TITLE_WORDS: &[&str] = &["disorder", "syndrome", "chronic", "acute", "unspecified", "infection"];

/// Letters-only pseudo-word, unique per index.
fn pseudo_word(mut i: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut s = String::new();
    for _ in 0..3 {
        let syl = i % base;
        i /= base;
        s.push(CONSONANTS[syl / VOWELS.len()] as char);
        s.push(VOWELS[syl % VOWELS.len()] as char);
    }
    while i > 0 {
        s.push(VOWELS[i % VOWELS.len()] as char);
        i /= VOWELS.len();
    }
    s
}

fn code_name(i: usize) -> String {
    format!("{}.{:02}", 100 + i / 100, i % 100)
}

/// Documents whose text contains the trigger phrase of exactly their
/// labeled codes, mixed with noise words that never form a trigger.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    let c = config;
    if c.n_codes < 2 {
        return Err(Error::invalid("synthetic data needs at least 2 codes"));
    }
    if c.vocab_size < 2 * c.n_codes + 1 {
        return Err(Error::invalid(format!(
            "vocab_size {} cannot hold {} unique trigger tokens plus noise",
            c.vocab_size,
            2 * c.n_codes
        )));
    }
    if c.min_labels > c.max_labels || c.max_labels > c.n_codes || c.min_noise > c.max_noise || c.sentence_len == 0 {
        return Err(Error::invalid("inconsistent synthetic label/noise ranges"));
    }
    let mut rng = Rng::new(c.seed);
    let mut words: Vec<String> = (0..c.vocab_size).map(pseudo_word).collect();
    rng.shuffle(&mut words);
    let noise = words.split_off(2 * c.n_codes);
    let triggers: Vec<[String; 2]> = words.chunks(2).map(|w| [w[0].clone(), w[1].clone()]).collect();

    let entries = triggers
        .iter()
        .enumerate()
        .map(|(i, [a, b])| CodeTitle {
            code: code_name(i),
            long_title: format!("{a} {b} {}", TITLE_WORDS[i % TITLE_WORDS.len()]),
            short_title: format!("{a} {b}"),
        })
        .collect();
    let code_table = CodeTitleTable::new(entries)?;
    let weights: Vec<f64> = (0..c.n_codes)
        .map(|r| 1.0 / ((r + 1) as f64).powf(c.zipf_exponent))
        .collect();

    let mut documents = Vec::with_capacity(c.n_docs);
    for d in 0..c.n_docs {
        let n_labels = c.min_labels + rng.below(c.max_labels - c.min_labels + 1);
        let mut chosen: Vec<usize> = Vec::with_capacity(n_labels);
        let mut remaining = weights.clone();
        for _ in 0..n_labels {
            let total: f64 = remaining.iter().sum();
            let mut target = rng.uniform() * total;
            let mut pick = remaining.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            for (i, &w) in remaining.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            remaining[pick] = 0.0;
            chosen.push(pick);
        }
        let n_noise = c.min_noise + rng.below(c.max_noise - c.min_noise + 1);
        let mut units: Vec<String> = chosen.iter().map(|&i| format!("{} {}", triggers[i][0], triggers[i][1])).collect();
        units.extend((0..n_noise).map(|_| noise[rng.below(noise.len())].clone()));
        rng.shuffle(&mut units);
        let text = units
            .chunks(c.sentence_len)
            .map(|s| format!("{}.", s.join(" ")))
            .collect::<Vec<_>>()
            .join(" ");
        documents.push(Document {
            id: format!("doc{d:05}"),
            text,
            codes: chosen.iter().map(|&i| code_name(i)).collect(),
        });
    }

    let n_train = ((c.n_docs as f64) * c.train_fraction).round() as usize;
    let n_val = (((c.n_docs as f64) * c.val_fraction).round() as usize).min(c.n_docs - n_train.min(c.n_docs));
    let ids: Vec<String> = documents.iter().map(|d| d.id.clone()).collect();
    let n_train = n_train.min(c.n_docs);
    let splits = SplitManifest {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    Ok(SyntheticDataset {
        documents,
        code_table,
        splits,
        triggers,
    })
}
