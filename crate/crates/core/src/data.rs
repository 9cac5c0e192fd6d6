//! Datasets: IDX binaries, bag-of-words text, standardization, splits and
//! minibatch iteration.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// How a feature row is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLayout {
    Flat,
    /// `[channels, height, width]`, row-major.
    Image([usize; 3]),
}

/// Feature matrix plus integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub layout: FeatureLayout,
}

impl LabeledDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        layout: FeatureLayout,
    ) -> Result<Self> {
        let (n, d) = features.dims2()?;
        if n == 0 {
            return Err(Error::arg("dataset must hold at least one case"));
        }
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {} cases", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::arg(format!("label {bad} not below class count {class_count}")));
        }
        if let FeatureLayout::Image([c, h, w]) = layout {
            if c * h * w != d {
                return Err(Error::shape(format!("image layout {c}x{h}x{w} does not match {d} features")));
            }
        }
        if !features.all_finite() {
            return Err(Error::Numeric("features must be finite".into()));
        }
        Ok(LabeledDataset {
            features,
            labels,
            class_count,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Features and labels of the given cases, in the given order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let features = Tensor::from_vec(&[indices.len(), d], data).expect("rows of a valid dataset");
        (features, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let (features, labels) = self.gather(indices);
        LabeledDataset::new(features, labels, self.class_count, self.layout)
    }

    /// The first `n` cases (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Result<LabeledDataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

// ---------------------------------------------------------------------------
// IDX

const IDX_UBYTE: u8 = 0x08;
const IDX_DOUBLE: u8 = 0x0D;
/// Magic of an unsigned-byte 3-D IDX file (image stacks).
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
/// Magic of an unsigned-byte 1-D IDX file (labels).
pub const LABEL_MAGIC: u32 = 0x0000_0801;
/// Magic of a float64 2-D IDX file (feature matrices).
pub const MATRIX_MAGIC: u32 = 0x0000_0D02;

struct IdxArray {
    type_code: u8,
    dims: Vec<usize>,
    payload_offset: usize,
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(offset as u64, format!("truncated header: missing {what}")))
}

fn parse_idx_header(bytes: &[u8], expected: &[u32]) -> Result<IdxArray> {
    let magic = read_u32_be(bytes, 0, "magic number")?;
    if !expected.contains(&magic) {
        let names: Vec<String> = expected.iter().map(|m| format!("0x{m:08X}")).collect();
        return Err(Error::parse(
            0,
            format!("bad magic number: expected {}, found 0x{magic:08X}", names.join(" or ")),
        ));
    }
    let type_code = ((magic >> 8) & 0xFF) as u8;
    let ndim = (magic & 0xFF) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_u32_be(bytes, 4 + 4 * d, &format!("dimension {d}"))? as usize);
    }
    let payload_offset = 4 + 4 * ndim;
    let elem = if type_code == IDX_DOUBLE { 8 } else { 1 };
    let need = dims.iter().product::<usize>() * elem;
    let have = bytes.len() - payload_offset;
    if have < need {
        return Err(Error::parse(
            bytes.len() as u64,
            format!("truncated payload: header promises {need} bytes, file has {have}"),
        ));
    }
    if have > need {
        return Err(Error::parse(
            (payload_offset + need) as u64,
            format!("{} trailing bytes after payload", have - need),
        ));
    }
    Ok(IdxArray {
        type_code,
        dims,
        payload_offset,
    })
}

/// Parses an image (or float64 feature matrix) IDX file and a label IDX
/// file. Unsigned-byte pixels are divided by 255.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledDataset> {
    let img = parse_idx_header(image_bytes, &[IMAGE_MAGIC, MATRIX_MAGIC])?;
    let lab = parse_idx_header(label_bytes, &[LABEL_MAGIC])?;
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::parse(
            4,
            format!("image file holds {n} items but label file holds {}", lab.dims[0]),
        ));
    }
    let payload = &image_bytes[img.payload_offset..];
    let (features, layout) = if img.type_code == IDX_UBYTE {
        let (h, w) = (img.dims[1], img.dims[2]);
        let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
        (Tensor::from_vec(&[n, h * w], data)?, FeatureLayout::Image([1, h, w]))
    } else {
        let d = img.dims[1];
        let mut data = Vec::with_capacity(n * d);
        for (i, chunk) in payload.chunks_exact(8).enumerate() {
            let v = f64::from_be_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(Error::parse(
                    (img.payload_offset + 8 * i) as u64,
                    "non-finite feature value",
                ));
            }
            data.push(v);
        }
        (Tensor::from_vec(&[n, d], data)?, FeatureLayout::Flat)
    };
    let labels: Vec<usize> = label_bytes[lab.payload_offset..].iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    LabeledDataset::new(features, labels, class_count, layout)
}

/// Reads an image/label IDX pair from disk.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let images = fs::read(image_path)?;
    let labels = fs::read(label_path)?;
    parse_idx(&images, &labels)
}

fn ubyte_pixels(ds: &LabeledDataset) -> Option<Vec<u8>> {
    ds.features
        .data()
        .iter()
        .map(|&v| {
            let b = (v * 255.0).round();
            ((0.0..=255.0).contains(&b) && b / 255.0 == v).then_some(b as u8)
        })
        .collect()
}

/// Serializes a dataset as an IDX pair. Image datasets whose values are all
/// exact multiples of 1/255 are written as unsigned bytes; anything else is
/// written as a float64 matrix.
pub fn encode_idx(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let n = ds.len();
    if ds.class_count > 256 {
        return Err(Error::arg("IDX label files hold at most 256 classes"));
    }
    let mut images = Vec::new();
    match (ds.layout, ubyte_pixels(ds)) {
        (FeatureLayout::Image([1, h, w]), Some(bytes)) => {
            images.extend(IMAGE_MAGIC.to_be_bytes());
            for d in [n, h, w] {
                images.extend((d as u32).to_be_bytes());
            }
            images.extend(bytes);
        }
        _ => {
            images.extend(MATRIX_MAGIC.to_be_bytes());
            for d in [n, ds.dim()] {
                images.extend((d as u32).to_be_bytes());
            }
            for v in ds.features.data() {
                images.extend(v.to_be_bytes());
            }
        }
    }
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend(LABEL_MAGIC.to_be_bytes());
    labels.extend((n as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&y| y as u8));
    Ok((images, labels))
}

pub fn write_idx(ds: &LabeledDataset, image_path: &Path, label_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(ds)?;
    fs::write(image_path, images)?;
    fs::write(label_path, labels)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Bag of words

/// Common English function words removed before building a vocabulary.
pub const STOP_WORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "said", "same",
    "she", "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

/// Lowercased alphanumeric runs of `text`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn count_tokens<S: AsRef<str>>(tokens: &[S]) -> BTreeMap<String, u32> {
    let mut counts = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.as_ref().to_string()).or_insert(0) += 1;
    }
    counts
}

/// Ordered vocabulary with a token → index map.
#[derive(Debug, Clone, PartialEq)]
pub struct BowVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl BowVocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::arg(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(BowVocab { tokens, index })
    }

    /// The `size` most frequent non-stop-word tokens, ties broken
    /// alphabetically.
    pub fn build<S: AsRef<str>>(documents: &[Vec<S>], size: usize) -> Self {
        let stop: BTreeSet<&str> = STOP_WORDS.iter().copied().collect();
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for doc in documents {
            for t in doc {
                let t = t.as_ref();
                if !stop.contains(t) {
                    *freq.entry(t).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = ranked.into_iter().take(size).map(|(t, _)| t.to_string()).collect();
        Self::from_tokens(tokens).expect("ranked tokens are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// One token per line, in rank order.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }
}

/// `ln(1 + C)` for every vocabulary token; tokens outside the vocabulary are
/// ignored.
pub fn bow_vectorize<'a>(token_counts: impl IntoIterator<Item = (&'a str, u32)>, vocab: &BowVocab) -> Tensor {
    let mut v = vec![0.0; vocab.len()];
    for (token, count) in token_counts {
        if let Some(i) = vocab.index_of(token) {
            v[i] = (count as f64).ln_1p();
        }
    }
    Tensor::from_vec(&[vocab.len()], v).expect("finite log counts")
}

/// One document of a `label<TAB>text` corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub label: String,
    pub tokens: Vec<String>,
}

pub fn parse_corpus(text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| {
            Error::parse(line_no as u64 + 1, "expected 'label<TAB>tokens'")
        })?;
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::parse(line_no as u64 + 1, "empty label"));
        }
        docs.push(Document {
            label: label.to_string(),
            tokens: tokenize(body),
        });
    }
    if docs.is_empty() {
        return Err(Error::parse(0, "corpus has no documents"));
    }
    Ok(docs)
}

/// Turns documents into a dataset. Class indices follow the sorted order
/// of the distinct label strings, which are returned alongside.
pub fn vectorize_corpus(docs: &[Document], vocab: &BowVocab) -> Result<(LabeledDataset, Vec<String>)> {
    let classes: Vec<String> = docs
        .iter()
        .map(|d| d.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_index: HashMap<&str, usize> =
        classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut data = Vec::with_capacity(docs.len() * vocab.len());
    let mut labels = Vec::with_capacity(docs.len());
    for d in docs {
        let counts = count_tokens(&d.tokens);
        data.extend(bow_vectorize(counts.iter().map(|(t, &c)| (t.as_str(), c)), vocab).into_data());
        labels.push(class_index[d.label.as_str()]);
    }
    let features = Tensor::from_vec(&[docs.len(), vocab.len()], data)?;
    let ds = LabeledDataset::new(features, labels, classes.len(), FeatureLayout::Flat)?;
    Ok((ds, classes))
}

/// Synthetic `label<TAB>text` corpus. Every class draws most of its words
/// from its own topic list and the rest from shared filler and stop words,
/// which is enough structure for a classifier to learn.
pub fn synthetic_corpus(
    rng: &mut RandomSource,
    documents: usize,
    classes: usize,
    topic_words: usize,
    doc_len: usize,
) -> String {
    let fillers: Vec<String> = (0..topic_words).map(|i| format!("common{i}")).collect();
    let mut out = String::new();
    for _ in 0..documents {
        let c = rng.below(classes);
        let mut words = Vec::with_capacity(doc_len);
        for _ in 0..doc_len {
            let u = rng.uniform();
            let w = if u < 0.5 {
                format!("topic{c}w{}", rng.below(topic_words))
            } else if u < 0.8 {
                fillers[rng.below(fillers.len())].clone()
            } else {
                STOP_WORDS[rng.below(STOP_WORDS.len())].to_string()
            };
            words.push(w);
        }
        out.push_str(&format!("class{c}\t{}\n", words.join(" ")));
    }
    out
}

// ---------------------------------------------------------------------------
// Normalization, splits, minibatches

/// Per-dimension mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &LabeledDataset) -> Self {
        let (n, d) = (train.len(), train.dim());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(train.features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(train.features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Standardizer { mean, sd }
    }

    /// `(x − mean) / sd`; zero-variance dimensions map to 0.
    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        if ds.dim() != self.mean.len() {
            return Err(Error::shape("standardizer fitted on a different dimension"));
        }
        let mut out = ds.clone();
        for i in 0..out.len() {
            for ((v, m), s) in out.features.row_mut(i).iter_mut().zip(&self.mean).zip(&self.sd) {
                *v = if *s > 0.0 { (*v - m) / s } else { 0.0 };
            }
        }
        Ok(out)
    }
}

/// Fits statistics on `train` and applies them to `train` and every dataset
/// in `apply_to`.
pub fn standardize(
    train: &LabeledDataset,
    apply_to: &[&LabeledDataset],
) -> Result<(LabeledDataset, Vec<LabeledDataset>, Standardizer)> {
    let stats = Standardizer::fit(train);
    let train_out = stats.apply(train)?;
    let others = apply_to.iter().map(|d| stats.apply(d)).collect::<Result<_>>()?;
    Ok((train_out, others, stats))
}

/// Shuffles and cuts `ds` into `(train, holdout)` with
/// `round(n · fraction)` training cases.
pub fn split(ds: &LabeledDataset, fraction: f64, rng: &mut RandomSource) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = ds.len();
    let cut = (n as f64 * fraction).round() as usize;
    if cut == 0 || cut == n {
        return Err(Error::arg(format!(
            "split of {n} cases at fraction {fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    Ok((ds.subset(&order[..cut])?, ds.subset(&order[cut..])?))
}

/// One epoch of shuffled minibatch index lists.
#[derive(Debug, Clone)]
pub struct MinibatchIter {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl Iterator for MinibatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(out)
    }
}

/// Shuffles the case order with `rng` and yields batches of `batch` indices;
/// the last batch may be short.
pub fn minibatch_iter(ds: &LabeledDataset, batch: usize, rng: &mut RandomSource) -> Result<MinibatchIter> {
    if batch == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    rng.shuffle(&mut order);
    Ok(MinibatchIter {
        order,
        batch,
        pos: 0,
    })
}
