//! QA example corpus, persisted embedding cache, and exact cosine top-k retrieval.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{dot, text_hash, EmbedError, Embedder, EmbeddingVector, ProjectionHead};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed example: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate example id {id:?} on line {line} (first seen on line {first_line})")]
    DuplicateId {
        id: String,
        first_line: usize,
        line: usize,
    },
    #[error("example {id:?} on line {line} has no usable answers")]
    EmptyAnswers { id: String, line: usize },
    #[error("example {id:?} on line {line} has an empty question")]
    EmptyQuestion { id: String, line: usize },
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("example {id:?} has a zero-norm embedding")]
    ZeroNorm { id: String },
    #[error("corrupt vector cache {path}: {message}")]
    CacheFormat { path: PathBuf, message: String },
    #[error("k must be at least 1")]
    ZeroK,
}

/// One question with its accepted answer aliases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
}

impl QAExample {
    /// The alias shown in demonstrations.
    pub fn first_answer(&self) -> &str {
        &self.answers[0]
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<QAExample>,
    pub source_path: String,
    /// 1-based source line of each example, parallel to `examples`.
    pub line_numbers: Vec<usize>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus from in-memory examples, validating the same invariants as [`load_corpus`].
    pub fn from_examples(
        examples: Vec<QAExample>,
        source_path: impl Into<String>,
    ) -> Result<Self, StoreError> {
        let lines = (1..=examples.len()).collect();
        Self::validated(examples, lines, source_path.into())
    }

    fn validated(
        examples: Vec<QAExample>,
        line_numbers: Vec<usize>,
        source_path: String,
    ) -> Result<Self, StoreError> {
        let mut by_id = HashMap::with_capacity(examples.len());
        for (pos, (ex, &line)) in examples.iter().zip(&line_numbers).enumerate() {
            if ex.answers.is_empty() || ex.answers.iter().any(|a| a.trim().is_empty()) {
                return Err(StoreError::EmptyAnswers {
                    id: ex.id.clone(),
                    line,
                });
            }
            if ex.question.trim().is_empty() {
                return Err(StoreError::EmptyQuestion {
                    id: ex.id.clone(),
                    line,
                });
            }
            if let Some(&first) = by_id.get(&ex.id) {
                return Err(StoreError::DuplicateId {
                    id: ex.id.clone(),
                    first_line: line_numbers[first],
                    line,
                });
            }
            by_id.insert(ex.id.clone(), pos);
        }
        Ok(Self {
            examples,
            source_path,
            line_numbers,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QAExample> {
        self.by_id.get(id).map(|&i| &self.examples[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Hash over the examples' content, independent of JSON formatting.
    pub fn content_hash(&self) -> String {
        let mut buf = String::new();
        for ex in &self.examples {
            buf.push_str(&serde_json::to_string(ex).expect("serializable"));
            buf.push('\n');
        }
        sha256_hex(buf)
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, StoreError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut examples = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: QAExample = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        examples.push(ex);
        lines.push(line_no);
    }
    Corpus::validated(examples, lines, path.display().to_string())
}

pub fn write_corpus(path: impl AsRef<Path>, examples: &[QAExample]) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// One persisted embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorRecord {
    pub id: String,
    pub base_model_id: String,
    pub content_hash: String,
    pub vector: EmbeddingVector,
}

const VECTOR_MAGIC: &[u8; 8] = b"HICLVEC1";

pub(crate) fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Serializes records as: magic, u32 count, then per record
/// `(id, base_model_id, content_hash)` as u32-length-prefixed UTF-8,
/// u32 dimension, and the vector as little-endian f64s.
pub fn encode_vector_records(records: &[VectorRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(VECTOR_MAGIC);
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        put_str(&mut buf, &r.id);
        put_str(&mut buf, &r.base_model_id);
        put_str(&mut buf, &r.content_hash);
        buf.extend_from_slice(&(r.vector.dim() as u32).to_le_bytes());
        for x in r.vector.values() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

pub fn decode_vector_records(bytes: &[u8]) -> Result<Vec<VectorRecord>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != VECTOR_MAGIC {
        return Err("bad magic".into());
    }
    let n = c.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let id = c.string()?;
        let base_model_id = c.string()?;
        let content_hash = c.string()?;
        let d = c.u32()? as usize;
        let raw = c.take(d.checked_mul(8).ok_or("dimension overflow")?)?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let vector = EmbeddingVector::new(values).map_err(|e| e.to_string())?;
        out.push(VectorRecord {
            id,
            base_model_id,
            content_hash,
            vector,
        });
    }
    if c.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

pub fn read_vector_file(path: &Path) -> Result<Vec<VectorRecord>, StoreError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode_vector_records(&bytes).map_err(|message| StoreError::CacheFormat {
        path: path.to_path_buf(),
        message,
    })
}

pub fn write_vector_file(path: &Path, records: &[VectorRecord]) -> Result<(), StoreError> {
    fs::write(path, encode_vector_records(records)).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads matching records from `path` (if present) into the embedder's cache.
/// Records from another model or dimension are ignored.
pub fn warm_embedder(embedder: &Embedder, path: &Path) -> Result<usize, StoreError> {
    if !path.exists() {
        return Ok(0);
    }
    let mut n = 0;
    for r in read_vector_file(path)? {
        if r.base_model_id == embedder.model_id() && r.vector.dim() == embedder.dim() {
            embedder.preload(r.content_hash, r.vector);
            n += 1;
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub example_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Immutable exact-scan cosine index over example question embeddings.
#[derive(Debug, Clone)]
pub struct Index {
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    norms: Vec<f64>,
    dim: usize,
    pub model_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildStats {
    pub examples: usize,
    pub new_embeddings: usize,
}

impl Index {
    pub fn from_vectors(
        ids: Vec<String>,
        vectors: Vec<EmbeddingVector>,
        model_id: impl Into<String>,
    ) -> Result<Self, StoreError> {
        assert_eq!(ids.len(), vectors.len(), "one vector per id");
        let dim = vectors.first().map_or(0, EmbeddingVector::dim);
        let mut norms = Vec::with_capacity(vectors.len());
        for (id, v) in ids.iter().zip(&vectors) {
            if v.dim() != dim {
                return Err(StoreError::DimensionMismatch {
                    expected: dim,
                    got: v.dim(),
                });
            }
            let n = v.norm();
            if n == 0.0 {
                return Err(StoreError::ZeroNorm { id: id.clone() });
            }
            norms.push(n);
        }
        Ok(Self {
            ids,
            vectors,
            norms,
            dim,
            model_id: model_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &EmbeddingVector {
        &self.vectors[i]
    }

    /// A new index whose vectors are `W·v` for every stored `v`.
    pub fn projected(&self, head: &ProjectionHead) -> Result<Index, StoreError> {
        let vectors = self
            .vectors
            .iter()
            .map(|v| head.project(v))
            .collect::<Result<Vec<_>, _>>()?;
        Index::from_vectors(self.ids.clone(), vectors, self.model_id.clone())
    }

    pub fn retrieve(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<RetrievalResult>, StoreError> {
        self.retrieve_filtered(query, k, |_| false)
    }

    /// Top-k by cosine similarity, skipping ids for which `exclude` returns true.
    /// Ties are broken by ascending example id.
    pub fn retrieve_filtered(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude: impl Fn(&str) -> bool,
    ) -> Result<Vec<RetrievalResult>, StoreError> {
        if k == 0 {
            return Err(StoreError::ZeroK);
        }
        if query.dim() != self.dim && !self.is_empty() {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(StoreError::Embed(EmbedError::ZeroNorm));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| !exclude(&self.ids[i]))
            .map(|i| {
                let s = dot(query.values(), self.vectors[i].values()) / (qn * self.norms[i]);
                // -0.0 and 0.0 must tie under total_cmp
                (s + 0.0, i)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0)
                .then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(r, (score, i))| RetrievalResult {
                example_id: self.ids[i].clone(),
                score,
                rank: r + 1,
            })
            .collect())
    }
}

/// An index plus the optional HER head applied to both sides of every comparison.
#[derive(Debug, Clone)]
pub struct Retriever {
    index: Index,
    head: Option<ProjectionHead>,
}

impl Retriever {
    pub fn base(index: Index) -> Self {
        Self { index, head: None }
    }

    /// Retrieval under `cos(W·q, W·e)`.
    pub fn her(base: &Index, head: ProjectionHead) -> Result<Self, StoreError> {
        Ok(Self {
            index: base.projected(&head)?,
            head: Some(head),
        })
    }

    pub fn head(&self) -> Option<&ProjectionHead> {
        self.head.as_ref()
    }

    pub fn label(&self) -> &'static str {
        if self.head.is_some() {
            "her"
        } else {
            "base"
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn retrieve(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<RetrievalResult>, StoreError> {
        self.retrieve_filtered(query, k, |_| false)
    }

    pub fn retrieve_filtered(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude: impl Fn(&str) -> bool,
    ) -> Result<Vec<RetrievalResult>, StoreError> {
        match &self.head {
            Some(h) => self.index.retrieve_filtered(&h.project(query)?, k, exclude),
            None => self.index.retrieve_filtered(query, k, exclude),
        }
    }
}

/// Embeds every question once (serving repeats from the persisted cache),
/// writes the cache file plus a text manifest next to it, and returns the index.
pub fn build_index(
    corpus: &Corpus,
    embedder: &Embedder,
    cache_path: Option<&Path>,
) -> Result<(Index, BuildStats), StoreError> {
    if let Some(p) = cache_path {
        warm_embedder(embedder, p)?;
    }
    let before = embedder.new_embeddings();
    let questions: Vec<&str> = corpus.examples.iter().map(|e| e.question.as_str()).collect();
    let vectors = embedder.embed_all(&questions)?;
    let stats = BuildStats {
        examples: corpus.len(),
        new_embeddings: embedder.new_embeddings() - before,
    };
    let ids: Vec<String> = corpus.examples.iter().map(|e| e.id.clone()).collect();
    if let Some(p) = cache_path {
        let records: Vec<VectorRecord> = corpus
            .examples
            .iter()
            .zip(&vectors)
            .map(|(ex, v)| VectorRecord {
                id: ex.id.clone(),
                base_model_id: embedder.model_id().to_string(),
                content_hash: text_hash(&ex.question),
                vector: v.clone(),
            })
            .collect();
        write_vector_file(p, &records)?;
        let manifest = format!(
            "corpus_hash={}\nembedder={}\ndim={}\nrecords={}\n",
            corpus.content_hash(),
            embedder.model_id(),
            embedder.dim(),
            records.len()
        );
        let mpath = manifest_path(p);
        fs::write(&mpath, manifest).map_err(|source| StoreError::Io {
            path: mpath,
            source,
        })?;
    }
    let index = Index::from_vectors(ids, vectors, embedder.model_id())?;
    Ok((index, stats))
}

pub fn manifest_path(cache_path: &Path) -> PathBuf {
    cache_path.with_extension("manifest")
}

/// Rebuilds an index from a cache file written by [`build_index`], without any embedding calls.
pub fn load_index(corpus: &Corpus, cache_path: &Path) -> Result<Index, StoreError> {
    let records = read_vector_file(cache_path)?;
    let by_id: HashMap<&str, &VectorRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut ids = Vec::with_capacity(corpus.len());
    let mut vectors = Vec::with_capacity(corpus.len());
    let mut model = String::new();
    for ex in &corpus.examples {
        let r = by_id
            .get(ex.id.as_str())
            .filter(|r| r.content_hash == text_hash(&ex.question))
            .ok_or_else(|| StoreError::CacheFormat {
                path: cache_path.to_path_buf(),
                message: format!("no current embedding for example {:?}", ex.id),
            })?;
        model = r.base_model_id.clone();
        ids.push(ex.id.clone());
        vectors.push(r.vector.clone());
    }
    Index::from_vectors(ids, vectors, model)
}
