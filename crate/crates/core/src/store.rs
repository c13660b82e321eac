//! Token embedding records and the MVIX binary store format.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! header:   "MVIX" | version u32 | dim u32 | doc_count u64 | flags u32 (bit 0 = has_salience)
//! per doc:  id_len u16 | id bytes (UTF-8) | m u32 | token_ids m × u32
//!           | [salience m × f32 if flag] | vectors m × dim × f32 (row-major)
//! ```
//!
//! Query files use the same layout with query ids in place of document ids.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MVIX_MAGIC: [u8; 4] = *b"MVIX";
pub const MVIX_VERSION: u32 = 1;
pub const DEFAULT_DIM: usize = 128;
/// Allowed deviation of a stored row's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

const FLAG_SALIENCE: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 4;

/// Token vectors of one query or document, one row per real (non-pad) token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddings {
    dim: usize,
    vectors: Vec<f32>,
    token_ids: Vec<u32>,
    salience: Option<Vec<f32>>,
}

impl TokenEmbeddings {
    /// Validates shapes: at least one token, `vectors.len() == m * dim`,
    /// finite entries and non-negative salience.
    pub fn new(
        dim: usize,
        vectors: Vec<f32>,
        token_ids: Vec<u32>,
        salience: Option<Vec<f32>>,
    ) -> Result<Self> {
        let m = token_ids.len();
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if m == 0 {
            return Err(Error::Config(
                "token set must contain at least one token".into(),
            ));
        }
        if vectors.len() != m * dim {
            return Err(Error::Dimension {
                expected: m * dim,
                found: vectors.len(),
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "token vectors contain non-finite values".into(),
            ));
        }
        if let Some(s) = &salience {
            if s.len() != m {
                return Err(Error::Dimension {
                    expected: m,
                    found: s.len(),
                });
            }
            if s.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Config(
                    "salience entries must be finite and >= 0".into(),
                ));
            }
        }
        Ok(Self {
            dim,
            vectors,
            token_ids,
            salience,
        })
    }

    /// Builds from row vectors, renormalizing each row to unit length.
    pub fn from_rows_normalized(rows: &[Vec<f32>], token_ids: Vec<u32>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: row.len(),
                });
            }
            vectors.extend_from_slice(row);
        }
        let mut emb = Self::new(dim, vectors, token_ids, None)?;
        emb.normalize_rows();
        Ok(emb)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn salience(&self) -> Option<&[f32]> {
        self.salience.as_deref()
    }

    pub fn set_salience(&mut self, salience: Option<Vec<f32>>) -> Result<()> {
        if let Some(s) = &salience {
            if s.len() != self.len() {
                return Err(Error::Dimension {
                    expected: self.len(),
                    found: s.len(),
                });
            }
        }
        self.salience = salience;
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn view(&self) -> TokenView<'_> {
        TokenView {
            dim: self.dim,
            vectors: &self.vectors,
            token_ids: &self.token_ids,
            salience: self.salience.as_deref(),
        }
    }

    /// Rescales every row to unit L2 norm. Zero rows are left untouched.
    pub fn normalize_rows(&mut self) {
        for row in self.vectors.chunks_exact_mut(self.dim) {
            let norm = row
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v = (f64::from(*v) / norm) as f32;
                }
            }
        }
    }

    /// Fails with [`Error::Normalization`] on the first row whose norm is
    /// outside `1 ± NORM_TOLERANCE`.
    pub fn check_normalized(&self, id: &str) -> Result<()> {
        self.view().check_normalized(id)
    }
}

/// Borrowed view of a token set, as handed out by [`EmbeddingStore::get`].
#[derive(Clone, Copy, Debug)]
pub struct TokenView<'a> {
    dim: usize,
    vectors: &'a [f32],
    token_ids: &'a [u32],
    salience: Option<&'a [f32]>,
}

impl<'a> TokenView<'a> {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &'a [f32] {
        self.vectors
    }

    pub fn token_ids(&self) -> &'a [u32] {
        self.token_ids
    }

    pub fn salience(&self) -> Option<&'a [f32]> {
        self.salience
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &'a [f32]> + 'a {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn to_owned(&self) -> TokenEmbeddings {
        TokenEmbeddings {
            dim: self.dim,
            vectors: self.vectors.to_vec(),
            token_ids: self.token_ids.to_vec(),
            salience: self.salience.map(<[f32]>::to_vec),
        }
    }

    /// Copies the given rows (in the given order) into a new token set.
    pub fn select(&self, indices: &[usize]) -> TokenEmbeddings {
        let mut vectors = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            vectors.extend_from_slice(self.row(i));
        }
        TokenEmbeddings {
            dim: self.dim,
            vectors,
            token_ids: indices.iter().map(|&i| self.token_ids[i]).collect(),
            salience: self
                .salience
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
        }
    }

    pub fn check_normalized(&self, id: &str) -> Result<()> {
        for (row, v) in self.rows().enumerate() {
            let norm = v
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(Error::Normalization {
                    id: id.to_string(),
                    row,
                    norm,
                });
            }
        }
        Ok(())
    }
}

/// One document (or query) with its id.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub embeddings: TokenEmbeddings,
}

/// Queries share the document layout.
pub type QueryRecord = DocumentRecord;

impl DocumentRecord {
    pub fn new(doc_id: impl Into<String>, embeddings: TokenEmbeddings) -> Self {
        Self {
            doc_id: doc_id.into(),
            embeddings,
        }
    }
}

/// Immutable in-memory store with contiguous token storage; any document's
/// token matrix is a slice lookup.
#[derive(Clone, Debug)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    offsets: Vec<usize>,
    token_ids: Vec<u32>,
    salience: Option<Vec<f32>>,
    vectors: Vec<f32>,
    positions: HashMap<String, usize>,
}

impl EmbeddingStore {
    /// Assembles a store; records must share one dimension and have unique
    /// ids. Salience must be present on all records or on none.
    pub fn from_records(records: Vec<DocumentRecord>) -> Result<Self> {
        let dim = records.first().map_or(DEFAULT_DIM, |r| r.embeddings.dim());
        let has_salience = records
            .first()
            .is_some_and(|r| r.embeddings.salience().is_some());
        validate_records(&records, dim, has_salience)?;

        let total: usize = records.iter().map(|r| r.embeddings.len()).sum();
        let mut store = Self {
            dim,
            ids: Vec::with_capacity(records.len()),
            offsets: Vec::with_capacity(records.len() + 1),
            token_ids: Vec::with_capacity(total),
            salience: has_salience.then(|| Vec::with_capacity(total)),
            vectors: Vec::with_capacity(total * dim),
            positions: HashMap::with_capacity(records.len()),
        };
        store.offsets.push(0);
        for rec in records {
            let DocumentRecord { doc_id, embeddings } = rec;
            store.positions.insert(doc_id.clone(), store.ids.len());
            store.ids.push(doc_id);
            store.token_ids.extend_from_slice(&embeddings.token_ids);
            if let (Some(dst), Some(src)) = (store.salience.as_mut(), embeddings.salience.as_ref())
            {
                dst.extend_from_slice(src);
            }
            store.vectors.extend_from_slice(&embeddings.vectors);
            store.offsets.push(store.token_ids.len());
        }
        Ok(store)
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

    pub fn has_salience(&self) -> bool {
        self.salience.is_some()
    }

    pub fn total_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn doc_id(&self, ordinal: usize) -> &str {
        &self.ids[ordinal]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.positions.get(doc_id).copied()
    }

    pub fn get(&self, ordinal: usize) -> TokenView<'_> {
        let (lo, hi) = (self.offsets[ordinal], self.offsets[ordinal + 1]);
        TokenView {
            dim: self.dim,
            vectors: &self.vectors[lo * self.dim..hi * self.dim],
            token_ids: &self.token_ids[lo..hi],
            salience: self.salience.as_ref().map(|s| &s[lo..hi]),
        }
    }

    pub fn get_by_id(&self, doc_id: &str) -> Option<TokenView<'_>> {
        self.position(doc_id).map(|i| self.get(i))
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, TokenView<'_>)> + '_ {
        (0..self.len()).map(move |i| (self.ids[i].as_str(), self.get(i)))
    }

    pub fn to_records(&self) -> Vec<DocumentRecord> {
        self.iter()
            .map(|(id, view)| DocumentRecord::new(id, view.to_owned()))
            .collect()
    }
}

fn validate_records(records: &[DocumentRecord], dim: usize, has_salience: bool) -> Result<()> {
    let mut seen = HashMap::with_capacity(records.len());
    for rec in records {
        if rec.doc_id.is_empty() {
            return Err(Error::InvalidRecord {
                id: rec.doc_id.clone(),
                reason: "empty id".into(),
            });
        }
        if rec.doc_id.len() > usize::from(u16::MAX) {
            return Err(Error::InvalidRecord {
                id: rec.doc_id.chars().take(32).collect(),
                reason: "id longer than 65535 bytes".into(),
            });
        }
        if rec.embeddings.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: rec.embeddings.dim(),
            });
        }
        if rec.embeddings.salience().is_some() != has_salience {
            return Err(Error::InvalidRecord {
                id: rec.doc_id.clone(),
                reason: "salience must be present on all records or on none".into(),
            });
        }
        if seen.insert(rec.doc_id.as_str(), ()).is_some() {
            return Err(Error::DuplicateId(rec.doc_id.clone()));
        }
    }
    Ok(())
}

/// Serializes records in MVIX format. Rows must already be unit-normalized.
pub fn encode_store(records: &[DocumentRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(DEFAULT_DIM, |r| r.embeddings.dim());
    let has_salience = records
        .first()
        .is_some_and(|r| r.embeddings.salience().is_some());
    validate_records(records, dim, has_salience)?;
    for rec in records {
        rec.embeddings.check_normalized(&rec.doc_id)?;
    }

    let payload: usize = records
        .iter()
        .map(|r| {
            let m = r.embeddings.len();
            2 + r.doc_id.len() + 4 + 4 * m * (1 + dim + usize::from(has_salience))
        })
        .sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + payload);
    buf.extend_from_slice(&MVIX_MAGIC);
    buf.extend_from_slice(&MVIX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    let flags = if has_salience { FLAG_SALIENCE } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());

    for rec in records {
        let emb = &rec.embeddings;
        buf.extend_from_slice(&(rec.doc_id.len() as u16).to_le_bytes());
        buf.extend_from_slice(rec.doc_id.as_bytes());
        buf.extend_from_slice(&(emb.len() as u32).to_le_bytes());
        for &t in emb.token_ids() {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        if let Some(s) = emb.salience() {
            for &v in s {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &v in emb.vectors() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_store(records: &[DocumentRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_store(records)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes)
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Corruption(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Corruption(format!("{what} length overflow")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Corruption(format!("{what} length overflow")))?;
        Ok(self
            .take(len, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses an MVIX byte buffer, validating structure and row norms.
pub fn decode_store(bytes: &[u8]) -> Result<EmbeddingStore> {
    if bytes.len() < 4 || bytes[..4] != MVIX_MAGIC {
        return Err(Error::Format("missing MVIX magic".into()));
    }
    let mut cur = Cursor::new(bytes);
    cur.take(4, "magic")?;
    let version = cur.u32("version")?;
    if version != MVIX_VERSION {
        return Err(Error::Format(format!("unsupported MVIX version {version}")));
    }
    let dim = cur.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::Format("dimension must be positive".into()));
    }
    let doc_count = cur.u64("doc_count")?;
    let flags = cur.u32("flags")?;
    if flags & !FLAG_SALIENCE != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    let has_salience = flags & FLAG_SALIENCE != 0;
    // Every record needs at least id_len + m + one token; reject absurd counts
    // before allocating.
    let min_record = 2 + 1 + 4 + 4 * (1 + dim);
    if doc_count > (cur.remaining() / min_record) as u64 {
        return Err(Error::Corruption(format!(
            "doc_count {doc_count} exceeds what the payload can hold"
        )));
    }

    let mut records = Vec::with_capacity(doc_count as usize);
    for i in 0..doc_count {
        let id_len = usize::from(cur.u16("id length")?);
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| Error::Corruption(format!("record {i} id is not valid UTF-8")))?
            .to_string();
        let m = cur.u32("token count")? as usize;
        if m == 0 {
            return Err(Error::Corruption(format!("record {id:?} has zero tokens")));
        }
        if m.saturating_mul(4 * (1 + dim)) > cur.remaining() {
            return Err(Error::Corruption(format!("record {id:?} is truncated")));
        }
        let token_ids = cur.u32s(m, "token ids")?;
        let salience = if has_salience {
            Some(cur.f32s(m, "salience")?)
        } else {
            None
        };
        let vectors = cur.f32s(m * dim, "vectors")?;
        let embeddings = TokenEmbeddings::new(dim, vectors, token_ids, salience)
            .map_err(|e| Error::Corruption(format!("record {id:?}: {e}")))?;
        embeddings.check_normalized(&id)?;
        records.push(DocumentRecord::new(id, embeddings));
    }
    if cur.remaining() != 0 {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after last record",
            cur.remaining()
        )));
    }
    let mut store = EmbeddingStore::from_records(records)?;
    // An empty store still carries the header dimension.
    store.dim = dim;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_record(id: &str, rows: &[[f32; 2]]) -> DocumentRecord {
        let rows: Vec<Vec<f32>> = rows.iter().map(|r| r.to_vec()).collect();
        let ids = (0..rows.len() as u32).collect();
        DocumentRecord::new(
            id,
            TokenEmbeddings::from_rows_normalized(&rows, ids).unwrap(),
        )
    }

    #[test]
    fn empty_store_roundtrips() {
        let bytes = encode_store(&[]).unwrap();
        let store = decode_store(&bytes).unwrap();
        assert!(store.is_empty());
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 0);
    }

    #[test]
    fn rejects_unnormalized_row() {
        let emb = TokenEmbeddings::new(2, vec![2.0, 0.0], vec![0], None).unwrap();
        let err = encode_store(&[DocumentRecord::new("d", emb)]).unwrap_err();
        assert!(matches!(err, Error::Normalization { row: 0, .. }), "{err}");
    }

    #[test]
    fn rejects_duplicate_and_mismatched_records() {
        let a = unit_record("a", &[[1.0, 0.0]]);
        let err = encode_store(&[a.clone(), a.clone()]).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(ref id) if id == "a"));

        let wide = TokenEmbeddings::from_rows_normalized(&[vec![1.0, 0.0, 0.0]], vec![0]).unwrap();
        let err = encode_store(&[a, DocumentRecord::new("b", wide)]).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                expected: 2,
                found: 3
            }
        ));
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let bytes = encode_store(&[unit_record("a", &[[0.6, 0.8], [1.0, 0.0]])]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_store(&bad), Err(Error::Format(_))));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_store(&bad_version), Err(Error::Format(_))));

        for cut in [HEADER_LEN - 1, HEADER_LEN + 3, bytes.len() - 1] {
            let err = decode_store(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, Error::Corruption(_) | Error::Format(_)),
                "cut {cut}: {err}"
            );
        }
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(decode_store(&trailing), Err(Error::Corruption(_))));
    }

    #[test]
    fn store_slices_and_lookup() {
        let store = EmbeddingStore::from_records(vec![
            unit_record("a", &[[1.0, 0.0]]),
            unit_record("b", &[[0.0, 1.0], [0.6, 0.8]]),
        ])
        .unwrap();
        assert_eq!(store.total_tokens(), 3);
        let b = store.get_by_id("b").unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.row(1), &[0.6f32, 0.8][..]);
        assert_eq!(store.position("a"), Some(0));
        assert!(store.get_by_id("zzz").is_none());
    }

    #[test]
    fn salience_flag_roundtrips() {
        let mut rec = unit_record("a", &[[1.0, 0.0], [0.0, 1.0]]);
        rec.embeddings.set_salience(Some(vec![0.5, 0.0])).unwrap();
        let bytes = encode_store(std::slice::from_ref(&rec)).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1);
        let store = decode_store(&bytes).unwrap();
        assert_eq!(store.get(0).salience(), Some(&[0.5f32, 0.0][..]));
        assert_eq!(store.to_records(), vec![rec]);
    }
}
