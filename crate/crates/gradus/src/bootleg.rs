//! Bootleg scores: binary w×62 matrices of notehead positions, their
//! byte-group tokenization and the `.bsc` on-disk format.
//!
//! A column holds 62 staff positions, index 0 the lowest. For tokenization
//! the column is zero-padded to 64 bits (pad indices 62 and 63) and split
//! into eight groups of eight, emitted bottom group first with the lowest
//! staff index in the least significant bit. A column is therefore exactly
//! the little-endian bytes of a u64, which is also how columns are stored.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Vertical positions per column.
pub const STAFF_POSITIONS: usize = 62;
/// Byte groups per column.
pub const BYTES_PER_COLUMN: usize = 8;
/// Token alphabet size for the byte-group encoding.
pub const BYTE_VOCAB: usize = 256;

const MAGIC: &[u8; 4] = b"BSCR";
const FORMAT_VERSION: u8 = 1;
/// Bits 62 and 63 of a column must stay clear.
const PAD_MASK: u64 = 0b11 << 62;

#[derive(Debug, Error)]
pub enum BootlegError {
    #[error("column entry at index {0} is not binary")]
    NonBinaryEntry(usize),
    #[error("column must have {STAFF_POSITIONS} entries, got {0}")]
    BadColumnLength(usize),
    #[error("corrupt token group: pad bits set (byte 7 = {0})")]
    CorruptToken(u8),
    #[error("token sequence length {0} is not a multiple of {BYTES_PER_COLUMN}")]
    BadTokenCount(usize),
    #[error("bad magic: not a .bsc file")]
    BadMagic,
    #[error("unsupported .bsc version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated .bsc payload: expected {expected} more bytes")]
    Truncated { expected: usize },
    #[error("trailing bytes after .bsc payload")]
    TrailingBytes,
    #[error("piece id is not valid UTF-8")]
    InvalidPieceId,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One time-step of a bootleg score, stored as the low 62 bits of a u64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Column(u64);

impl Column {
    pub const EMPTY: Column = Column(0);

    /// Builds a column from 62 binary entries, index 0 = lowest position.
    pub fn from_bits(bits: &[u8]) -> Result<Self, BootlegError> {
        if bits.len() != STAFF_POSITIONS {
            return Err(BootlegError::BadColumnLength(bits.len()));
        }
        let mut raw = 0u64;
        for (i, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => raw |= 1 << i,
                _ => return Err(BootlegError::NonBinaryEntry(i)),
            }
        }
        Ok(Column(raw))
    }

    pub fn from_raw(raw: u64) -> Result<Self, BootlegError> {
        if raw & PAD_MASK != 0 {
            return Err(BootlegError::CorruptToken((raw >> 56) as u8));
        }
        Ok(Column(raw))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn get(self, position: usize) -> bool {
        debug_assert!(position < STAFF_POSITIONS);
        self.0 >> position & 1 == 1
    }

    pub fn set(&mut self, position: usize) {
        debug_assert!(position < STAFF_POSITIONS);
        self.0 |= 1 << position;
    }

    /// Number of noteheads in this column.
    pub fn count(self) -> u32 {
        self.0.count_ones()
    }
}

/// Encodes a column into its eight byte groups, bottom group first.
pub fn column_to_bytes(column: Column) -> [u8; BYTES_PER_COLUMN] {
    column.raw().to_le_bytes()
}

/// Exact inverse of [`column_to_bytes`]; rejects set pad bits.
pub fn bytes_to_column(bytes: [u8; BYTES_PER_COLUMN]) -> Result<Column, BootlegError> {
    let raw = u64::from_le_bytes(bytes);
    if raw & PAD_MASK != 0 {
        return Err(BootlegError::CorruptToken(bytes[7]));
    }
    Ok(Column(raw))
}

/// A piece as a sequence of notehead columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootlegScore {
    pub piece_id: String,
    columns: Vec<Column>,
}

impl BootlegScore {
    pub fn new(piece_id: impl Into<String>, columns: Vec<Column>) -> Self {
        BootlegScore {
            piece_id: piece_id.into(),
            columns,
        }
    }

    /// Column count w.
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    /// Total set bits.
    pub fn noteheads(&self) -> u64 {
        self.columns.iter().map(|c| c.count() as u64).sum()
    }
}

/// Byte-group token sequence of a score; always 8 tokens per column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteTokenSequence {
    pub tokens: Vec<u8>,
    pub source_w: usize,
}

/// Flattens a score into its byte tokens, column order, bottom group first.
pub fn tokenize_emb(score: &BootlegScore) -> ByteTokenSequence {
    let mut tokens = Vec::with_capacity(score.width() * BYTES_PER_COLUMN);
    for &col in score.columns() {
        tokens.extend_from_slice(&column_to_bytes(col));
    }
    ByteTokenSequence {
        tokens,
        source_w: score.width(),
    }
}

/// Rebuilds a score from byte tokens; the inverse of [`tokenize_emb`].
pub fn detokenize_emb(
    tokens: &[u8],
    piece_id: impl Into<String>,
) -> Result<BootlegScore, BootlegError> {
    if tokens.len() % BYTES_PER_COLUMN != 0 {
        return Err(BootlegError::BadTokenCount(tokens.len()));
    }
    let mut columns = Vec::with_capacity(tokens.len() / BYTES_PER_COLUMN);
    for group in tokens.chunks_exact(BYTES_PER_COLUMN) {
        let mut bytes = [0u8; BYTES_PER_COLUMN];
        bytes.copy_from_slice(group);
        columns.push(bytes_to_column(bytes)?);
    }
    Ok(BootlegScore::new(piece_id, columns))
}

/// Serializes a score in the `.bsc` layout: magic "BSCR", version byte,
/// u16 piece-id length + UTF-8 bytes, u32 w, then w*8 payload bytes.
/// All integers little-endian.
pub fn encode_bsc(score: &BootlegScore) -> Vec<u8> {
    let id = score.piece_id.as_bytes();
    assert!(id.len() <= u16::MAX as usize, "piece_id too long for .bsc");
    let mut out = Vec::with_capacity(11 + id.len() + score.width() * BYTES_PER_COLUMN);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&(score.width() as u32).to_le_bytes());
    for &col in score.columns() {
        out.extend_from_slice(&column_to_bytes(col));
    }
    out
}

pub fn decode_bsc(bytes: &[u8]) -> Result<BootlegScore, BootlegError> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let magic = cursor.take(4)?;
    if magic != MAGIC {
        return Err(BootlegError::BadMagic);
    }
    let version = cursor.take(1)?[0];
    if version != FORMAT_VERSION {
        return Err(BootlegError::UnsupportedVersion(version));
    }
    let id_len = u16::from_le_bytes(cursor.take(2)?.try_into().unwrap()) as usize;
    let piece_id = std::str::from_utf8(cursor.take(id_len)?)
        .map_err(|_| BootlegError::InvalidPieceId)?
        .to_owned();
    let w = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap()) as usize;
    let mut columns = Vec::with_capacity(w);
    for _ in 0..w {
        let group = cursor.take(BYTES_PER_COLUMN)?;
        let mut bytes = [0u8; BYTES_PER_COLUMN];
        bytes.copy_from_slice(group);
        columns.push(bytes_to_column(bytes)?);
    }
    if cursor.pos != cursor.bytes.len() {
        return Err(BootlegError::TrailingBytes);
    }
    Ok(BootlegScore::new(piece_id, columns))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BootlegError> {
        if self.pos + n > self.bytes.len() {
            return Err(BootlegError::Truncated {
                expected: self.pos + n - self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
}

pub fn write_bsc(score: &BootlegScore, path: impl AsRef<Path>) -> Result<(), BootlegError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_bsc(score))?;
    Ok(())
}

pub fn read_bsc(path: impl AsRef<Path>) -> Result<BootlegScore, BootlegError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_bsc(&bytes)
}

/// Aggregate statistics over a corpus: piece count, total set bits, exact
/// histogram of widths, mean and max width.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub pieces: usize,
    pub total_noteheads: u64,
    pub length_histogram: BTreeMap<usize, usize>,
    pub mean_w: f64,
    pub max_w: usize,
}

pub fn corpus_stats<'a>(scores: impl IntoIterator<Item = &'a BootlegScore>) -> CorpusStats {
    let mut stats = CorpusStats {
        pieces: 0,
        total_noteheads: 0,
        length_histogram: BTreeMap::new(),
        mean_w: 0.0,
        max_w: 0,
    };
    let mut total_w = 0usize;
    for score in scores {
        stats.pieces += 1;
        stats.total_noteheads += score.noteheads();
        *stats.length_histogram.entry(score.width()).or_insert(0) += 1;
        total_w += score.width();
        stats.max_w = stats.max_w.max(score.width());
    }
    if stats.pieces > 0 {
        stats.mean_w = total_w as f64 / stats.pieces as f64;
    }
    stats
}

/// Deterministic random score for tests and the synthetic generator.
pub fn random_score(
    rng: &mut crate::rng::Rng,
    piece_id: impl Into<String>,
    w: usize,
) -> BootlegScore {
    let columns = (0..w)
        .map(|_| {
            let mut col = Column::EMPTY;
            let n = crate::rng::uniform_usize(rng, 5);
            for _ in 0..n {
                col.set(crate::rng::uniform_usize(rng, STAFF_POSITIONS));
            }
            col
        })
        .collect();
    BootlegScore::new(piece_id, columns)
}
