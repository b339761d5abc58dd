//! Text training format and the binary record cache.
//!
//! Text lines look like `label | index:value index:value ...` with indices
//! strictly increasing.
//!
//! The binary cache is little-endian throughout:
//!
//! ```text
//! "IMR1" | u32 record count | records...
//! record: f64 label | u32 nnz | nnz x (u32 index | f64 value)
//! ```
//!
//! Nothing may follow the last record.

use std::io::{self, BufRead, Read, Seek, SeekFrom, Write};

use thiserror::Error;

use crate::ml_bgd::{RecordError, SparseExample};

pub const MAGIC: &[u8; 4] = b"IMR1";
pub const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    MissingSeparator,
    BadLabel(String),
    MissingColon(String),
    BadIndex(String),
    BadValue(String),
    NonFinite(String),
    Unsorted { prev: u32, index: u32 },
    Duplicate(u32),
}

/// A rejected text line. `column` is the 1-based character position of the
/// offending token.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("column {column}: {}", describe(.kind))]
pub struct ParseError {
    pub column: usize,
    pub kind: ParseErrorKind,
}

fn describe(kind: &ParseErrorKind) -> String {
    match kind {
        ParseErrorKind::MissingSeparator => "missing `|` between label and features".into(),
        ParseErrorKind::BadLabel(t) => format!("label `{t}` is not a number"),
        ParseErrorKind::MissingColon(t) => format!("feature `{t}` is not index:value"),
        ParseErrorKind::BadIndex(t) => format!("index `{t}` is not a non-negative 32-bit integer"),
        ParseErrorKind::BadValue(t) => format!("value `{t}` is not a number"),
        ParseErrorKind::NonFinite(t) => format!("`{t}` is not finite"),
        ParseErrorKind::Unsorted { prev, index } => {
            format!("index {index} follows {prev}; indices must increase")
        }
        ParseErrorKind::Duplicate(i) => format!("index {i} repeated"),
    }
}

/// Whitespace-separated tokens with their 1-based starting column.
fn tokens(s: &str, base: usize) -> impl Iterator<Item = (usize, &str)> {
    let mut chars = s.char_indices().peekable();
    std::iter::from_fn(move || {
        while let Some(&(_, c)) = chars.peek() {
            if !c.is_whitespace() {
                break;
            }
            chars.next();
        }
        let &(start, _) = chars.peek()?;
        let mut end = s.len();
        while let Some(&(i, c)) = chars.peek() {
            if c.is_whitespace() {
                end = i;
                break;
            }
            chars.next();
        }
        Some((base + s[..start].chars().count() + 1, &s[start..end]))
    })
}

fn finite(
    token: &str,
    column: usize,
    bad: fn(String) -> ParseErrorKind,
) -> Result<f64, ParseError> {
    let v: f64 = token.parse().map_err(|_| ParseError {
        column,
        kind: bad(token.to_string()),
    })?;
    if !v.is_finite() {
        return Err(ParseError {
            column,
            kind: ParseErrorKind::NonFinite(token.to_string()),
        });
    }
    Ok(v)
}

pub fn parse_line(line: &str) -> Result<SparseExample, ParseError> {
    let line = line.trim_end_matches(['\n', '\r']);
    let Some((head, tail)) = line.split_once('|') else {
        return Err(ParseError {
            column: line.chars().count() + 1,
            kind: ParseErrorKind::MissingSeparator,
        });
    };

    let mut head_tokens = tokens(head, 0);
    let label = match (head_tokens.next(), head_tokens.next()) {
        (Some((col, t)), None) => finite(t, col, ParseErrorKind::BadLabel)?,
        (None, _) => {
            return Err(ParseError {
                column: 1,
                kind: ParseErrorKind::BadLabel(String::new()),
            })
        }
        (Some((col, _)), Some(_)) => {
            return Err(ParseError {
                column: col,
                kind: ParseErrorKind::BadLabel(head.trim().to_string()),
            })
        }
    };

    let base = head.chars().count() + 1;
    let mut features: Vec<(u32, f64)> = Vec::new();
    for (col, tok) in tokens(tail, base) {
        let (idx, val) = tok.split_once(':').ok_or_else(|| ParseError {
            column: col,
            kind: ParseErrorKind::MissingColon(tok.to_string()),
        })?;
        let index: u32 = idx.parse().map_err(|_| ParseError {
            column: col,
            kind: ParseErrorKind::BadIndex(idx.to_string()),
        })?;
        let value = finite(val, col + idx.chars().count() + 1, ParseErrorKind::BadValue)?;
        if let Some(&(prev, _)) = features.last() {
            let kind = if index == prev {
                Some(ParseErrorKind::Duplicate(index))
            } else if index < prev {
                Some(ParseErrorKind::Unsorted { prev, index })
            } else {
                None
            };
            if let Some(kind) = kind {
                return Err(ParseError { column: col, kind });
            }
        }
        features.push((index, value));
    }
    Ok(SparseExample::new(label, features).expect("parser enforces record invariants"))
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {error}")]
    Parse { line: usize, error: ParseError },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Iterator over the non-blank lines of a text source.
pub fn text_records<R: BufRead>(
    reader: R,
) -> impl Iterator<Item = Result<SparseExample, IngestError>> {
    reader
        .lines()
        .enumerate()
        .filter_map(|(i, line)| match line {
            Err(e) => Some(Err(IngestError::Io(e))),
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => {
                Some(parse_line(&l).map_err(|error| IngestError::Parse { line: i + 1, error }))
            }
        })
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("bad magic bytes {0:?}, expected \"IMR1\"")]
    BadMagic([u8; 4]),
    #[error("file ends inside record {record} of {expected}")]
    Truncated { record: u32, expected: u32 },
    #[error("bytes remain after the last of {expected} records")]
    TrailingBytes { expected: u32 },
    #[error("record {record}: {error}")]
    InvalidRecord { record: u32, error: RecordError },
    #[error("more than u32::MAX records")]
    TooManyRecords,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn write_record<W: Write>(out: &mut W, rec: &SparseExample) -> io::Result<()> {
    out.write_all(&rec.label().to_le_bytes())?;
    out.write_all(&(rec.nnz() as u32).to_le_bytes())?;
    for &(i, v) in rec.features() {
        out.write_all(&i.to_le_bytes())?;
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Size of `rec` in the cache format.
pub fn encoded_len(rec: &SparseExample) -> usize {
    12 + 12 * rec.nnz()
}

pub fn encode(records: &[SparseExample]) -> Result<Vec<u8>, CacheError> {
    let count = u32::try_from(records.len()).map_err(|_| CacheError::TooManyRecords)?;
    let mut out = Vec::with_capacity(HEADER_LEN + records.iter().map(encoded_len).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        write_record(&mut out, r)?;
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<SparseExample>, CacheError> {
    CacheReader::new(bytes)?.collect()
}

/// Streaming writer. The record count is patched into the header by
/// [`finish`](Self::finish), so the sink must be seekable.
pub struct CacheWriter<W: Write + Seek> {
    inner: W,
    start: u64,
    count: u32,
}

impl<W: Write + Seek> CacheWriter<W> {
    pub fn new(mut inner: W) -> Result<Self, CacheError> {
        let start = inner.stream_position()?;
        inner.write_all(MAGIC)?;
        inner.write_all(&0u32.to_le_bytes())?;
        Ok(CacheWriter {
            inner,
            start,
            count: 0,
        })
    }

    pub fn push(&mut self, rec: &SparseExample) -> Result<(), CacheError> {
        self.count = self
            .count
            .checked_add(1)
            .ok_or(CacheError::TooManyRecords)?;
        write_record(&mut self.inner, rec)?;
        Ok(())
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn finish(mut self) -> Result<W, CacheError> {
        let end = self.inner.stream_position()?;
        self.inner.seek(SeekFrom::Start(self.start + 4))?;
        self.inner.write_all(&self.count.to_le_bytes())?;
        self.inner.seek(SeekFrom::Start(end))?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streaming sequential reader; yields exactly the header's record count and
/// then checks that the source is exhausted.
pub struct CacheReader<R: Read> {
    inner: R,
    expected: u32,
    read: u32,
    done: bool,
}

impl<R: Read> CacheReader<R> {
    pub fn new(mut inner: R) -> Result<Self, CacheError> {
        let mut header = [0u8; HEADER_LEN];
        read_fully(&mut inner, &mut header).map_err(|e| match e {
            ReadErr::Eof => CacheError::Truncated {
                record: 0,
                expected: 0,
            },
            ReadErr::Io(e) => CacheError::Io(e),
        })?;
        let magic: [u8; 4] = header[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(CacheError::BadMagic(magic));
        }
        let expected = u32::from_le_bytes(header[4..].try_into().unwrap());
        Ok(CacheReader {
            inner,
            expected,
            read: 0,
            done: false,
        })
    }

    /// Record count stated in the header.
    pub fn expected(&self) -> u32 {
        self.expected
    }

    fn next_record(&mut self) -> Result<SparseExample, CacheError> {
        let truncated = |record, expected| {
            move |e| match e {
                ReadErr::Eof => CacheError::Truncated { record, expected },
                ReadErr::Io(e) => CacheError::Io(e),
            }
        };
        let t = truncated(self.read, self.expected);
        let mut head = [0u8; 12];
        read_fully(&mut self.inner, &mut head).map_err(t)?;
        let label = f64::from_le_bytes(head[..8].try_into().unwrap());
        let nnz = u32::from_le_bytes(head[8..].try_into().unwrap()) as usize;
        let mut features = Vec::with_capacity(nnz.min(4096));
        let mut pair = [0u8; 12];
        for _ in 0..nnz {
            read_fully(&mut self.inner, &mut pair).map_err(truncated(self.read, self.expected))?;
            features.push((
                u32::from_le_bytes(pair[..4].try_into().unwrap()),
                f64::from_le_bytes(pair[4..].try_into().unwrap()),
            ));
        }
        SparseExample::new(label, features).map_err(|error| CacheError::InvalidRecord {
            record: self.read,
            error,
        })
    }
}

impl<R: Read> Iterator for CacheReader<R> {
    type Item = Result<SparseExample, CacheError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.read == self.expected {
            self.done = true;
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(CacheError::TrailingBytes {
                    expected: self.expected,
                })),
                Err(e) => Some(Err(e.into())),
            };
        }
        let r = self.next_record();
        match r {
            Ok(_) => self.read += 1,
            Err(_) => self.done = true,
        }
        Some(r)
    }
}

enum ReadErr {
    Eof,
    Io(io::Error),
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ReadErr> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ReadErr::Eof,
        _ => ReadErr::Io(e),
    })
}
