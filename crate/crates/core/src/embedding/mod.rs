//! Pretrained word-embedding files and per-label codebooks.
//!
//! Two plain-text layouts are supported:
//!
//! * headered (word2vec text output): a first line `<count> <dim>`, then one
//!   record per line;
//! * headerless (GloVe text output): records only, the dimensionality is
//!   taken from the first record.
//!
//! A record is `word f1 f2 ... fD`, fields separated by a single space.

mod codebook;

pub use codebook::{build_codebook, AliasTable, LabelCodebook};

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("embedding file is empty")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate word '{word}'")]
    DuplicateWord { line: usize, word: String },
    #[error("header announces {expected} records, file holds {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cosine distance is undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("labels missing from embedding spaces: {}", format_missing(.0))]
    MissingLabels(Vec<(String, String)>),
    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),
}

fn format_missing(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(label, space)| format!("({label}, {space})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Layout of an embedding text file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Headered,
    Headerless,
}

/// A named set of word vectors sharing one dimensionality.
///
/// Words keep the order in which they were read so that writing a parsed
/// space reproduces the input records.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    name: String,
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
}

impl EmbeddingSpace {
    pub fn new(name: impl Into<String>, dim: usize) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::InvalidCodebook(
                "embedding dimensionality must be at least 1".into(),
            ));
        }
        Ok(EmbeddingSpace {
            name: name.into(),
            dim,
            words: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
        })
    }

    /// Appends a word vector. Fails on duplicates, wrong length or
    /// non-finite components.
    pub fn insert(&mut self, word: impl Into<String>, vector: &[f64]) -> Result<(), EmbeddingError> {
        let word = word.into();
        if vector.len() != self.dim {
            return Err(EmbeddingError::LengthMismatch(self.dim, vector.len()));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::Parse {
                line: 0,
                message: format!("non-finite component in vector for '{word}'"),
            });
        }
        if self.index.contains_key(&word) {
            return Err(EmbeddingError::DuplicateWord { line: 0, word });
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Writes the space in the given layout. Components use the shortest
    /// representation that parses back to the same `f64`.
    pub fn write_to<W: Write>(&self, writer: W, format: EmbeddingFormat) -> io::Result<()> {
        let mut w = BufWriter::new(writer);
        if format == EmbeddingFormat::Headered {
            writeln!(w, "{} {}", self.len(), self.dim)?;
        }
        for (i, word) in self.words.iter().enumerate() {
            w.write_all(word.as_bytes())?;
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                write!(w, " {v}")?;
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>, format: EmbeddingFormat) -> io::Result<()> {
        self.write_to(File::create(path)?, format)
    }
}

/// Reads an embedding space from a text stream.
pub fn parse_embedding_file<R: BufRead>(
    name: impl Into<String>,
    source: R,
    format: EmbeddingFormat,
) -> Result<EmbeddingSpace, EmbeddingError> {
    let mut lines = source.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut header: Option<(usize, usize)> = None;

    if format == EmbeddingFormat::Headered {
        let (line_no, line) = match lines.next() {
            Some((n, l)) => (n, l?),
            None => return Err(EmbeddingError::Empty),
        };
        let line = line.trim_end_matches('\r');
        let mut fields = line.split_ascii_whitespace();
        let mut next_usize = |what: &str| -> Result<usize, EmbeddingError> {
            fields
                .next()
                .ok_or_else(|| EmbeddingError::Parse {
                    line: line_no,
                    message: format!("missing {what} in header"),
                })?
                .parse::<usize>()
                .map_err(|e| EmbeddingError::Parse {
                    line: line_no,
                    message: format!("invalid {what} in header: {e}"),
                })
        };
        let count = next_usize("record count")?;
        let dim = next_usize("dimensionality")?;
        if dim == 0 {
            return Err(EmbeddingError::Parse {
                line: line_no,
                message: "dimensionality must be at least 1".into(),
            });
        }
        header = Some((count, dim));
    }

    let mut space: Option<EmbeddingSpace> = header
        .map(|(_, dim)| EmbeddingSpace::new(String::new(), dim))
        .transpose()?;
    let mut buf = Vec::new();

    for (line_no, line) in lines {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let word = fields.next().expect("non-blank line has a first field");
        buf.clear();
        for field in fields {
            let v: f64 = field.parse().map_err(|e| EmbeddingError::Parse {
                line: line_no,
                message: format!("invalid number '{field}': {e}"),
            })?;
            if !v.is_finite() {
                return Err(EmbeddingError::Parse {
                    line: line_no,
                    message: format!("non-finite component '{field}'"),
                });
            }
            buf.push(v);
        }

        let space = match &mut space {
            Some(s) => s,
            None => {
                if buf.is_empty() {
                    return Err(EmbeddingError::Parse {
                        line: line_no,
                        message: "record has no components".into(),
                    });
                }
                space.insert(EmbeddingSpace::new(String::new(), buf.len())?)
            }
        };
        if buf.len() != space.dim {
            return Err(EmbeddingError::DimensionMismatch {
                line: line_no,
                expected: space.dim,
                found: buf.len(),
            });
        }
        if space.contains(word) {
            return Err(EmbeddingError::DuplicateWord {
                line: line_no,
                word: word.to_string(),
            });
        }
        space.insert(word, &buf)?;
    }

    let mut space = match space {
        Some(s) if !s.is_empty() => s,
        _ => return Err(EmbeddingError::Empty),
    };
    if let Some((count, _)) = header {
        if count != space.len() {
            return Err(EmbeddingError::CountMismatch {
                expected: count,
                found: space.len(),
            });
        }
    }
    space.name = name.into();
    Ok(space)
}

/// Reads an embedding file from disk, naming the space after the file stem.
pub fn load_embedding_file(
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
) -> Result<EmbeddingSpace, EmbeddingError> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_embedding_file(name, BufReader::new(File::open(path)?), format)
}

/// Cosine distance `½(1 − u·v / (‖u‖‖v‖))`, clamped to `[0, 1]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::LengthMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    let cos = dot / (uu.sqrt() * vv.sqrt());
    Ok((0.5 * (1.0 - cos)).clamp(0.0, 1.0))
}
