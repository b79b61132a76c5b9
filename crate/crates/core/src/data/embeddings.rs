use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

/// Leading bytes of the binary embedding format. The header continues with
/// `n` and `d` as little-endian `u32`, followed by `n * d` little-endian
/// `f32` values in row-major order.
pub const EMBEDDING_MAGIC: &[u8; 4] = b"LEMB";
const HEADER_LEN: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding file is empty")]
    Empty,
    #[error("row {row}: expected dimension {expected}, found {found}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },
    #[error("row {row}, column {col}: non-finite value {value}")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("row {row}, column {col}: cannot parse {token:?}")]
    Parse { row: usize, col: usize, token: String },
    #[error("embedding rows ({found}) do not align with utterances ({expected})")]
    RowCount { expected: usize, found: usize },
    #[error("row {0} has zero norm and cannot be normalized")]
    ZeroRow(usize),
    #[error("binary embedding file truncated: header declares {declared} values, found {found}")]
    Truncated { declared: usize, found: usize },
    #[error("embedding matrix fingerprint {found:016x} does not match dataset fingerprint {expected:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },
}

/// Fingerprint of an ordered utterance sequence, used to check that row `i`
/// of an embedding matrix belongs to utterance `i`.
pub fn fingerprint_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> u64 {
    let mut hasher = Sha256::new();
    for text in texts {
        hasher.update((text.len() as u64).to_le_bytes());
        hasher.update(text.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// Dense row-major matrix of finite embedding vectors, row `i` belonging to
/// utterance id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f64>,
    n: usize,
    d: usize,
    normalized: bool,
    fingerprint: Option<u64>,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self, EmbeddingError> {
        if data.len() != n * d {
            return Err(EmbeddingError::DimensionMismatch {
                row: data.len() / d.max(1),
                expected: d,
                found: data.len() % d.max(1),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { row: pos / d, col: pos % d, value: data[pos] });
        }
        Ok(Self { data, n, d, normalized: false, fingerprint: None })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, EmbeddingError> {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        let mut data = Vec::with_capacity(n * d);
        for (row, values) in rows.into_iter().enumerate() {
            if values.len() != d {
                return Err(EmbeddingError::DimensionMismatch { row, expected: d, found: values.len() });
            }
            data.extend(values);
        }
        Self::new(n, d, data)
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d.max(1)).take(self.n)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn fingerprint(&self) -> Option<u64> {
        self.fingerprint
    }

    pub fn with_fingerprint(mut self, fingerprint: u64) -> Self {
        self.fingerprint = Some(fingerprint);
        self
    }

    /// Fail unless the matrix carries no fingerprint or carries `expected`.
    pub fn check_alignment(&self, expected_rows: usize, expected: u64) -> Result<(), EmbeddingError> {
        if self.n != expected_rows {
            return Err(EmbeddingError::RowCount { expected: expected_rows, found: self.n });
        }
        match self.fingerprint {
            Some(found) if found != expected => Err(EmbeddingError::FingerprintMismatch { expected, found }),
            _ => Ok(()),
        }
    }

    /// L2-normalize every row in place.
    pub fn normalize(&mut self) -> Result<(), EmbeddingError> {
        let d = self.d;
        for (i, row) in self.data.chunks_exact_mut(d.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(EmbeddingError::ZeroRow(i));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.normalized = true;
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self, EmbeddingError> {
        self.normalize()?;
        Ok(self)
    }

    /// Apply `f` to every row, producing a matrix of rows of dimension `out_dim`.
    /// The fingerprint is carried over.
    pub fn map_rows(&self, out_dim: usize, f: impl Fn(&[f64], &mut [f64])) -> Self {
        let mut data = vec![0.0; self.n * out_dim];
        for (src, dst) in self.rows().zip(data.chunks_exact_mut(out_dim.max(1))) {
            f(src, dst);
        }
        Self { data, n: self.n, d: out_dim, normalized: false, fingerprint: self.fingerprint }
    }
}

/// Read an embedding file. Binary files are recognised by their magic;
/// anything else is parsed as CSV (one row per line, no header).
pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbeddingError> {
    let bytes = fs::read(path)
        .map_err(|source| EmbeddingError::Io { path: path.display().to_string(), source })?;
    if bytes.is_empty() {
        return Err(EmbeddingError::Empty);
    }
    if bytes.starts_with(EMBEDDING_MAGIC) {
        parse_binary(&bytes)
    } else {
        parse_csv(&String::from_utf8_lossy(&bytes))
    }
}

/// Load embeddings that must align with `expected_n` utterances, optionally
/// L2-normalizing every row.
pub fn load_embeddings(
    path: &Path,
    expected_n: usize,
    normalize: bool,
) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut matrix = read_embeddings(path)?;
    if matrix.n != expected_n {
        return Err(EmbeddingError::RowCount { expected: expected_n, found: matrix.n });
    }
    if normalize {
        matrix.normalize()?;
    }
    Ok(matrix)
}

fn parse_binary(bytes: &[u8]) -> Result<EmbeddingMatrix, EmbeddingError> {
    if bytes.len() < HEADER_LEN {
        return Err(EmbeddingError::Truncated { declared: 0, found: 0 });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    let found = body.len() / 4;
    if body.len() % 4 != 0 || found != n * d {
        return Err(EmbeddingError::Truncated { declared: n * d, found });
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    EmbeddingMatrix::new(n, d, data)
}

fn parse_csv(content: &str) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut rows = Vec::new();
    for line in content.lines().filter(|l| !l.trim().is_empty()) {
        let row = rows.len();
        let values = line
            .split(',')
            .enumerate()
            .map(|(col, tok)| {
                tok.trim().parse::<f64>().map_err(|_| EmbeddingError::Parse {
                    row,
                    col,
                    token: tok.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(EmbeddingError::Empty);
    }
    EmbeddingMatrix::from_rows(rows)
}

pub fn write_embeddings_binary(matrix: &EmbeddingMatrix, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(EMBEDDING_MAGIC)?;
    out.write_all(&(matrix.n as u32).to_le_bytes())?;
    out.write_all(&(matrix.d as u32).to_le_bytes())?;
    for v in &matrix.data {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_embeddings_csv(matrix: &EmbeddingMatrix, mut out: impl Write) -> std::io::Result<()> {
    for row in matrix.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(bytes).unwrap();
        file
    }

    #[test]
    fn three_four_five_normalizes() {
        let m = EmbeddingMatrix::from_rows(vec![vec![3.0, 4.0]]).unwrap().normalized().unwrap();
        assert!((m.row(0)[0] - 0.6).abs() < 1e-12);
        assert!((m.row(0)[1] - 0.8).abs() < 1e-12);
        assert!(m.is_normalized());
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..8).map(|j| ((i * 8 + j) as f64).sin() + 0.1).collect())
            .collect();
        let m = EmbeddingMatrix::from_rows(rows).unwrap();
        let mut buf = Vec::new();
        write_embeddings_binary(&m, &mut buf).unwrap();
        let file = write_temp(&buf);
        let loaded = load_embeddings(file.path(), 4, true).unwrap();
        for row in loaded.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn row_count_mismatch_is_an_alignment_error() {
        let rows = vec![vec![1.0, 2.0]; 5];
        let mut buf = Vec::new();
        write_embeddings_csv(&EmbeddingMatrix::from_rows(rows).unwrap(), &mut buf).unwrap();
        let file = write_temp(&buf);
        assert!(matches!(
            load_embeddings(file.path(), 4, false),
            Err(EmbeddingError::RowCount { expected: 4, found: 5 })
        ));
    }

    #[test]
    fn ragged_and_non_finite_rows_are_rejected() {
        let file = write_temp(b"1,2,3\n4,5\n");
        assert!(matches!(read_embeddings(file.path()), Err(EmbeddingError::DimensionMismatch { row: 1, .. })));
        let file = write_temp(b"1,2\nNaN,5\n");
        assert!(matches!(read_embeddings(file.path()), Err(EmbeddingError::NonFinite { row: 1, col: 0, .. })));
        let file = write_temp(b"1,inf\n");
        assert!(matches!(read_embeddings(file.path()), Err(EmbeddingError::NonFinite { .. })));
    }

    #[test]
    fn zero_rows_cannot_be_normalized() {
        let mut m = EmbeddingMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(m.normalize(), Err(EmbeddingError::ZeroRow(1))));
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let mut buf = EMBEDDING_MAGIC.to_vec();
        buf.extend(2u32.to_le_bytes());
        buf.extend(2u32.to_le_bytes());
        buf.extend(1.0f32.to_le_bytes());
        let file = write_temp(&buf);
        assert!(matches!(read_embeddings(file.path()), Err(EmbeddingError::Truncated { declared: 4, found: 1 })));
    }

    #[test]
    fn binary_layout_is_little_endian() {
        let m = EmbeddingMatrix::from_rows(vec![vec![1.0, -2.5]]).unwrap();
        let mut buf = Vec::new();
        write_embeddings_binary(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"LEMB");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..12], &[2, 0, 0, 0]);
        assert_eq!(&buf[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&buf[16..20], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn fingerprint_detects_reordering() {
        let a = fingerprint_texts(["x", "y"]);
        let b = fingerprint_texts(["y", "x"]);
        assert_ne!(a, b);
        let m = EmbeddingMatrix::from_rows(vec![vec![1.0], vec![2.0]]).unwrap().with_fingerprint(a);
        assert!(m.check_alignment(2, a).is_ok());
        assert!(matches!(m.check_alignment(2, b), Err(EmbeddingError::FingerprintMismatch { .. })));
        assert!(m.check_alignment(3, a).is_err());
    }
}
