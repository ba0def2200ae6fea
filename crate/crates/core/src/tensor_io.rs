//! Reading and writing attention tensors in the numpy `.npy` container.
//!
//! Only the subset needed for interchange with the attention exporter is
//! supported: dtype `<f4` (little-endian IEEE float32), C order, any rank.
//! Version 1.0 headers are written; versions 1.0, 2.0 and 3.0 are read.
//!
//! The format itself is documented at
//! <https://numpy.org/doc/stable/reference/generated/numpy.lib.format.html>.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// The npy magic string.
const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Headers are padded so the payload starts on this alignment.
const HEADER_ALIGN: usize = 64;

/// Absolute tolerance for the optional row-stochastic check.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// A dense float32 tensor with a row-major shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Serializes the tensor to npy bytes (format version 1.0).
    pub fn to_npy_bytes(&self) -> Vec<u8> {
        let header = encode_header(&self.shape);
        let mut out = Vec::with_capacity(header.len() + self.data.len() * 4);
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses npy bytes. The payload must be exactly `product(shape) * 4` bytes.
    pub fn from_npy_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, offset) = parse_preamble(bytes)?;
        let dict = HeaderDict::parse(header)?;
        if dict.descr != "<f4" {
            return Err(Error::Format(format!(
                "unsupported dtype '{}', expected '<f4'",
                dict.descr
            )));
        }
        if dict.fortran_order {
            return Err(Error::Format(
                "fortran_order arrays are not supported".into(),
            ));
        }
        let count = element_count(&dict.shape)?;
        let payload = &bytes[offset..];
        let expected = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format("declared shape overflows".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, shape {:?} requires {expected}",
                payload.len(),
                dict.shape
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            shape: dict.shape,
            data,
        })
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))
}

fn encode_header(shape: &[usize]) -> Vec<u8> {
    let shape_str = match shape {
        [] => "()".to_string(),
        [d] => format!("({d},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_str}, }}");
    // magic + version + u16 length + dict + trailing newline
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(unpadded + pad);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

/// Returns the header dict text and the payload offset.
fn parse_preamble(bytes: &[u8]) -> Result<(&str, usize)> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing npy magic".into()));
    }
    let major = bytes[6];
    let (len, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10usize),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::Format("truncated header length".into()));
            }
            let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
            (len as usize, 12)
        }
        v => return Err(Error::Format(format!("unsupported npy version {v}"))),
    };
    let end = start
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("header extends past end of file".into()))?;
    let text = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| Error::Format("header is not valid text".into()))?;
    Ok((text, end))
}

#[derive(Debug, PartialEq)]
struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

#[derive(Debug, PartialEq)]
enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

/// Minimal parser for the python dict literal in an npy header.
struct DictParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> DictParser<'a> {
    fn err(&self, what: &str) -> Error {
        Error::Format(format!("malformed header at byte {}: {what}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn string(&mut self) -> Result<String> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos == self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        // 'L' suffix from python 2 writers
        let digits = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        if self.src.get(self.pos) == Some(&b'L') {
            self.pos += 1;
        }
        digits.parse().map_err(|_| self.err("expected dimension"))
    }

    fn tuple(&mut self) -> Result<Vec<usize>> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            if self.peek() == Some(b')') {
                self.pos += 1;
                return Ok(dims);
            }
            dims.push(self.integer()?);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b')') => {}
                _ => return Err(self.err("expected ',' or ')'")),
            }
        }
    }

    fn literal(&mut self) -> Result<Literal> {
        match self.peek() {
            Some(b'\'' | b'"') => self.string().map(Literal::Str),
            Some(b'(') => self.tuple().map(Literal::Tuple),
            _ => {
                let rest = &self.src[self.pos..];
                if rest.starts_with(b"True") {
                    self.pos += 4;
                    Ok(Literal::Bool(true))
                } else if rest.starts_with(b"False") {
                    self.pos += 5;
                    Ok(Literal::Bool(false))
                } else {
                    Err(self.err("unsupported value"))
                }
            }
        }
    }
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self> {
        let mut p = DictParser {
            src: text.as_bytes(),
            pos: 0,
        };
        let mut descr = None;
        let mut fortran_order = None;
        let mut shape = None;

        p.expect(b'{')?;
        loop {
            if p.peek() == Some(b'}') {
                p.pos += 1;
                break;
            }
            let key = p.string()?;
            p.expect(b':')?;
            let value = p.literal()?;
            match (key.as_str(), value) {
                ("descr", Literal::Str(s)) => descr = Some(s),
                ("fortran_order", Literal::Bool(b)) => fortran_order = Some(b),
                ("shape", Literal::Tuple(t)) => shape = Some(t),
                (k, v) => return Err(Error::Format(format!("unexpected header entry {k}: {v:?}"))),
            }
            match p.peek() {
                Some(b',') => p.pos += 1,
                Some(b'}') => {}
                _ => return Err(p.err("expected ',' or '}'")),
            }
        }
        if p.src[p.pos..].iter().any(|b| !b.is_ascii_whitespace()) {
            return Err(p.err("trailing bytes after header dict"));
        }
        let missing = |k: &str| Error::Format(format!("header is missing '{k}'"));
        Ok(Self {
            descr: descr.ok_or_else(|| missing("descr"))?,
            fortran_order: fortran_order.ok_or_else(|| missing("fortran_order"))?,
            shape: shape.ok_or_else(|| missing("shape"))?,
        })
    }
}

/// Reads any `<f4` npy file.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_npy_bytes(&bytes)
}

pub fn save_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.to_npy_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes a rank-1 tensor. Non-finite values are rejected before touching the file.
pub fn save_vector(values: &[f32], path: impl AsRef<Path>) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Value(format!(
            "non-finite value {} at index {i}",
            values[i]
        )));
    }
    let tensor = Tensor::new(vec![values.len()], values.to_vec())?;
    save_tensor(&tensor, path)
}

/// Reads a rank-1 tensor.
pub fn load_vector(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let tensor = load_tensor(path)?;
    if tensor.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "expected a rank-1 tensor, got shape {:?}",
            tensor.shape()
        )));
    }
    Ok(tensor.into_data())
}

/// Whether the attention file carries a leading class token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ClsToken {
    #[default]
    None,
    /// Token 0 is a class token; its row and column are dropped on load.
    First,
}

/// Multi-head attention weights laid out as (head, query, key), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    heads: usize,
    tokens: usize,
    data: Vec<f32>,
}

/// First (head, query) row whose sum departs from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowSumViolation {
    pub head: usize,
    pub query: usize,
    pub sum: f64,
}

impl fmt::Display for RowSumViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "attention row (head {}, query {}) sums to {:.6}, not 1",
            self.head, self.query, self.sum
        )
    }
}

impl AttentionMaps {
    /// Builds validated maps from a flat (heads, tokens, tokens) buffer.
    pub fn new(heads: usize, tokens: usize, data: Vec<f32>) -> Result<Self> {
        if heads == 0 || tokens == 0 {
            return Err(Error::Shape(format!(
                "attention maps need at least one head and one token, got ({heads}, {tokens}, {tokens})"
            )));
        }
        let expected = heads
            .checked_mul(tokens)
            .and_then(|v| v.checked_mul(tokens))
            .ok_or_else(|| Error::Shape("attention shape overflows".into()))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "({heads}, {tokens}, {tokens}) needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            let per_head = tokens * tokens;
            let (h, rem) = (i / per_head, i % per_head);
            return Err(Error::Value(format!(
                "attention weight {} at index ({h}, {}, {}) is not a finite non-negative number",
                data[i],
                rem / tokens,
                rem % tokens
            )));
        }
        Ok(Self {
            heads,
            tokens,
            data,
        })
    }

    /// Validates a rank-3 tensor with square trailing dimensions.
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        match *tensor.shape() {
            [h, q, k] if q == k => Self::new(h, q, tensor.into_data()),
            _ => Err(Error::Shape(format!(
                "attention tensor must have shape (H, N, N), got {:?}",
                tensor.shape()
            ))),
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The `tokens x tokens` slice for one head.
    pub fn head(&self, h: usize) -> &[f32] {
        let n2 = self.tokens * self.tokens;
        &self.data[h * n2..(h + 1) * n2]
    }

    pub fn get(&self, head: usize, query: usize, key: usize) -> f32 {
        self.data[(head * self.tokens + query) * self.tokens + key]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.heads, self.tokens, self.tokens],
            data: self.data.clone(),
        }
    }

    /// Drops row 0 and column 0 of every head (the class token).
    pub fn strip_leading_token(&self) -> Result<Self> {
        if self.tokens < 2 {
            return Err(Error::Shape(
                "cannot strip the class token from a single-token map".into(),
            ));
        }
        let n = self.tokens;
        let m = n - 1;
        let mut data = Vec::with_capacity(self.heads * m * m);
        for h in 0..self.heads {
            let head = self.head(h);
            for q in 1..n {
                data.extend_from_slice(&head[q * n + 1..(q + 1) * n]);
            }
        }
        Ok(Self {
            heads: self.heads,
            tokens: m,
            data,
        })
    }

    /// Returns the first row whose sum is more than `tolerance` away from 1.
    pub fn row_stochastic_violation(&self, tolerance: f64) -> Option<RowSumViolation> {
        let n = self.tokens;
        self.data
            .chunks_exact(n)
            .enumerate()
            .find_map(|(row, vals)| {
                let sum: f64 = vals.iter().map(|&v| f64::from(v)).sum();
                ((sum - 1.0).abs() > tolerance).then_some(RowSumViolation {
                    head: row / n,
                    query: row % n,
                    sum,
                })
            })
    }

    pub fn is_row_stochastic(&self) -> bool {
        self.row_stochastic_violation(ROW_SUM_TOLERANCE).is_none()
    }
}

/// Loads and validates an attention file, optionally dropping a class token.
pub fn load_attention(path: impl AsRef<Path>, cls: ClsToken) -> Result<AttentionMaps> {
    let maps = AttentionMaps::from_tensor(load_tensor(path)?)?;
    match cls {
        ClsToken::None => Ok(maps),
        ClsToken::First => maps.strip_leading_token(),
    }
}

pub fn save_attention(maps: &AttentionMaps, path: impl AsRef<Path>) -> Result<()> {
    save_tensor(&maps.to_tensor(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), bytes).unwrap();
        f
    }

    fn npy(shape: Vec<usize>, data: Vec<f32>) -> tempfile::NamedTempFile {
        write_tmp(&Tensor::new(shape, data).unwrap().to_npy_bytes())
    }

    #[test]
    fn header_is_64_byte_aligned() {
        for shape in [vec![], vec![3], vec![16, 576, 576], vec![1; 20]] {
            let h = encode_header(&shape);
            assert_eq!(h.len() % HEADER_ALIGN, 0, "{shape:?}");
            assert_eq!(*h.last().unwrap(), b'\n');
        }
    }

    #[test]
    fn header_text_matches_numpy() {
        let h = encode_header(&[2, 3]);
        let text = std::str::from_utf8(&h[10..]).unwrap();
        assert!(text.starts_with("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }"));
        let h = encode_header(&[5]);
        assert!(std::str::from_utf8(&h[10..])
            .unwrap()
            .contains("'shape': (5,)"));
    }

    #[test]
    fn uniform_attention_loads() {
        let f = npy(vec![1, 4, 4], vec![0.25; 16]);
        let maps = load_attention(f.path(), ClsToken::None).unwrap();
        assert_eq!((maps.heads(), maps.tokens()), (1, 4));
        assert!(maps.is_row_stochastic());
    }

    #[test]
    fn non_square_trailing_dims_is_shape_error() {
        let f = npy(vec![2, 3, 4], vec![0.0; 24]);
        assert!(matches!(
            load_attention(f.path(), ClsToken::None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn wrong_rank_is_shape_error() {
        let f = npy(vec![4, 4], vec![0.0; 16]);
        assert!(matches!(
            load_attention(f.path(), ClsToken::None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn negative_value_names_index() {
        let mut data = vec![0.1; 2 * 3 * 3];
        data[9 + 3 + 2] = -0.5; // head 1, query 1, key 2
        let f = npy(vec![2, 3, 3], data);
        match load_attention(f.path(), ClsToken::None) {
            Err(Error::Value(msg)) => assert!(msg.contains("(1, 1, 2)"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_is_value_error() {
        let mut data = vec![0.1; 4];
        data[0] = f32::NAN;
        let f = npy(vec![1, 2, 2], data);
        match load_attention(f.path(), ClsToken::None) {
            Err(Error::Value(msg)) => assert!(msg.contains("(0, 0, 0)"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn with_header_edit(edit: impl Fn(&str) -> String) -> Vec<u8> {
        let b = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().to_npy_bytes();
        let len = u16::from_le_bytes([b[8], b[9]]) as usize;
        let header = edit(std::str::from_utf8(&b[10..10 + len]).unwrap());
        assert_eq!(header.len(), len);
        let mut out = b[..10].to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&b[10 + len..]);
        out
    }

    #[test]
    fn malformed_headers_are_format_errors() {
        let mut truncated = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().to_npy_bytes();
        truncated.pop();
        let cases: Vec<Vec<u8>> = vec![
            b"not an npy file".to_vec(),
            truncated,
            with_header_edit(|h| h.replace("<f4", "<f8")),
            with_header_edit(|h| h.replace("<f4", ">f4")),
            with_header_edit(|h| h.replace("False", "True ")),
            with_header_edit(|h| h.replace("'shape'", "'shope'")),
            with_header_edit(|h| h.replace("(2,)", "[2] ")),
        ];
        for bytes in cases {
            assert!(matches!(
                Tensor::from_npy_bytes(&bytes),
                Err(Error::Format(_))
            ));
        }
    }

    #[test]
    fn reads_version_2_headers() {
        let v1 = Tensor::new(vec![3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .to_npy_bytes();
        let len = u16::from_le_bytes([v1[8], v1[9]]) as usize;
        let mut v2 = MAGIC.to_vec();
        v2.extend_from_slice(&[2, 0]);
        v2.extend_from_slice(&(len as u32).to_le_bytes());
        v2.extend_from_slice(&v1[10..]);
        let t = Tensor::from_npy_bytes(&v2).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_attention("/nonexistent/attn.npy", ClsToken::None).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn save_vector_round_trip() {
        let f = tempfile::NamedTempFile::new().unwrap();
        save_vector(&[0.1, 0.2], f.path()).unwrap();
        let back = load_vector(f.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].to_bits(), 0.1f32.to_bits());
        assert_eq!(back[1].to_bits(), 0.2f32.to_bits());
    }

    #[test]
    fn save_empty_vector() {
        let f = tempfile::NamedTempFile::new().unwrap();
        save_vector(&[], f.path()).unwrap();
        assert!(load_vector(f.path()).unwrap().is_empty());
    }

    #[test]
    fn save_nan_vector_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(
            save_vector(&[f32::NAN], f.path()),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn strip_cls_removes_row_and_column_zero() {
        // 1 head, 3 tokens, value = 10*q + k
        let data: Vec<f32> = (0..9).map(|i| (10 * (i / 3) + i % 3) as f32).collect();
        let maps = AttentionMaps::new(1, 3, data).unwrap();
        let stripped = maps.strip_leading_token().unwrap();
        assert_eq!(stripped.tokens(), 2);
        assert_eq!(stripped.data(), &[11.0, 12.0, 21.0, 22.0]);
    }

    #[test]
    fn row_stochastic_violation_reports_row() {
        let mut data = vec![0.5; 8];
        data[6] = 0.9; // head 1, query 1
        let maps = AttentionMaps::new(2, 2, data).unwrap();
        let v = maps.row_stochastic_violation(ROW_SUM_TOLERANCE).unwrap();
        assert_eq!((v.head, v.query), (1, 1));
        assert!((v.sum - 1.4).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in prop::collection::vec(0usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut x = seed;
            let data: Vec<f32> = (0..n).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let v = f32::from_bits((x >> 32) as u32);
                if v.is_finite() { v } else { 1.5 }
            }).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::from_npy_bytes(&t.to_npy_bytes()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
