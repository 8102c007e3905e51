//! Reading and writing a subset of the numpy npy format.
//!
//! Only format version 1.0, C order, and the little-endian dtypes `f4`, `u1`
//! and `u2` are supported. Headers are emitted exactly as numpy writes them
//! (including its spare growth padding), so files round-trip byte for byte
//! with `numpy.save`.
//!
//! Format reference: <https://numpy.org/doc/stable/reference/generated/numpy.lib.format.html>

use std::fmt;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

/// numpy reserves room for a 21-digit leading dimension when writing headers.
const GROWTH_AXIS_MAX_DIGITS: usize = 21;
const HEADER_ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("not an npy file (bad magic)")]
    BadMagic,
    #[error("unsupported npy version {0}.{1}; only 1.0 is supported")]
    UnsupportedVersion(u8, u8),
    #[error("unsupported dtype {0:?}; expected <f4, |u1 or <u2")]
    UnsupportedDtype(String),
    #[error("fortran-order arrays are not supported")]
    FortranOrderUnsupported,
    #[error("malformed npy header: {0}")]
    MalformedHeader(String),
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("payload has {extra} trailing bytes after {expected} expected bytes")]
    TrailingData { expected: usize, extra: usize },
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dtype {header} in header does not match {values} values")]
    DtypeMismatch { header: NpyDtype, values: NpyDtype },
    #[error("rank {0} exceeds the supported maximum of 3")]
    RankTooLarge(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NpyDtype {
    F4,
    U1,
    U2,
}

impl NpyDtype {
    pub fn size(self) -> usize {
        match self {
            Self::F4 => 4,
            Self::U1 => 1,
            Self::U2 => 2,
        }
    }

    /// Type descriptor as numpy writes it.
    pub fn descr(self) -> &'static str {
        match self {
            Self::F4 => "<f4",
            Self::U1 => "|u1",
            Self::U2 => "<u2",
        }
    }

    fn parse(descr: &str) -> Result<Self, NpyError> {
        match descr {
            "<f4" => Ok(Self::F4),
            "|u1" | "<u1" => Ok(Self::U1),
            "<u2" => Ok(Self::U2),
            other => Err(NpyError::UnsupportedDtype(other.to_string())),
        }
    }
}

impl fmt::Display for NpyDtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.descr())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: NpyDtype,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
}

impl NpyHeader {
    pub fn new(dtype: NpyDtype, shape: Vec<usize>) -> Self {
        Self {
            dtype,
            fortran_order: false,
            shape,
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    fn dict_repr(&self) -> String {
        let shape = match self.shape.as_slice() {
            [] => "()".to_string(),
            [d] => format!("({d},)"),
            dims => format!(
                "({})",
                dims.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            ),
        };
        let fortran = if self.fortran_order { "True" } else { "False" };
        let mut out = format!(
            "{{'descr': '{}', 'fortran_order': {fortran}, 'shape': {shape}, }}",
            self.dtype.descr()
        );
        if let Some(&axis) = self.shape.first() {
            let digits = axis.to_string().len();
            out.extend(std::iter::repeat_n(' ', GROWTH_AXIS_MAX_DIGITS.saturating_sub(digits)));
        }
        out
    }
}

/// Decoded tensor values.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F4(Vec<f32>),
    U1(Vec<u8>),
    U2(Vec<u16>),
}

impl NpyData {
    pub fn dtype(&self) -> NpyDtype {
        match self {
            Self::F4(_) => NpyDtype::F4,
            Self::U1(_) => NpyDtype::U1,
            Self::U2(_) => NpyDtype::U2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F4(v) => v.len(),
            Self::U1(v) => v.len(),
            Self::U2(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn read_npy(path: &Path) -> Result<(NpyHeader, NpyData), NpyError> {
    parse_npy(&std::fs::read(path)?)
}

/// Parses a complete npy file held in memory.
pub fn parse_npy(bytes: &[u8]) -> Result<(NpyHeader, NpyData), NpyError> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(NpyError::BadMagic);
    }
    if bytes.len() < 10 {
        return Err(NpyError::MalformedHeader("file ends inside the preamble".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(NpyError::UnsupportedVersion(major, minor));
    }
    let header_len = usize::from(u16::from_le_bytes([bytes[8], bytes[9]]));
    let payload_start = 10 + header_len;
    if bytes.len() < payload_start {
        return Err(NpyError::MalformedHeader("file ends inside the header".into()));
    }
    let text = std::str::from_utf8(&bytes[10..payload_start])
        .map_err(|_| NpyError::MalformedHeader("header is not ASCII".into()))?;
    let header = parse_header_dict(text)?;
    if header.fortran_order {
        return Err(NpyError::FortranOrderUnsupported);
    }
    if header.shape.len() > 3 {
        return Err(NpyError::RankTooLarge(header.shape.len()));
    }

    let payload = &bytes[payload_start..];
    let expected = header
        .shape
        .iter()
        .try_fold(header.dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| NpyError::MalformedHeader("shape overflows".into()))?;
    if payload.len() < expected {
        return Err(NpyError::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(NpyError::TrailingData {
            expected,
            extra: payload.len() - expected,
        });
    }
    let data = match header.dtype {
        NpyDtype::F4 => NpyData::F4(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        NpyDtype::U1 => NpyData::U1(payload.to_vec()),
        NpyDtype::U2 => NpyData::U2(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
    };
    Ok((header, data))
}

/// Serializes a tensor to npy bytes.
pub fn write_npy(header: &NpyHeader, values: &NpyData) -> Result<Vec<u8>, NpyError> {
    if header.fortran_order {
        return Err(NpyError::FortranOrderUnsupported);
    }
    if header.shape.len() > 3 {
        return Err(NpyError::RankTooLarge(header.shape.len()));
    }
    if header.dtype != values.dtype() {
        return Err(NpyError::DtypeMismatch {
            header: header.dtype,
            values: values.dtype(),
        });
    }
    let expected = header.element_count();
    if values.len() != expected {
        return Err(NpyError::ShapeMismatch {
            shape: header.shape.clone(),
            expected,
            actual: values.len(),
        });
    }

    let mut dict = header.dict_repr();
    // magic + version + u16 length + dict + trailing newline
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');
    let header_len = u16::try_from(dict.len())
        .map_err(|_| NpyError::MalformedHeader("header longer than 65535 bytes".into()))?;

    let mut out = Vec::with_capacity(10 + dict.len() + expected * header.dtype.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    match values {
        NpyData::F4(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::U1(v) => out.extend_from_slice(v),
        NpyData::U2(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn write_npy_file(path: &Path, header: &NpyHeader, values: &NpyData) -> Result<(), NpyError> {
    let bytes = write_npy(header, values)?;
    crate::fsio::write_atomic(path, &bytes)?;
    Ok(())
}

// --- header dict parsing ---

#[derive(Debug)]
enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<usize>),
}

struct DictParser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> DictParser<'a> {
    fn err(&self, what: &str) -> NpyError {
        NpyError::MalformedHeader(format!("{what} at byte {}", self.pos))
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

    fn expect(&mut self, c: u8) -> Result<(), NpyError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected {:?}", c as char)))
        }
    }

    fn string(&mut self) -> Result<String, NpyError> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.src.len() {
            return Err(self.err("unterminated string"));
        }
        let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn word(&mut self) -> &'a [u8] {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        &self.src[start..self.pos]
    }

    fn tuple(&mut self) -> Result<Vec<usize>, NpyError> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            if self.peek() == Some(b')') {
                self.pos += 1;
                return Ok(dims);
            }
            let w = self.word();
            // numpy may write long integers with an L suffix under Python 2.
            let w = w.strip_suffix(b"L").unwrap_or(w);
            let dim = std::str::from_utf8(w)
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| self.err("expected dimension"))?;
            dims.push(dim);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b')') => {}
                _ => return Err(self.err("expected ',' or ')'")),
            }
        }
    }

    fn literal(&mut self) -> Result<Literal, NpyError> {
        match self.peek() {
            Some(b'\'' | b'"') => Ok(Literal::Str(self.string()?)),
            Some(b'(') => Ok(Literal::Tuple(self.tuple()?)),
            _ => match self.word() {
                b"True" => Ok(Literal::Bool(true)),
                b"False" => Ok(Literal::Bool(false)),
                _ => Err(self.err("unsupported literal")),
            },
        }
    }
}

fn parse_header_dict(text: &str) -> Result<NpyHeader, NpyError> {
    let mut p = DictParser {
        src: text.as_bytes(),
        pos: 0,
    };
    p.expect(b'{')?;
    let (mut descr, mut fortran, mut shape) = (None, None, None);
    loop {
        if p.peek() == Some(b'}') {
            break;
        }
        let key = p.string()?;
        p.expect(b':')?;
        let value = p.literal()?;
        match (key.as_str(), value) {
            ("descr", Literal::Str(s)) => descr = Some(s),
            ("fortran_order", Literal::Bool(b)) => fortran = Some(b),
            ("shape", Literal::Tuple(t)) => shape = Some(t),
            (k, v) => {
                return Err(NpyError::MalformedHeader(format!(
                    "unexpected entry {k:?}: {v:?}"
                )))
            }
        }
        match p.peek() {
            Some(b',') => p.pos += 1,
            Some(b'}') => {}
            _ => return Err(p.err("expected ',' or '}'")),
        }
    }
    let missing = |k: &str| NpyError::MalformedHeader(format!("missing key {k:?}"));
    let dtype = NpyDtype::parse(&descr.ok_or_else(|| missing("descr"))?)?;
    Ok(NpyHeader {
        dtype,
        fortran_order: fortran.ok_or_else(|| missing("fortran_order"))?,
        shape: shape.ok_or_else(|| missing("shape"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_layout() {
        let h = NpyHeader::new(NpyDtype::F4, vec![1]);
        let bytes = write_npy(&h, &NpyData::F4(vec![1.5])).unwrap();
        assert_eq!(bytes.len(), 128 + 4);
        assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes[10 + header_len - 1], b'\n');
        assert!(bytes[10..].starts_with(b"{'descr': '<f4', 'fortran_order': False, 'shape': (1,), }"));
        assert_eq!(&bytes[128..], &1.5f32.to_le_bytes());
    }

    #[test]
    fn empty_tensor() {
        let h = NpyHeader::new(NpyDtype::F4, vec![0]);
        let bytes = write_npy(&h, &NpyData::F4(vec![])).unwrap();
        assert_eq!(bytes.len(), 128);
        let (h2, d) = parse_npy(&bytes).unwrap();
        assert_eq!(h2, h);
        assert!(d.is_empty());
    }

    #[test]
    fn truncated_u2_payload() {
        let h = NpyHeader::new(NpyDtype::U2, vec![2, 2]);
        let mut bytes = write_npy(&h, &NpyData::U2(vec![1, 2, 3, 4])).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(
            parse_npy(&bytes),
            Err(NpyError::TruncatedPayload {
                expected: 8,
                actual: 6
            })
        ));
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(matches!(parse_npy(b"NOTNPY\x01\x00"), Err(NpyError::BadMagic)));
        let h = NpyHeader::new(NpyDtype::U1, vec![1]);
        let mut bytes = write_npy(&h, &NpyData::U1(vec![9])).unwrap();
        bytes[6] = 2;
        assert!(matches!(parse_npy(&bytes), Err(NpyError::UnsupportedVersion(2, 0))));
    }

    #[test]
    fn rejects_big_endian() {
        let h = NpyHeader::new(NpyDtype::F4, vec![1]);
        let mut bytes = write_npy(&h, &NpyData::F4(vec![0.0])).unwrap();
        let at = bytes.windows(3).position(|w| w == b"<f4").unwrap();
        bytes[at] = b'>';
        assert!(matches!(parse_npy(&bytes), Err(NpyError::UnsupportedDtype(d)) if d == ">f4"));
    }

    #[test]
    fn shape_mismatch_on_write() {
        let h = NpyHeader::new(NpyDtype::U1, vec![2, 2]);
        assert!(matches!(
            write_npy(&h, &NpyData::U1(vec![1, 2, 3])),
            Err(NpyError::ShapeMismatch { expected: 4, actual: 3, .. })
        ));
        assert!(matches!(
            write_npy(&h, &NpyData::U2(vec![1, 2, 3, 4])),
            Err(NpyError::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn header_parser_tolerates_spacing() {
        let h = parse_header_dict("{ \"shape\" :(3 , 4) ,'fortran_order':False,'descr':'<u2'}").unwrap();
        assert_eq!(h, NpyHeader::new(NpyDtype::U2, vec![3, 4]));
        let h = parse_header_dict("{'descr': '<f4', 'fortran_order': False, 'shape': (), }").unwrap();
        assert!(h.shape.is_empty());
        assert_eq!(h.element_count(), 1);
    }
}
