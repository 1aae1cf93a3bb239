//! FCS 3.0 / 3.1 reader and a fixture writer.
//!
//! Supported DATA layouts: list mode with `$DATATYPE` `F` (32-bit float) or
//! `I` (unsigned integers of 16 or 32 bits per `$PnB`), in either byte order.

use std::collections::HashMap;

use super::FcmSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEADER_LEN: usize = 58;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn keyword(self, width: usize) -> String {
        let asc: Vec<String> = (1..=width).map(|i| i.to_string()).collect();
        match self {
            ByteOrder::Little => asc.join(","),
            ByteOrder::Big => asc.into_iter().rev().collect::<Vec<_>>().join(","),
        }
    }

    fn parse(value: &str) -> Result<Self> {
        let parts: Vec<usize> = value
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Fcs(format!("malformed $BYTEORD `{value}`")))?;
        let asc: Vec<usize> = (1..=parts.len()).collect();
        if parts == asc {
            Ok(ByteOrder::Little)
        } else if parts.iter().rev().copied().eq(asc) {
            Ok(ByteOrder::Big)
        } else {
            Err(Error::Fcs(format!("unsupported $BYTEORD `{value}`")))
        }
    }
}

fn header_offset(bytes: &[u8], at: usize) -> Result<usize> {
    let field = std::str::from_utf8(&bytes[at..at + 8]).map_err(|_| Error::Fcs("non-ASCII header offset".into()))?;
    let t = field.trim();
    if t.is_empty() {
        return Ok(0);
    }
    t.parse()
        .map_err(|_| Error::Fcs(format!("malformed header offset `{field}`")))
}

/// Splits a TEXT segment into keyword/value pairs. The first byte is the
/// delimiter; a doubled delimiter inside a token stands for one literal
/// delimiter. Keywords are upper-cased.
pub fn parse_text(text: &[u8]) -> Result<HashMap<String, String>> {
    let Some(&delim) = text.first() else {
        return Err(Error::Fcs("empty TEXT segment".into()));
    };
    let mut tokens: Vec<Vec<u8>> = Vec::new();
    let mut cur = Vec::new();
    let mut i = 1;
    while i < text.len() {
        let b = text[i];
        if b == delim {
            if i + 1 < text.len() && text[i + 1] == delim {
                cur.push(delim);
                i += 2;
                continue;
            }
            tokens.push(std::mem::take(&mut cur));
        } else {
            cur.push(b);
        }
        i += 1;
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    if !tokens.len().is_multiple_of(2) {
        return Err(Error::Fcs(format!("TEXT segment has an odd number of tokens ({})", tokens.len())));
    }
    let mut map = HashMap::new();
    for pair in tokens.chunks(2) {
        let k = String::from_utf8_lossy(&pair[0]).trim().to_ascii_uppercase();
        let v = String::from_utf8_lossy(&pair[1]).to_string();
        map.insert(k, v);
    }
    Ok(map)
}

fn required<'a>(kw: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    kw.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Fcs(format!("missing required keyword {key}")))
}

fn required_usize(kw: &HashMap<String, String>, key: &str) -> Result<usize> {
    let v = required(kw, key)?;
    v.trim()
        .parse()
        .map_err(|_| Error::Fcs(format!("keyword {key} is not an integer: `{v}`")))
}

/// Parses an FCS 3.0/3.1 byte stream into a sample with id `sample_id`.
pub fn parse_fcs(bytes: &[u8], sample_id: &str) -> Result<FcmSample> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Fcs(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    let version = &bytes[0..6];
    if version != b"FCS3.0" && version != b"FCS3.1" {
        return Err(Error::Fcs(format!(
            "unsupported version `{}`",
            String::from_utf8_lossy(version)
        )));
    }
    let text_start = header_offset(bytes, 10)?;
    let text_end = header_offset(bytes, 18)?;
    if text_start < HEADER_LEN || text_end < text_start || text_end >= bytes.len() {
        return Err(Error::Fcs(format!("TEXT segment [{text_start}, {text_end}] out of bounds")));
    }
    let kw = parse_text(&bytes[text_start..=text_end])?;

    let mut data_start = header_offset(bytes, 26)?;
    let mut data_end = header_offset(bytes, 34)?;
    if data_start == 0 && data_end == 0 {
        data_start = required_usize(&kw, "$BEGINDATA")?;
        data_end = required_usize(&kw, "$ENDDATA")?;
    }

    let n_par = required_usize(&kw, "$PAR")?;
    let n_tot = required_usize(&kw, "$TOT")?;
    let datatype = required(&kw, "$DATATYPE")?.trim().to_ascii_uppercase();
    let order = ByteOrder::parse(required(&kw, "$BYTEORD")?)?;
    if let Some(mode) = kw.get("$MODE") {
        if mode.trim() != "L" {
            return Err(Error::Fcs(format!("unsupported $MODE `{mode}`")));
        }
    }
    if n_par == 0 {
        return Err(Error::Fcs("$PAR is zero".into()));
    }

    let mut widths = Vec::with_capacity(n_par);
    let mut names = Vec::with_capacity(n_par);
    for p in 1..=n_par {
        let pn = required(&kw, &format!("$P{p}N"))?.trim().to_string();
        let ps = kw.get(&format!("$P{p}S")).map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
        names.push(ps.unwrap_or(pn));
        let bits = required_usize(&kw, &format!("$P{p}B"))?;
        let width = match (datatype.as_str(), bits) {
            ("F", 32) => 4,
            ("F", b) => return Err(Error::Fcs(format!("$DATATYPE F with $P{p}B={b}"))),
            ("I", 16) => 2,
            ("I", 32) => 4,
            ("I", b) => return Err(Error::Fcs(format!("$DATATYPE I with unsupported $P{p}B={b}"))),
            (other, _) => return Err(Error::Fcs(format!("unsupported $DATATYPE `{other}`"))),
        };
        widths.push(width);
    }

    let row_bytes: usize = widths.iter().sum();
    let expected = n_tot * row_bytes;
    let declared = if data_end >= data_start && !(data_start == 0 && data_end == 0) {
        data_end - data_start + 1
    } else {
        0
    };
    if declared != expected {
        return Err(Error::Fcs(format!(
            "DATA segment holds {declared} bytes, $TOT={n_tot} x {row_bytes} bytes per event needs {expected}"
        )));
    }
    if data_start + declared > bytes.len() {
        return Err(Error::Fcs(format!(
            "DATA segment ends at byte {} beyond file length {}",
            data_start + declared,
            bytes.len()
        )));
    }
    let data = &bytes[data_start..data_start + declared];

    let mut values = Vec::with_capacity(n_tot * n_par);
    let mut pos = 0;
    for _ in 0..n_tot {
        for &w in &widths {
            let chunk = &data[pos..pos + w];
            let v = match (datatype.as_str(), w, order) {
                ("F", 4, ByteOrder::Little) => f32::from_le_bytes(chunk.try_into().unwrap()),
                ("F", 4, ByteOrder::Big) => f32::from_be_bytes(chunk.try_into().unwrap()),
                ("I", 2, ByteOrder::Little) => u16::from_le_bytes(chunk.try_into().unwrap()) as f32,
                ("I", 2, ByteOrder::Big) => u16::from_be_bytes(chunk.try_into().unwrap()) as f32,
                ("I", 4, ByteOrder::Little) => u32::from_le_bytes(chunk.try_into().unwrap()) as f32,
                ("I", 4, ByteOrder::Big) => u32::from_be_bytes(chunk.try_into().unwrap()) as f32,
                _ => unreachable!("widths validated above"),
            };
            values.push(v);
            pos += w;
        }
    }
    if n_tot == 0 {
        return Err(Error::Fcs("$TOT is zero".into()));
    }
    FcmSample::new(sample_id, names, Tensor::from_vec(n_tot, n_par, values), None)
        .map_err(|e| Error::Fcs(e.to_string()))
}

/// Builds FCS 3.1 files for tests and examples. Keywords may be edited
/// freely before [`FcsWriter::to_bytes`], including into invalid states.
#[derive(Clone, Debug)]
pub struct FcsWriter {
    pub version: &'static str,
    pub delimiter: u8,
    pub keywords: Vec<(String, String)>,
    pub data: Vec<u8>,
}

impl FcsWriter {
    fn base(n_tot: usize, n_par: usize, datatype: &str, order: ByteOrder, width: usize) -> Self {
        let mut keywords = vec![
            ("$BYTEORD".to_string(), order.keyword(width)),
            ("$DATATYPE".to_string(), datatype.to_string()),
            ("$MODE".to_string(), "L".to_string()),
            ("$NEXTDATA".to_string(), "0".to_string()),
            ("$PAR".to_string(), n_par.to_string()),
            ("$TOT".to_string(), n_tot.to_string()),
        ];
        keywords.extend([("$BEGINANALYSIS".into(), "0".into()), ("$ENDANALYSIS".into(), "0".into())]);
        keywords.extend([("$BEGINSTEXT".into(), "0".into()), ("$ENDSTEXT".into(), "0".into())]);
        FcsWriter {
            version: "FCS3.1",
            delimiter: b'/',
            keywords,
            data: Vec::new(),
        }
    }

    /// Float32 list-mode file; `names[p]` becomes `$P{p+1}N`.
    pub fn float32(names: &[&str], events: &Tensor, order: ByteOrder) -> Self {
        let (n, f) = events.dims();
        assert_eq!(names.len(), f);
        let mut w = Self::base(n, f, "F", order, 4);
        for (p, name) in names.iter().enumerate() {
            w.set(&format!("$P{}N", p + 1), name);
            w.set(&format!("$P{}B", p + 1), "32");
            w.set(&format!("$P{}E", p + 1), "0,0");
            w.set(&format!("$P{}R", p + 1), "262144");
        }
        for v in events.data() {
            w.data.extend_from_slice(&match order {
                ByteOrder::Little => v.to_le_bytes(),
                ByteOrder::Big => v.to_be_bytes(),
            });
        }
        w
    }

    /// Unsigned-integer list-mode file with `bits` of 16 or 32.
    pub fn uint(names: &[&str], rows: &[Vec<u32>], bits: usize, order: ByteOrder) -> Self {
        assert!(bits == 16 || bits == 32);
        let f = names.len();
        let mut w = Self::base(rows.len(), f, "I", order, bits / 8);
        for (p, name) in names.iter().enumerate() {
            w.set(&format!("$P{}N", p + 1), name);
            w.set(&format!("$P{}B", p + 1), &bits.to_string());
            w.set(&format!("$P{}E", p + 1), "0,0");
            w.set(&format!("$P{}R", p + 1), if bits == 16 { "65536" } else { "4294967296" });
        }
        for row in rows {
            assert_eq!(row.len(), f);
            for &v in row {
                match (bits, order) {
                    (16, ByteOrder::Little) => w.data.extend_from_slice(&(v as u16).to_le_bytes()),
                    (16, ByteOrder::Big) => w.data.extend_from_slice(&(v as u16).to_be_bytes()),
                    (_, ByteOrder::Little) => w.data.extend_from_slice(&v.to_le_bytes()),
                    (_, ByteOrder::Big) => w.data.extend_from_slice(&v.to_be_bytes()),
                }
            }
        }
        w
    }

    pub fn set(&mut self, key: &str, value: &str) -> &mut Self {
        match self.keywords.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value.to_string(),
            None => self.keywords.push((key.to_string(), value.to_string())),
        }
        self
    }

    pub fn remove(&mut self, key: &str) -> &mut Self {
        self.keywords.retain(|(k, _)| k != key);
        self
    }

    fn escape(&self, s: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(s.len());
        for &b in s.as_bytes() {
            out.push(b);
            if b == self.delimiter {
                out.push(b);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        // $BEGINDATA/$ENDDATA are zero padded to a fixed width so the TEXT
        // length does not depend on their values.
        let text_for = |begin: usize, end: usize| -> Vec<u8> {
            let mut t = vec![self.delimiter];
            let mut push = |k: &str, v: &str| {
                t.extend(self.escape(k));
                t.push(self.delimiter);
                t.extend(self.escape(v));
                t.push(self.delimiter);
            };
            for (k, v) in &self.keywords {
                push(k, v);
            }
            push("$BEGINDATA", &format!("{begin:020}"));
            push("$ENDDATA", &format!("{end:020}"));
            t
        };
        let text_len = text_for(0, 0).len();
        let text_start = HEADER_LEN;
        let text_end = text_start + text_len - 1;
        let (data_start, data_end) = if self.data.is_empty() {
            (0, 0)
        } else {
            (text_end + 1, text_end + self.data.len())
        };
        let text = text_for(data_start, data_end);

        let mut out = Vec::with_capacity(text_end + 1 + self.data.len());
        out.extend_from_slice(self.version.as_bytes());
        out.extend_from_slice(b"    ");
        let fits = |v: usize| v <= 99_999_999;
        for v in [text_start, text_end] {
            out.extend_from_slice(format!("{v:>8}").as_bytes());
        }
        for v in [data_start, data_end] {
            let v = if fits(data_end) { v } else { 0 };
            out.extend_from_slice(format!("{v:>8}").as_bytes());
        }
        out.extend_from_slice(format!("{:>8}{:>8}", 0, 0).as_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&self.data);
        out
    }
}
