//! Canonical, schema-validated binary encoding of [`ProvEntry`] records.
//!
//! The encoding is a deterministic CBOR map: UTF-8 string keys in bytewise
//! order, minimal-length integer arguments, definite lengths only, and
//! weights as IEEE-754 binary64 (NaN and negative zero are rejected). These
//! are exactly the bytes signatures cover and Merkle leaves commit to, so
//! the decoder accepts nothing the encoder could not have produced: any
//! non-minimal integer, indefinite-length item, out-of-order key, or
//! trailing byte is an error, checked before any signature verification
//! runs at higher layers.

use crate::entry::{
    Eid, InvariantViolation, ProvEntry, TrustLevel, EID_LEN, HASH_LEN, NONCE_LEN, SIG_LEN,
};

/// Map keys in the frozen canonical (bytewise-sorted) order.
const KEYS: [&str; 11] = [
    "content",
    "eid",
    "h_ctx",
    "h_src",
    "nonce",
    "parent_weights",
    "parents",
    "sigma",
    "trust",
    "ts",
    "writer",
];

const MAJOR_UINT: u8 = 0;
const MAJOR_BYTES: u8 = 2;
const MAJOR_TEXT: u8 = 3;
const MAJOR_ARRAY: u8 = 4;
const MAJOR_MAP: u8 = 5;
const MAJOR_SIMPLE: u8 = 7;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    /// A field constraint failed at encode time.
    #[error("invariant violation: {0}")]
    InvariantViolation(#[from] InvariantViolation),
    /// The bytes are not a canonical encoding (truncated, non-minimal,
    /// indefinite-length, out-of-order keys, forbidden float, trailing data).
    #[error("malformed encoding: {0}")]
    MalformedEncoding(String),
    /// The bytes decode structurally but violate the entry schema
    /// (wrong type, wrong byte length, weight out of range, length mismatch).
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::MalformedEncoding(msg.into())
}

fn schema(msg: impl Into<String>) -> CodecError {
    CodecError::SchemaViolation(msg.into())
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

fn put_header(out: &mut Vec<u8>, major: u8, value: u64) {
    let m = major << 5;
    if value < 24 {
        out.push(m | value as u8);
    } else if value <= 0xff {
        out.push(m | 24);
        out.push(value as u8);
    } else if value <= 0xffff {
        out.push(m | 25);
        out.extend_from_slice(&(value as u16).to_be_bytes());
    } else if value <= 0xffff_ffff {
        out.push(m | 26);
        out.extend_from_slice(&(value as u32).to_be_bytes());
    } else {
        out.push(m | 27);
        out.extend_from_slice(&value.to_be_bytes());
    }
}

fn put_uint(out: &mut Vec<u8>, v: u64) {
    put_header(out, MAJOR_UINT, v);
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_header(out, MAJOR_BYTES, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_header(out, MAJOR_TEXT, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.push((MAJOR_SIMPLE << 5) | 27);
    out.extend_from_slice(&v.to_bits().to_be_bytes());
}

fn encode_fields(entry: &ProvEntry, include_sigma: bool) -> Result<Vec<u8>, CodecError> {
    entry.validate()?;
    let mut out = Vec::with_capacity(256 + entry.content.len());
    let nkeys = if include_sigma { 11 } else { 10 };
    put_header(&mut out, MAJOR_MAP, nkeys);
    for key in KEYS {
        if key == "sigma" && !include_sigma {
            continue;
        }
        put_text(&mut out, key);
        match key {
            "content" => put_bytes(&mut out, &entry.content),
            "eid" => put_bytes(&mut out, entry.eid.as_bytes()),
            "h_ctx" => put_bytes(&mut out, &entry.h_ctx),
            "h_src" => put_bytes(&mut out, &entry.h_src),
            "nonce" => put_bytes(&mut out, &entry.nonce),
            "parent_weights" => {
                put_header(&mut out, MAJOR_ARRAY, entry.parent_weights.len() as u64);
                for &w in &entry.parent_weights {
                    put_f64(&mut out, w);
                }
            }
            "parents" => {
                put_header(&mut out, MAJOR_ARRAY, entry.parents.len() as u64);
                for p in &entry.parents {
                    put_bytes(&mut out, p.as_bytes());
                }
            }
            "sigma" => put_bytes(&mut out, &entry.sigma),
            "trust" => put_uint(&mut out, entry.trust.as_u8() as u64),
            "ts" => put_uint(&mut out, entry.ts),
            "writer" => put_text(&mut out, &entry.writer),
            _ => unreachable!(),
        }
    }
    Ok(out)
}

/// Canonical encoding of the full record, including `sigma`.
///
/// This is the on-disk and wire form; equal entries always produce equal
/// bytes, and differing entries always differ.
pub fn encode_entry(entry: &ProvEntry) -> Result<Vec<u8>, CodecError> {
    encode_fields(entry, true)
}

/// Canonical encoding of every field except `sigma`: the exact message
/// that is signed and verified.
pub fn encode_signed_view(entry: &ProvEntry) -> Result<Vec<u8>, CodecError> {
    encode_fields(entry, false)
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn byte(&mut self) -> Result<u8, CodecError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| malformed("truncated"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| malformed("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    /// Reads a header, enforcing minimal-length argument encoding and
    /// rejecting indefinite-length items.
    fn header(&mut self) -> Result<(u8, u64), CodecError> {
        let first = self.byte()?;
        let major = first >> 5;
        let info = first & 0x1f;
        let value = match info {
            0..=23 => info as u64,
            24 => {
                let v = self.byte()? as u64;
                if v < 24 {
                    return Err(malformed("non-minimal 1-byte integer argument"));
                }
                v
            }
            25 => {
                let v = u16::from_be_bytes(self.take(2)?.try_into().unwrap()) as u64;
                if v <= 0xff {
                    return Err(malformed("non-minimal 2-byte integer argument"));
                }
                v
            }
            26 => {
                let v = u32::from_be_bytes(self.take(4)?.try_into().unwrap()) as u64;
                if v <= 0xffff {
                    return Err(malformed("non-minimal 4-byte integer argument"));
                }
                v
            }
            27 => {
                // Major 7 with additional 27 is a binary64 float, whose
                // payload is read by the caller, not an integer argument.
                if major == MAJOR_SIMPLE {
                    return Ok((major, 27));
                }
                let v = u64::from_be_bytes(self.take(8)?.try_into().unwrap());
                if v <= 0xffff_ffff {
                    return Err(malformed("non-minimal 8-byte integer argument"));
                }
                v
            }
            31 => return Err(malformed("indefinite-length item")),
            _ => return Err(malformed(format!("reserved additional info {info}"))),
        };
        Ok((major, value))
    }

    fn expect_major(&mut self, want: u8, what: &str) -> Result<u64, CodecError> {
        let (major, value) = self.header()?;
        if major != want {
            return Err(schema(format!("{what}: wrong type (major {major})")));
        }
        Ok(value)
    }

    fn uint(&mut self, what: &str) -> Result<u64, CodecError> {
        self.expect_major(MAJOR_UINT, what)
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8], CodecError> {
        let len = self.expect_major(MAJOR_BYTES, what)?;
        self.take(len as usize)
    }

    fn fixed_bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N], CodecError> {
        let b = self.bytes(what)?;
        b.try_into()
            .map_err(|_| schema(format!("{what}: expected {N} bytes, got {}", b.len())))
    }

    fn text(&mut self, what: &str) -> Result<&'a str, CodecError> {
        let len = self.expect_major(MAJOR_TEXT, what)?;
        let raw = self.take(len as usize)?;
        std::str::from_utf8(raw).map_err(|_| schema(format!("{what}: invalid UTF-8")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CodecError> {
        let (major, info) = self.header()?;
        if major != MAJOR_SIMPLE || info != 27 {
            return Err(schema(format!("{what}: expected binary64 float")));
        }
        let v = f64::from_bits(u64::from_be_bytes(self.take(8)?.try_into().unwrap()));
        if v.is_nan() {
            return Err(malformed(format!("{what}: NaN is not canonical")));
        }
        if v == 0.0 && v.is_sign_negative() {
            return Err(malformed(format!("{what}: negative zero is not canonical")));
        }
        Ok(v)
    }
}

/// Decodes and fully validates one canonical entry record.
///
/// Validation runs before any signature check: a malformed or
/// schema-violating record never reaches the verifier.
pub fn decode_entry(bytes: &[u8]) -> Result<ProvEntry, CodecError> {
    let mut cur = Cursor::new(bytes);
    let entry = decode_one(&mut cur)?;
    if cur.pos != bytes.len() {
        return Err(malformed("trailing bytes after record"));
    }
    Ok(entry)
}

/// Decodes a concatenation of canonical entry records (the entry-file
/// persistence format).
pub fn decode_entry_stream(bytes: &[u8]) -> Result<Vec<ProvEntry>, CodecError> {
    let mut cur = Cursor::new(bytes);
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        out.push(decode_one(&mut cur)?);
    }
    Ok(out)
}

fn decode_one(cur: &mut Cursor<'_>) -> Result<ProvEntry, CodecError> {
    let nkeys = cur.expect_major(MAJOR_MAP, "record")?;
    if nkeys != KEYS.len() as u64 {
        return Err(schema(format!(
            "record: expected {} fields, got {nkeys}",
            KEYS.len()
        )));
    }

    let mut content = None;
    let mut eid = None;
    let mut h_ctx = None;
    let mut h_src = None;
    let mut nonce = None;
    let mut parent_weights = None;
    let mut parents = None;
    let mut sigma = None;
    let mut trust = None;
    let mut ts = None;
    let mut writer = None;

    for expected in KEYS {
        let key = cur.text("map key")?;
        if key != expected {
            // Known key out of canonical order or duplicated is a
            // canonicality failure; an unknown key is a schema failure.
            if KEYS.contains(&key) {
                return Err(malformed(format!(
                    "map key {key:?} out of canonical order (expected {expected:?})"
                )));
            }
            return Err(schema(format!("unknown map key {key:?}")));
        }
        match expected {
            "content" => content = Some(cur.bytes("content")?.to_vec()),
            "eid" => eid = Some(Eid(cur.fixed_bytes::<EID_LEN>("eid")?)),
            "h_ctx" => h_ctx = Some(cur.fixed_bytes::<HASH_LEN>("h_ctx")?),
            "h_src" => h_src = Some(cur.fixed_bytes::<HASH_LEN>("h_src")?),
            "nonce" => nonce = Some(cur.fixed_bytes::<NONCE_LEN>("nonce")?),
            "parent_weights" => {
                let n = cur.expect_major(MAJOR_ARRAY, "parent_weights")?;
                let mut ws = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let w = cur.f64("parent weight")?;
                    if !(0.0..=1.0).contains(&w) {
                        return Err(schema(format!("parent weight {w} out of [0,1]")));
                    }
                    ws.push(w);
                }
                parent_weights = Some(ws);
            }
            "parents" => {
                let n = cur.expect_major(MAJOR_ARRAY, "parents")?;
                let mut ps = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    ps.push(Eid(cur.fixed_bytes::<EID_LEN>("parent eid")?));
                }
                parents = Some(ps);
            }
            "sigma" => sigma = Some(cur.fixed_bytes::<SIG_LEN>("sigma")?),
            "trust" => {
                let v = cur.uint("trust")?;
                trust = Some(
                    u8::try_from(v)
                        .ok()
                        .and_then(TrustLevel::from_u8)
                        .ok_or_else(|| schema(format!("trust {v} out of range")))?,
                );
            }
            "ts" => ts = Some(cur.uint("ts")?),
            "writer" => writer = Some(cur.text("writer")?.to_string()),
            _ => unreachable!(),
        }
    }

    let entry = ProvEntry {
        eid: eid.unwrap(),
        content: content.unwrap(),
        writer: writer.unwrap(),
        h_src: h_src.unwrap(),
        h_ctx: h_ctx.unwrap(),
        trust: trust.unwrap(),
        parents: parents.unwrap(),
        parent_weights: parent_weights.unwrap(),
        ts: ts.unwrap(),
        nonce: nonce.unwrap(),
        sigma: sigma.unwrap(),
    };
    match entry.validate() {
        Ok(()) => Ok(entry),
        Err(e) => Err(schema(e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entry::sha256;

    pub(crate) fn sample_entry() -> ProvEntry {
        ProvEntry {
            eid: Eid::new_v7(0x018c_8000_0000, [7; 10]),
            content: b"note: quarterly invoice from vendor".to_vec(),
            writer: "agent:1".to_string(),
            h_src: sha256(b"source blob"),
            h_ctx: sha256(b"write context"),
            trust: TrustLevel::DerivedUntrusted,
            parents: vec![Eid::new_v7(0x018c_7fff_ff00, [3; 10])],
            parent_weights: vec![0.9],
            ts: 1_700_000_000_123_456_789,
            nonce: [0xA5; 16],
            sigma: [0x42; 64],
        }
    }

    #[test]
    fn round_trip() {
        let e = sample_entry();
        let bytes = encode_entry(&e).unwrap();
        assert_eq!(decode_entry(&bytes).unwrap(), e);
    }

    #[test]
    fn determinism() {
        let e = sample_entry();
        assert_eq!(encode_entry(&e).unwrap(), encode_entry(&e).unwrap());
    }

    #[test]
    fn nonce_change_changes_bytes() {
        let a = sample_entry();
        let mut b = a.clone();
        b.nonce[0] ^= 1;
        assert_ne!(encode_entry(&a).unwrap(), encode_entry(&b).unwrap());
    }

    #[test]
    fn signed_view_excludes_sigma() {
        let a = sample_entry();
        let mut b = a.clone();
        b.sigma = [0x99; 64];
        assert_eq!(encode_signed_view(&a).unwrap(), encode_signed_view(&b).unwrap());
        assert_ne!(encode_entry(&a).unwrap(), encode_signed_view(&a).unwrap());
    }

    #[test]
    fn rejects_oversized_nonce() {
        // Re-encode by hand with a 17-byte nonce in place of the 16-byte one.
        let e = sample_entry();
        let bytes = encode_entry(&e).unwrap();
        let needle = {
            let mut v = Vec::new();
            put_text(&mut v, "nonce");
            put_bytes(&mut v, &e.nonce);
            v
        };
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let mut patched = bytes[..at].to_vec();
        put_text(&mut patched, "nonce");
        put_bytes(&mut patched, &[0xA5; 17]);
        patched.extend_from_slice(&bytes[at + needle.len()..]);
        match decode_entry(&patched) {
            Err(CodecError::SchemaViolation(_)) => {}
            other => panic!("expected SchemaViolation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_minimal_integer() {
        // ts encoded with an 8-byte argument even though the value fits 4.
        let mut e = sample_entry();
        e.ts = 17; // fits in the immediate form
        let bytes = encode_entry(&e).unwrap();
        let needle = {
            let mut v = Vec::new();
            put_text(&mut v, "ts");
            put_uint(&mut v, 17);
            v
        };
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let mut patched = bytes[..at].to_vec();
        put_text(&mut patched, "ts");
        patched.push(0x18); // 1-byte argument form
        patched.push(17);
        patched.extend_from_slice(&bytes[at + needle.len()..]);
        match decode_entry(&patched) {
            Err(CodecError::MalformedEncoding(_)) => {}
            other => panic!("expected MalformedEncoding, got {other:?}"),
        }
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = encode_entry(&sample_entry()).unwrap();
        bytes.push(0x00);
        assert!(matches!(
            decode_entry(&bytes),
            Err(CodecError::MalformedEncoding(_))
        ));
    }

    #[test]
    fn rejects_negative_zero_weight() {
        let mut e = sample_entry();
        e.parent_weights = vec![0.0];
        let bytes = encode_entry(&e).unwrap();
        let pos_zero = 0f64.to_bits().to_be_bytes();
        let at = bytes
            .windows(8)
            .position(|w| w == pos_zero)
            .expect("encoded +0.0 weight present");
        let mut patched = bytes.clone();
        patched[at..at + 8].copy_from_slice(&(-0.0f64).to_bits().to_be_bytes());
        assert!(matches!(
            decode_entry(&patched),
            Err(CodecError::MalformedEncoding(_))
        ));
    }

    #[test]
    fn entry_stream_round_trips() {
        let a = sample_entry();
        let mut b = sample_entry();
        b.ts += 1;
        let mut buf = encode_entry(&a).unwrap();
        buf.extend(encode_entry(&b).unwrap());
        assert_eq!(decode_entry_stream(&buf).unwrap(), vec![a, b]);
    }
}
