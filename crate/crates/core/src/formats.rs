//! Little-endian binary artefacts exchanged between pipeline stages.
//!
//! Every file starts with a 5-byte magic, a `u16` format version, the `u64`
//! config hash of the stage that wrote it and the `u64` seed.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::Window;
use crate::probe::WindowEmbedding;
use crate::tokenizer::{Axis, MovementSegment, TokenSequence, SEGMENT_LEN};

pub const WINDOWS_MAGIC: &[u8; 5] = b"BWIN1";
pub const TOKENS_MAGIC: &[u8; 5] = b"BSEG1";
pub const EMBEDDINGS_MAGIC: &[u8; 5] = b"BEMB1";
pub const FORMAT_VERSION: u16 = 1;

const NO_LABEL: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub config_hash: u64,
    pub seed: u64,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(magic: &[u8; 5], h: Header) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u16(FORMAT_VERSION);
        w.u64(h.config_hash);
        w.u64(h.seed);
        w
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) -> Result<()> {
        let n = u16::try_from(s.len()).map_err(|_| Error::Format(format!("string too long: {} bytes", s.len())))?;
        self.u16(n);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn label(&mut self, l: Option<u32>) {
        self.u32(l.unwrap_or(NO_LABEL));
    }
    fn count(&mut self, n: usize) -> Result<()> {
        self.u32(u32::try_from(n).map_err(|_| Error::Format(format!("count {n} exceeds u32")))?);
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn header(buf: &'a [u8], magic: &[u8; 5]) -> Result<(Self, Header)> {
        let mut r = Self { buf, pos: 0 };
        if r.take(5)? != magic {
            return Err(Error::Format(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{} version {version} unsupported (expected {FORMAT_VERSION})",
                String::from_utf8_lossy(magic)
            )));
        }
        let h = Header {
            config_hash: r.u64()?,
            seed: r.u64()?,
        };
        Ok((r, h))
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
    }
    fn label(&mut self) -> Result<Option<u32>> {
        let v = self.u32()?;
        Ok((v != NO_LABEL).then_some(v))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Windows keep full f64 precision so re-tokenizing a reloaded file is exact.
pub fn encode_windows(windows: &[Window], header: Header) -> Result<Vec<u8>> {
    let mut w = Writer::header(WINDOWS_MAGIC, header);
    w.count(windows.len())?;
    for win in windows {
        w.str(&win.subject_id)?;
        w.u32(win.index);
        w.label(win.label);
        w.f64(win.sample_rate_hz);
        w.f64(win.duration_s);
        w.f64(win.start_time_s);
        w.count(win.data.len())?;
        for s in &win.data {
            for &v in s {
                w.f64(v);
            }
        }
    }
    Ok(w.buf)
}

pub fn decode_windows(bytes: &[u8]) -> Result<(Header, Vec<Window>)> {
    let (mut r, h) = Reader::header(bytes, WINDOWS_MAGIC)?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let subject_id = r.str()?;
        let index = r.u32()?;
        let label = r.label()?;
        let sample_rate_hz = r.f64()?;
        let duration_s = r.f64()?;
        let start_time_s = r.f64()?;
        let len = r.u32()? as usize;
        let mut data = Vec::with_capacity(len.min(1 << 20));
        for _ in 0..len {
            data.push([r.f64()?, r.f64()?, r.f64()?]);
        }
        out.push(Window {
            subject_id,
            index,
            data,
            sample_rate_hz,
            duration_s,
            label,
            start_time_s,
        });
    }
    r.finish()?;
    Ok((h, out))
}

/// Token waveforms are stored as f32, like checkpoint weights.
pub fn encode_tokens(seqs: &[TokenSequence], header: Header) -> Result<Vec<u8>> {
    let mut w = Writer::header(TOKENS_MAGIC, header);
    w.count(seqs.len())?;
    for s in seqs {
        w.str(&s.subject_id)?;
        w.u32(s.window_index);
        w.label(s.label);
        w.f64(s.sample_rate_hz);
        w.f64(s.window_duration_s);
        w.count(s.tokens.len())?;
        for t in &s.tokens {
            w.u8(t.axis as u8);
            w.count(t.start_idx)?;
            w.count(t.end_idx)?;
            w.count(t.duration_samples)?;
            w.f64(t.midpoint_time_s);
            w.u8(t.merged as u8);
            for &v in &t.waveform {
                w.f32(v as f32);
            }
        }
    }
    Ok(w.buf)
}

pub fn decode_tokens(bytes: &[u8]) -> Result<(Header, Vec<TokenSequence>)> {
    let (mut r, h) = Reader::header(bytes, TOKENS_MAGIC)?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let subject_id = r.str()?;
        let window_index = r.u32()?;
        let label = r.label()?;
        let sample_rate_hz = r.f64()?;
        let window_duration_s = r.f64()?;
        let m = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(m.min(1 << 16));
        for _ in 0..m {
            let a = r.u8()?;
            let axis = Axis::from_index(a).ok_or_else(|| Error::Format(format!("bad axis id {a}")))?;
            let start_idx = r.u32()? as usize;
            let end_idx = r.u32()? as usize;
            let duration_samples = r.u32()? as usize;
            let midpoint_time_s = r.f64()?;
            let merged = r.u8()? != 0;
            let mut waveform = [0.0; SEGMENT_LEN];
            for v in waveform.iter_mut() {
                *v = r.f32()? as f64;
            }
            tokens.push(MovementSegment {
                axis,
                start_idx,
                end_idx,
                duration_samples,
                midpoint_time_s,
                waveform,
                merged,
            });
        }
        out.push(TokenSequence {
            subject_id,
            window_index,
            label,
            sample_rate_hz,
            window_duration_s,
            tokens,
        });
    }
    r.finish()?;
    Ok((h, out))
}

/// Header dimension comes first so readers can size buffers up front.
pub fn encode_embeddings(emb: &[WindowEmbedding], dim: usize, header: Header) -> Result<Vec<u8>> {
    let mut w = Writer::header(EMBEDDINGS_MAGIC, header);
    w.count(dim)?;
    w.count(emb.len())?;
    for e in emb {
        if e.features.len() != dim {
            return Err(Error::Contract(format!(
                "embedding has {} features, header says {dim}",
                e.features.len()
            )));
        }
        w.str(&e.subject_id)?;
        w.u32(e.window_index);
        w.label(e.label);
        for &v in &e.features {
            w.f32(v as f32);
        }
    }
    Ok(w.buf)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(Header, usize, Vec<WindowEmbedding>)> {
    let (mut r, h) = Reader::header(bytes, EMBEDDINGS_MAGIC)?;
    let dim = r.u32()? as usize;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let subject_id = r.str()?;
        let window_index = r.u32()?;
        let label = r.label()?;
        let features = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        out.push(WindowEmbedding {
            subject_id,
            window_index,
            label,
            features,
        });
    }
    r.finish()?;
    Ok((h, dim, out))
}

/// Reads only the header, for staleness checks.
pub fn peek_header(path: &Path, magic: &[u8; 5]) -> Result<Header> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; 23];
    f.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(Reader::header(&buf, magic)?.1)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
