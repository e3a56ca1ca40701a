//! Strip dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! header:  b"RCLD" | version u16 | height u32 | width u32 | count u32
//! record:  word_len u16 | word bytes (UTF-8, word_len bytes)
//!          | word_chars × (x_start u32, x_end u32)
//!          | height × width f32 pixels, row-major
//! ```
//!
//! `word_chars` is the number of characters in the word; the alphabet is
//! ASCII, so it equals `word_len`.

use std::io::{Read, Write};

use super::{Result, TextStrip, TextgenError};

pub const MAGIC: &[u8; 4] = b"RCLD";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u16,
    pub height: u32,
    pub width: u32,
    pub count: u32,
}

pub fn write_dataset<W: Write>(mut out: W, strips: &[TextStrip]) -> Result<()> {
    let (h, w) = strips.first().map_or((0, 0), |s| (s.height, s.width));
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&(strips.len() as u32).to_le_bytes())?;
    for s in strips {
        if s.height != h || s.width != w {
            return Err(TextgenError::Format("strips with mixed geometry".into()));
        }
        let bytes = s.text.as_bytes();
        out.write_all(&(bytes.len() as u16).to_le_bytes())?;
        out.write_all(bytes)?;
        for &(a, b) in &s.glyph_spans {
            out.write_all(&(a as u32).to_le_bytes())?;
            out.write_all(&(b as u32).to_le_bytes())?;
        }
        for v in &s.pixels {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_header<R: Read>(r: &mut R) -> Result<DatasetHeader> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != MAGIC {
        return Err(TextgenError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(TextgenError::Format(format!("unsupported version {version}")));
    }
    Ok(DatasetHeader {
        version,
        height: u32::from_le_bytes(read_exact(r)?),
        width: u32::from_le_bytes(read_exact(r)?),
        count: u32::from_le_bytes(read_exact(r)?),
    })
}

/// Reads a whole dataset. Record seeds are not stored and come back as 0.
pub fn read_dataset<R: Read>(mut r: R) -> Result<(DatasetHeader, Vec<TextStrip>)> {
    let header = read_header(&mut r)?;
    let (h, w) = (header.height as usize, header.width as usize);
    let mut strips = Vec::with_capacity(header.count as usize);
    for _ in 0..header.count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut word = vec![0u8; len];
        r.read_exact(&mut word)?;
        let text = String::from_utf8(word).map_err(|e| TextgenError::Format(e.to_string()))?;
        let mut spans = Vec::with_capacity(text.chars().count());
        for _ in 0..text.chars().count() {
            let a = u32::from_le_bytes(read_exact(&mut r)?) as usize;
            let b = u32::from_le_bytes(read_exact(&mut r)?) as usize;
            spans.push((a, b));
        }
        let mut pixels = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            pixels.push(f32::from_le_bytes(read_exact(&mut r)?));
        }
        strips.push(TextStrip {
            height: h,
            width: w,
            pixels,
            text,
            glyph_spans: spans,
            seed: 0,
        });
    }
    Ok((header, strips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textgen::{generate_strip, Alphabet, RenderConfig};

    #[test]
    fn round_trip_and_header_layout() {
        let a = Alphabet::default();
        let cfg = RenderConfig::default();
        let strips: Vec<_> = (0..3)
            .map(|i| generate_strip(&a, (2, 5), &cfg, 1, i).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &strips).unwrap();
        assert_eq!(&buf[..4], b"RCLD");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 16);
        assert_eq!(u32::from_le_bytes(buf[10..14].try_into().unwrap()), 64);
        assert_eq!(u32::from_le_bytes(buf[14..18].try_into().unwrap()), 3);

        let (header, back) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(header.count, 3);
        for (x, y) in strips.iter().zip(&back) {
            assert_eq!(x.text, y.text);
            assert_eq!(x.glyph_spans, y.glyph_spans);
            assert_eq!(x.pixels, y.pixels);
        }
    }

    #[test]
    fn truncated_input_is_an_error() {
        let a = Alphabet::default();
        let s = generate_strip(&a, (2, 5), &RenderConfig::default(), 1, 0).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &[s]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_dataset(buf.as_slice()).is_err());
    }
}
