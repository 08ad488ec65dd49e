//! `.tpxs` event-stream files plus CSV/PGM exports of images and histograms.
//!
//! File layout, all little-endian:
//!
//! ```text
//! header (32 bytes): magic "TPXS" | version u16 = 1 | record_count u64 | duration_ns u64 | 10 zero bytes
//! record (16 bytes): x u16 | y u16 | toa u64 | tot u16 | reserved u16
//! ```

use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use crate::coincidence::Histogram1D;
use crate::error::{Error, Result};
use crate::event_model::{EventStream, PixelImage, RawEvent, Units};

pub const MAGIC: [u8; 4] = *b"TPXS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const RECORD_LEN: usize = 16;

/// Fixed 32-byte file header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamFileHeader {
    pub record_count: u64,
    pub duration_ns: u64,
}

impl StreamFileHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[0..4].copy_from_slice(&MAGIC);
        buf[4..6].copy_from_slice(&VERSION.to_le_bytes());
        buf[6..14].copy_from_slice(&self.record_count.to_le_bytes());
        buf[14..22].copy_from_slice(&self.duration_ns.to_le_bytes());
        buf
    }

    pub fn decode(buf: &[u8; HEADER_LEN]) -> Result<Self> {
        if buf[0..4] != MAGIC || u16::from_le_bytes([buf[4], buf[5]]) != VERSION {
            return Err(Error::BadMagic);
        }
        let record_count = u64::from_le_bytes(buf[6..14].try_into().unwrap());
        let duration_ns = u64::from_le_bytes(buf[14..22].try_into().unwrap());
        Ok(Self { record_count, duration_ns })
    }
}

fn encode_record(e: &RawEvent) -> [u8; RECORD_LEN] {
    let mut r = [0u8; RECORD_LEN];
    r[0..2].copy_from_slice(&u16::from(e.x).to_le_bytes());
    r[2..4].copy_from_slice(&u16::from(e.y).to_le_bytes());
    r[4..12].copy_from_slice(&e.toa.to_le_bytes());
    r[12..14].copy_from_slice(&e.tot.to_le_bytes());
    r
}

fn decode_record(r: &[u8]) -> Result<RawEvent> {
    let x = u16::from_le_bytes([r[0], r[1]]);
    let y = u16::from_le_bytes([r[2], r[3]]);
    let toa = u64::from_le_bytes(r[4..12].try_into().unwrap());
    let tot = u16::from_le_bytes([r[12], r[13]]);
    RawEvent::new(x, y, toa, tot)
}

/// Parse a complete `.tpxs` byte source.
pub fn read_stream<R: Read>(mut source: R) -> Result<EventStream> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = source.read(&mut header[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got < 4 || header[0..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if got < HEADER_LEN {
        return Err(Error::TruncatedFile { declared: 0, available: 0 });
    }
    let header = StreamFileHeader::decode(&header)?;

    let mut payload = Vec::new();
    source.read_to_end(&mut payload)?;
    let declared = header.record_count;
    let expected_len = declared.checked_mul(RECORD_LEN as u64);
    if expected_len != Some(payload.len() as u64) {
        return Err(Error::TruncatedFile {
            declared,
            available: (payload.len() / RECORD_LEN) as u64,
        });
    }

    let events = payload
        .chunks_exact(RECORD_LEN)
        .map(decode_record)
        .collect::<Result<Vec<_>>>()?;
    EventStream::new(events, header.duration_ns as f64 / 1e9)
}

/// Write a stream; returns the number of bytes emitted (`32 + 16 * N`).
pub fn write_stream<W: Write>(stream: &EventStream, sink: W) -> Result<u64> {
    let mut w = BufWriter::new(sink);
    let header = StreamFileHeader {
        record_count: stream.events.len() as u64,
        duration_ns: (stream.duration * 1e9).round() as u64,
    };
    w.write_all(&header.encode())?;
    for e in &stream.events {
        w.write_all(&encode_record(e))?;
    }
    w.flush()?;
    Ok((HEADER_LEN + RECORD_LEN * stream.events.len()) as u64)
}

/// Output format for [`export_image`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ImageFormat {
    Csv,
    /// 16-bit binary PGM; each value is multiplied by `scale` and clamped to `0..=65535`.
    Pgm16 { scale: f64 },
}

/// Write an image as CSV (row = y, column = x) or 16-bit PGM.
pub fn export_image<W: Write>(image: &PixelImage, format: ImageFormat, sink: W) -> Result<()> {
    let mut w = BufWriter::new(sink);
    match format {
        ImageFormat::Csv => {
            let mut line = String::with_capacity(image.width * 4);
            for y in 0..image.height {
                line.clear();
                for x in 0..image.width {
                    if x > 0 {
                        line.push(',');
                    }
                    line.push_str(&format!("{}", image.get(x, y)));
                }
                line.push('\n');
                w.write_all(line.as_bytes())?;
            }
        }
        ImageFormat::Pgm16 { scale } => {
            if !scale.is_finite() {
                return Err(Error::Scale(scale));
            }
            write!(w, "P5\n{} {}\n65535\n", image.width, image.height)?;
            for v in &image.values {
                let s = (v * scale).round();
                let s = if s.is_nan() { 0.0 } else { s.clamp(0.0, 65535.0) } as u16;
                w.write_all(&s.to_be_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read back an image written by [`export_image`] in CSV form.
pub fn import_image_csv<R: Read>(source: R, units: Units) -> Result<PixelImage> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in BufReader::new(source).lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::GeometryMismatch("ragged CSV rows".into()));
    }
    let mut img = PixelImage::zeros_with_size(width, height, units);
    img.values = rows.into_iter().flatten().collect();
    Ok(img)
}

/// Two-column CSV `bin_center_ns,count`, one line per bin.
pub fn export_histogram<W: Write>(h: &Histogram1D, sink: W) -> Result<()> {
    let mut w = BufWriter::new(sink);
    writeln!(w, "bin_center_ns,count")?;
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(w, "{},{}", h.bin_center(i), c)?;
    }
    w.flush()?;
    Ok(())
}

/// Bin centers and counts as read back from [`export_histogram`] output.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramTable {
    pub centers_ns: Vec<f64>,
    pub counts: Vec<u64>,
}

pub fn import_histogram<R: Read>(source: R) -> Result<HistogramTable> {
    let mut lines = BufReader::new(source).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "bin_center_ns,count" => {}
        _ => return Err(Error::Parse("missing histogram header".into())),
    }
    let mut table = HistogramTable { centers_ns: Vec::new(), counts: Vec::new() };
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (c, n) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("bad histogram line {line:?}")))?;
        table.centers_ns.push(c.parse().map_err(|_| Error::Parse(c.to_string()))?);
        table.counts.push(n.parse().map_err(|_| Error::Parse(n.to_string()))?);
    }
    Ok(table)
}
