//! Update streams: the event model, the binary and text formats, replay, and
//! the synthetic data generators.
//!
//! # Binary format
//!
//! A stream file is a 36-byte little-endian header followed by `m` records.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `FSKSTRM\0`                       |
//! | 8      | 2    | version, currently 1                    |
//! | 10     | 1    | encoding: 0 = sign, 1 = fixed point     |
//! | 11     | 1    | fractional bits of fixed-point values   |
//! | 12     | 8    | rows                                    |
//! | 20     | 8    | columns                                 |
//! | 28     | 8    | record count `m`                        |
//!
//! Each record is a LEB128 row, a LEB128 column and a value: one signed byte
//! (`+1` or `-1`) under the sign encoding, a zigzag LEB128 integer under the
//! fixed-point encoding. A delta is `value / 2^scale_bits`.
//!
//! # Text format
//!
//! One `row col delta` triple per line. Blank lines and lines starting with
//! `#` are skipped, except a leading `# fsketch ROWS COLS` line which fixes
//! the shape.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::fsketch::{dequantize, quantize, DEFAULT_SCALE_BITS};
use crate::randkit::derive_seed;

pub const MAGIC: &[u8; 8] = b"FSKSTRM\0";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    Sign = 0,
    Fixed = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub encoding: Encoding,
    pub scale_bits: u8,
    pub n_rows: u64,
    pub n_cols: u64,
    pub m: u64,
}

impl StreamHeader {
    pub fn fixed(n_rows: u64, n_cols: u64, m: u64) -> Self {
        Self {
            encoding: Encoding::Fixed,
            scale_bits: DEFAULT_SCALE_BITS as u8,
            n_rows,
            n_cols,
            m,
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[..8].copy_from_slice(MAGIC);
        b[8..10].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        b[10] = self.encoding as u8;
        b[11] = self.scale_bits;
        b[12..20].copy_from_slice(&self.n_rows.to_le_bytes());
        b[20..28].copy_from_slice(&self.n_cols.to_le_bytes());
        b[28..36].copy_from_slice(&self.m.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN as usize {
            return Err(Error::format(b.len() as u64, "truncated header"));
        }
        if &b[..8] != MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        let version = u16::from_le_bytes([b[8], b[9]]);
        if version != FORMAT_VERSION {
            return Err(Error::format(8, format!("unsupported version {version}")));
        }
        let encoding = match b[10] {
            0 => Encoding::Sign,
            1 => Encoding::Fixed,
            e => return Err(Error::format(10, format!("unknown encoding {e}"))),
        };
        let scale_bits = b[11];
        if scale_bits > 40 || (encoding == Encoding::Sign && scale_bits != 0) {
            return Err(Error::format(11, format!("invalid scale {scale_bits}")));
        }
        let word = |at: usize| u64::from_le_bytes(b[at..at + 8].try_into().unwrap());
        Ok(Self {
            encoding,
            scale_bits,
            n_rows: word(12),
            n_cols: word(20),
            m: word(28),
        })
    }
}

/// One turnstile update `A[row, col] += value / 2^scale_bits`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UpdateEvent {
    pub row: u64,
    pub col: u64,
    pub value: i64,
}

impl UpdateEvent {
    pub fn delta(&self, scale_bits: u8) -> f64 {
        dequantize(self.value, scale_bits as u32)
    }
}

/// Per-pass statistics; identical across replays of the same stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PassStats {
    pub events: u64,
    pub checksum: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

struct Checksum(u64);

impl Checksum {
    fn new() -> Self {
        Checksum(FNV_OFFSET)
    }

    fn add(&mut self, e: &UpdateEvent) {
        for bytes in [e.row.to_le_bytes(), e.col.to_le_bytes(), e.value.to_le_bytes()] {
            for b in bytes {
                self.0 = (self.0 ^ b as u64).wrapping_mul(FNV_PRIME);
            }
        }
    }
}

pub type EventSink<'a> = dyn FnMut(&UpdateEvent) -> Result<()> + 'a;

/// A source of update events that can be replayed pass by pass.
pub trait UpdateStream {
    fn header(&self) -> StreamHeader;

    /// Delivers every event in order.
    fn replay(&mut self, sink: &mut EventSink<'_>) -> Result<PassStats>;

    fn replayable(&self) -> bool {
        true
    }

    /// Completed or attempted passes so far.
    fn passes(&self) -> u64;
}

/// A stream held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryStream {
    header: StreamHeader,
    events: Vec<UpdateEvent>,
    passes: u64,
}

impl MemoryStream {
    pub fn new(n_rows: u64, n_cols: u64, scale_bits: u8, events: Vec<UpdateEvent>) -> Result<Self> {
        if scale_bits > 40 {
            return Err(Error::config(format!("scale_bits {scale_bits} exceeds 40")));
        }
        if let Some(e) = events.iter().find(|e| e.row >= n_rows || e.col >= n_cols) {
            return Err(Error::domain(format!(
                "event ({}, {}) outside {n_rows}x{n_cols}",
                e.row, e.col
            )));
        }
        let header = StreamHeader {
            encoding: if scale_bits == 0 { Encoding::Sign } else { Encoding::Fixed },
            scale_bits,
            n_rows,
            n_cols,
            m: events.len() as u64,
        };
        if header.encoding == Encoding::Sign && events.iter().any(|e| e.value.abs() != 1) {
            return Err(Error::domain("sign encoding needs every value to be +1 or -1"));
        }
        Ok(Self {
            header,
            events,
            passes: 0,
        })
    }

    pub fn events(&self) -> &[UpdateEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<UpdateEvent> {
        self.events
    }

    /// A copy with the body permuted by a seeded shuffle.
    pub fn permuted(&self, seed: u64) -> Self {
        let mut events = self.events.clone();
        events.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self {
            header: self.header,
            events,
            passes: 0,
        }
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        write_stream(w, self.header, self.events.iter().copied())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut reader = StreamReader::new(r)?;
        let header = reader.header();
        let mut events = Vec::with_capacity(header.m.min(1 << 24) as usize);
        for e in &mut reader {
            events.push(e?);
        }
        reader.finish()?;
        Ok(Self {
            header,
            events,
            passes: 0,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

impl UpdateStream for MemoryStream {
    fn header(&self) -> StreamHeader {
        self.header
    }

    fn replay(&mut self, sink: &mut EventSink<'_>) -> Result<PassStats> {
        self.passes += 1;
        let mut sum = Checksum::new();
        for e in &self.events {
            sum.add(e);
            sink(e)?;
        }
        Ok(PassStats {
            events: self.events.len() as u64,
            checksum: sum.0,
        })
    }

    fn passes(&self) -> u64 {
        self.passes
    }
}

/// A stream file, re-read from disk on every pass.
#[derive(Clone, Debug)]
pub struct FileStream {
    path: PathBuf,
    header: StreamHeader,
    passes: u64,
}

impl FileStream {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let reader = StreamReader::new(BufReader::new(File::open(&path)?))?;
        Ok(Self {
            header: reader.header(),
            path,
            passes: 0,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl UpdateStream for FileStream {
    fn header(&self) -> StreamHeader {
        self.header
    }

    fn replay(&mut self, sink: &mut EventSink<'_>) -> Result<PassStats> {
        self.passes += 1;
        let mut reader = StreamReader::new(BufReader::with_capacity(1 << 16, File::open(&self.path)?))?;
        if reader.header() != self.header {
            return Err(Error::format(0, "stream header changed between passes"));
        }
        let mut sum = Checksum::new();
        let mut events = 0;
        for e in &mut reader {
            let e = e?;
            sum.add(&e);
            sink(&e)?;
            events += 1;
        }
        reader.finish()?;
        Ok(PassStats {
            events,
            checksum: sum.0,
        })
    }

    fn passes(&self) -> u64 {
        self.passes
    }
}

/// Wraps a stream so that only one pass is allowed.
#[derive(Clone, Debug)]
pub struct OneShot<S>(pub S);

impl<S: UpdateStream> UpdateStream for OneShot<S> {
    fn header(&self) -> StreamHeader {
        self.0.header()
    }

    fn replay(&mut self, sink: &mut EventSink<'_>) -> Result<PassStats> {
        if self.0.passes() > 0 {
            return Err(Error::config("stream cannot be replayed"));
        }
        self.0.replay(sink)
    }

    fn replayable(&self) -> bool {
        false
    }

    fn passes(&self) -> u64 {
        self.0.passes()
    }
}

fn write_varint<W: Write>(w: &mut W, mut v: u64) -> std::io::Result<()> {
    let mut buf = [0u8; 10];
    let mut i = 0;
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            buf[i] = byte;
            i += 1;
            break;
        }
        buf[i] = byte | 0x80;
        i += 1;
    }
    w.write_all(&buf[..i])
}

#[inline]
fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

#[inline]
fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

/// Writes a header and exactly `header.m` events.
pub fn write_stream<W: Write>(
    mut w: W,
    header: StreamHeader,
    events: impl IntoIterator<Item = UpdateEvent>,
) -> Result<()> {
    w.write_all(&header.to_bytes())?;
    let mut count = 0u64;
    for e in events {
        if e.row >= header.n_rows || e.col >= header.n_cols {
            return Err(Error::domain(format!("event ({}, {}) outside the header shape", e.row, e.col)));
        }
        write_varint(&mut w, e.row)?;
        write_varint(&mut w, e.col)?;
        match header.encoding {
            Encoding::Sign => match e.value {
                1 | -1 => w.write_all(&[e.value as i8 as u8])?,
                v => return Err(Error::domain(format!("value {v} is not a sign"))),
            },
            Encoding::Fixed => write_varint(&mut w, zigzag(e.value))?,
        }
        count += 1;
    }
    if count != header.m {
        return Err(Error::config(format!("wrote {count} events but header declares {}", header.m)));
    }
    w.flush()?;
    Ok(())
}

/// Streaming decoder for the binary format.
pub struct StreamReader<R> {
    inner: R,
    header: StreamHeader,
    remaining: u64,
    offset: u64,
    failed: bool,
}

impl<R: Read> StreamReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut buf = [0u8; HEADER_LEN as usize];
        let mut got = 0;
        while got < buf.len() {
            let n = inner.read(&mut buf[got..])?;
            if n == 0 {
                break;
            }
            got += n;
        }
        let header = StreamHeader::from_bytes(&buf[..got])?;
        Ok(Self {
            inner,
            header,
            remaining: header.m,
            offset: HEADER_LEN,
            failed: false,
        })
    }

    pub fn header(&self) -> StreamHeader {
        self.header
    }

    fn byte(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(1) => {
                self.offset += 1;
                Ok(b[0])
            }
            Ok(_) => Err(Error::format(self.offset, "unexpected end of stream body")),
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => self.byte(),
            Err(e) => Err(e.into()),
        }
    }

    fn varint(&mut self) -> Result<u64> {
        let start = self.offset;
        let mut v = 0u64;
        for shift in (0..70).step_by(7) {
            let b = self.byte()?;
            if shift == 63 && b > 1 {
                return Err(Error::format(start, "varint overflows 64 bits"));
            }
            v |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(Error::format(start, "varint longer than 10 bytes"))
    }

    fn record(&mut self) -> Result<UpdateEvent> {
        let at = self.offset;
        let row = self.varint()?;
        let col = self.varint()?;
        if row >= self.header.n_rows || col >= self.header.n_cols {
            return Err(Error::format(at, format!("event ({row}, {col}) outside the header shape")));
        }
        let value = match self.header.encoding {
            Encoding::Sign => match self.byte()? as i8 {
                s @ (1 | -1) => s as i64,
                s => return Err(Error::format(self.offset - 1, format!("invalid sign byte {s}"))),
            },
            Encoding::Fixed => unzigzag(self.varint()?),
        };
        Ok(UpdateEvent { row, col, value })
    }

    /// Checks that the body ends exactly after `m` records.
    pub fn finish(mut self) -> Result<()> {
        if self.remaining > 0 {
            return Err(Error::format(
                self.offset,
                format!("body ended {} records short of the header count", self.remaining),
            ));
        }
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::format(self.offset, "body is longer than the header count")),
        }
    }
}

impl<R: Read> Iterator for StreamReader<R> {
    type Item = Result<UpdateEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 || self.failed {
            return None;
        }
        let r = self.record();
        match r {
            Ok(_) => self.remaining -= 1,
            Err(_) => self.failed = true,
        }
        Some(r)
    }
}

/// Writes the text form, with a leading shape line.
pub fn write_text<W: Write>(mut w: W, stream: &MemoryStream) -> Result<()> {
    let h = stream.header;
    writeln!(w, "# fsketch {} {}", h.n_rows, h.n_cols)?;
    for e in &stream.events {
        writeln!(w, "{} {} {}", e.row, e.col, e.delta(h.scale_bits))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses the text form. Without a shape line the shape is the bounding box
/// of the events.
pub fn read_text<R: BufRead>(r: R, scale_bits: u8) -> Result<MemoryStream> {
    let mut shape: Option<(u64, u64)> = None;
    let mut events = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let at = offset;
        offset += line.len() as u64 + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if lineno == 0 && parts.len() == 3 && parts[0] == "fsketch" {
                let dim = |s: &str| {
                    s.parse::<u64>()
                        .map_err(|_| Error::format(at, format!("bad dimension {s:?}")))
                };
                shape = Some((dim(parts[1])?, dim(parts[2])?));
            }
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::format(at, format!("line {}: expected `row col delta`", lineno + 1)));
        }
        let bad = |what: &str| Error::format(at, format!("line {}: bad {what}", lineno + 1));
        let row = parts[0].parse::<u64>().map_err(|_| bad("row"))?;
        let col = parts[1].parse::<u64>().map_err(|_| bad("column"))?;
        let delta = parts[2].parse::<f64>().map_err(|_| bad("delta"))?;
        let value = quantize(delta, scale_bits as u32).map_err(|_| bad("delta"))?;
        events.push(UpdateEvent { row, col, value });
    }
    let (n_rows, n_cols) = shape.unwrap_or_else(|| {
        events.iter().fold((0, 0), |(r, c), e| (r.max(e.row + 1), c.max(e.col + 1)))
    });
    MemoryStream::new(n_rows, n_cols, scale_bits, events)
}

/// Replays one pass and sums the updates into a dense matrix.
pub fn accumulate(stream: &mut dyn UpdateStream) -> Result<DMatrix<f64>> {
    let h = stream.header();
    let (r, c) = (h.n_rows as usize, h.n_cols as usize);
    let mut acc = vec![0i64; r * c];
    stream.replay(&mut |e| {
        let cell = &mut acc[e.col as usize * r + e.row as usize];
        *cell = cell
            .checked_add(e.value)
            .ok_or_else(|| Error::Overflow(format!("accumulating ({}, {})", e.row, e.col)))?;
        Ok(())
    })?;
    Ok(DMatrix::from_iterator(
        r,
        c,
        acc.into_iter().map(|v| dequantize(v, h.scale_bits as u32)),
    ))
}

/// A generated stream together with the matrices it encodes.
#[derive(Clone, Debug)]
pub struct Generated {
    pub stream: MemoryStream,
    /// The matrix the stream accumulates to, after fixed-point rounding.
    pub a: DMatrix<f64>,
    /// The latent matrix the generator started from.
    pub latent: DMatrix<f64>,
}

/// Updates emitted per matrix entry by the synthetic generators.
pub const UPDATES_PER_ENTRY: usize = 5;

/// Which map turns the latent Gaussian matrix into `A`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogDataVariant {
    /// `A = exp(M) - 1`, so `log(|A| + 1)` recovers `M` where `M >= 0`.
    ExpMinusOne,
    /// `A = exp(M)`.
    Exp,
}

/// Gaussian `n x n` matrix with column `i` (1-based) scaled to norm `4 / i`.
fn scaled_gaussian(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    for (i, mut col) in m.column_iter_mut().enumerate() {
        let norm = col.norm();
        col *= 4.0 / ((i + 1) as f64 * norm);
    }
    m
}

/// Splits each entry into `UPDATES_PER_ENTRY` equal fixed-point updates and
/// shuffles the result.
fn emit_entries(a: &DMatrix<f64>, seed: u64) -> Result<(MemoryStream, DMatrix<f64>)> {
    let (r, c) = a.shape();
    let per = UPDATES_PER_ENTRY as f64;
    let mut implied = DMatrix::zeros(r, c);
    let mut events = Vec::with_capacity(r * c * UPDATES_PER_ENTRY);
    for j in 0..c {
        for i in 0..r {
            let q = quantize(a[(i, j)] / per, DEFAULT_SCALE_BITS)?;
            implied[(i, j)] = dequantize(q * UPDATES_PER_ENTRY as i64, DEFAULT_SCALE_BITS);
            for _ in 0..UPDATES_PER_ENTRY {
                events.push(UpdateEvent {
                    row: i as u64,
                    col: j as u64,
                    value: q,
                });
            }
        }
    }
    events.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5348)));
    let stream = MemoryStream::new(r as u64, c as u64, DEFAULT_SCALE_BITS as u8, events)?;
    Ok((stream, implied))
}

/// Synthetic log-data: `A = exp(M) - 1` (or `exp(M)`) for a column-scaled
/// Gaussian `M`, five equal updates per entry in shuffled order.
pub fn gen_logdata(n: usize, seed: u64, variant: LogDataVariant) -> Result<Generated> {
    if n < 2 {
        return Err(Error::config("logdata needs n >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = scaled_gaussian(n, &mut rng);
    let a = latent.map(|v| match variant {
        LogDataVariant::ExpMinusOne => v.exp_m1(),
        LogDataVariant::Exp => v.exp(),
    });
    let (stream, a) = emit_entries(&a, seed)?;
    Ok(Generated { stream, a, latent })
}

/// Synthetic square-data: `A = M .^ 2` for the same latent `M`.
pub fn gen_sqdata(n: usize, seed: u64) -> Result<Generated> {
    if n < 2 {
        return Err(Error::config("sqdata needs n >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = scaled_gaussian(n, &mut rng);
    let (stream, a) = emit_entries(&latent.map(|v| v * v), seed)?;
    Ok(Generated { stream, a, latent })
}

/// A stream whose log-transform is (up to rounding) the rank-`k` matrix
/// `M = U V^T` with nonnegative factors: `A = exp(M) - 1`, one update per entry.
pub fn gen_rank_fixture(n: usize, k: usize, seed: u64) -> Result<Generated> {
    if k == 0 || k > n {
        return Err(Error::config(format!("rank fixture needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (k as f64).sqrt();
    let u = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() * scale);
    let v = DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() * scale);
    let latent = &u * v.transpose();
    let mut a = DMatrix::zeros(n, n);
    let mut events = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let q = quantize(latent[(i, j)].exp_m1(), DEFAULT_SCALE_BITS)?;
            a[(i, j)] = dequantize(q, DEFAULT_SCALE_BITS);
            events.push(UpdateEvent {
                row: i as u64,
                col: j as u64,
                value: q,
            });
        }
    }
    events.shuffle(&mut rng);
    let stream = MemoryStream::new(n as u64, n as u64, DEFAULT_SCALE_BITS as u8, events)?;
    Ok(Generated { stream, a, latent })
}

/// Regression data: `A[i, j] = exp(g)` with `g ~ N(0, 1)`, the target
/// `b = log(A + 1) x + noise`, and the stream of `A`.
#[derive(Clone, Debug)]
pub struct RegressionData {
    pub generated: Generated,
    pub b: DVector<f64>,
    pub x_true: DVector<f64>,
}

pub fn gen_regression(n: usize, d: usize, noise: f64, seed: u64) -> Result<RegressionData> {
    if d == 0 || n < d {
        return Err(Error::config(format!("regression data needs n >= d >= 1, got n = {n}, d = {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut a = DMatrix::zeros(n, d);
    let mut events = Vec::with_capacity(n * d);
    for j in 0..d {
        for i in 0..n {
            let q = quantize(latent[(i, j)].exp(), DEFAULT_SCALE_BITS)?;
            a[(i, j)] = dequantize(q, DEFAULT_SCALE_BITS);
            events.push(UpdateEvent {
                row: i as u64,
                col: j as u64,
                value: q,
            });
        }
    }
    events.shuffle(&mut rng);
    let x_true = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let features = a.map(|v: f64| v.abs().ln_1p());
    let b = &features * &x_true + DVector::from_fn(n, |_, _| noise * rng.sample::<f64, _>(StandardNormal));
    let stream = MemoryStream::new(n as u64, d as u64, DEFAULT_SCALE_BITS as u8, events)?;
    Ok(RegressionData {
        generated: Generated { stream, a, latent },
        b,
        x_true,
    })
}

/// `A[i, j] = alpha_i^j` (0-based `j`) and its natural entrywise log.
pub fn vandermonde_fixture(alphas: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = alphas.len();
    if n == 0 {
        return Err(Error::domain("need at least one alpha"));
    }
    if alphas.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::domain("alphas must be positive"));
    }
    for i in 0..n {
        if alphas[i + 1..].contains(&alphas[i]) {
            return Err(Error::domain(format!("duplicate alpha {}", alphas[i])));
        }
    }
    let a = DMatrix::from_fn(n, n, |i, j| alphas[i].powi(j as i32));
    let log_a = DMatrix::from_fn(n, n, |i, j| j as f64 * alphas[i].ln());
    Ok((a, log_a))
}

/// Block diagonal of `n/2` copies of `[[1, 2], [2, 4]]`, and its entrywise
/// `log2` on the support (zeros stay zero).
pub fn block_fixture(n: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::domain(format!("block fixture needs a positive even n, got {n}")));
    }
    const B: [[f64; 2]; 2] = [[1.0, 2.0], [2.0, 4.0]];
    let a = DMatrix::from_fn(n, n, |i, j| if i / 2 == j / 2 { B[i % 2][j % 2] } else { 0.0 });
    let log_a = a.map(|v| if v == 0.0 { 0.0 } else { v.log2() });
    Ok((a, log_a))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    Unit,
    /// `1 / t` for a pair at distance `t`.
    InverseDistance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CooccurrenceConfig {
    pub window: usize,
    pub vocab_n: usize,
    pub weighting: Weighting,
}

impl CooccurrenceConfig {
    pub fn new(vocab_n: usize) -> Self {
        Self {
            window: 10,
            vocab_n,
            weighting: Weighting::Unit,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Cooccurrence {
    pub stream: MemoryStream,
    /// Vocabulary, most frequent first; index = row/column id.
    pub vocab: Vec<String>,
    /// Occurrences of each vocabulary word.
    pub unigrams: Vec<u64>,
    /// All tokens in the text, in or out of vocabulary.
    pub total: u64,
}

/// Co-occurrence updates over sentences (one per line). Words at distance
/// `t <= window - 1` within a sentence yield updates `(a, b)` and `(b, a)`.
pub fn ingest_cooccurrence(text: &str, cfg: &CooccurrenceConfig) -> Result<Cooccurrence> {
    if cfg.vocab_n == 0 {
        return Err(Error::config("vocabulary size must be positive"));
    }
    if cfg.window < 2 {
        return Err(Error::config("window must cover at least two tokens"));
    }
    let sentences: Vec<Vec<&str>> = text.lines().map(|l| l.split_whitespace().collect()).collect();
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut total = 0u64;
    for tok in sentences.iter().flatten() {
        *counts.entry(tok).or_insert(0) += 1;
        total += 1;
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(cfg.vocab_n);
    if ranked.is_empty() {
        return Err(Error::config("vocabulary is empty"));
    }
    let index: HashMap<&str, u64> = ranked.iter().enumerate().map(|(i, (w, _))| (*w, i as u64)).collect();
    let mut events = Vec::new();
    for sent in &sentences {
        let ids: Vec<Option<u64>> = sent.iter().map(|w| index.get(w).copied()).collect();
        for p in 0..ids.len() {
            let Some(a) = ids[p] else { continue };
            for (q, id) in ids.iter().enumerate().take((p + cfg.window).min(ids.len())).skip(p + 1) {
                let Some(b) = *id else { continue };
                let t = q - p;
                let w = match cfg.weighting {
                    Weighting::Unit => 1.0,
                    Weighting::InverseDistance => 1.0 / t as f64,
                };
                let value = quantize(w, DEFAULT_SCALE_BITS)?;
                events.push(UpdateEvent { row: a, col: b, value });
                events.push(UpdateEvent { row: b, col: a, value });
            }
        }
    }
    let v = ranked.len() as u64;
    Ok(Cooccurrence {
        stream: MemoryStream::new(v, v, DEFAULT_SCALE_BITS as u8, events)?,
        vocab: ranked.iter().map(|(w, _)| w.to_string()).collect(),
        unigrams: ranked.iter().map(|(_, c)| *c).collect(),
        total,
    })
}

impl Cooccurrence {
    /// Writes the unigram sidecar: `word count` lines, then `total N`.
    pub fn write_unigrams<W: Write>(&self, mut w: W) -> Result<()> {
        for (word, c) in self.vocab.iter().zip(&self.unigrams) {
            writeln!(w, "{word} {c}")?;
        }
        writeln!(w, "total {}", self.total)?;
        w.flush()?;
        Ok(())
    }
}

/// Column weights `max(1, (N_j / N_10)^2)`, with `N_10` the tenth largest
/// unigram count (the smallest one if there are fewer than ten).
pub fn pmi_column_weights(unigrams: &[u64]) -> Vec<f64> {
    let mut sorted = unigrams.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let Some(&n10) = sorted.get(9).or(sorted.last()) else {
        return Vec::new();
    };
    unigrams
        .iter()
        .map(|&c| {
            if n10 == 0 {
                1.0
            } else {
                (c as f64 / n10 as f64).powi(2).max(1.0)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MemoryStream {
        let events = vec![
            UpdateEvent { row: 0, col: 1, value: 5 },
            UpdateEvent { row: 300, col: 2, value: -70_000 },
            UpdateEvent { row: 1, col: 1, value: 0 },
        ];
        MemoryStream::new(301, 3, 20, events).unwrap()
    }

    #[test]
    fn header_layout() {
        let h = StreamHeader::fixed(7, 9, 11);
        let b = h.to_bytes();
        assert_eq!(b.len(), 36);
        assert_eq!(&b[..8], b"FSKSTRM\0");
        assert_eq!(b[10], 1);
        assert_eq!(b[11], 20);
        assert_eq!(StreamHeader::from_bytes(&b).unwrap(), h);
    }

    #[test]
    fn varint_and_zigzag() {
        for v in [0i64, 1, -1, 63, -64, 1 << 40, i64::MIN, i64::MAX] {
            assert_eq!(unzigzag(zigzag(v)), v);
        }
        let mut buf = Vec::new();
        write_varint(&mut buf, 300).unwrap();
        assert_eq!(buf, vec![0xac, 0x02]);
    }

    #[test]
    fn binary_round_trip() {
        let s = small();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let t = MemoryStream::read_from(&buf[..]).unwrap();
        assert_eq!(t.events(), s.events());
        assert_eq!(t.header(), s.header());
    }

    #[test]
    fn sign_encoding_round_trip() {
        let events = vec![UpdateEvent { row: 0, col: 0, value: 1 }, UpdateEvent { row: 1, col: 0, value: -1 }];
        let s = MemoryStream::new(2, 1, 0, events).unwrap();
        assert_eq!(s.header().encoding, Encoding::Sign);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 36 + 2 * 3);
        assert_eq!(MemoryStream::read_from(&buf[..]).unwrap().events(), s.events());
        assert!(MemoryStream::new(1, 1, 0, vec![UpdateEvent { row: 0, col: 0, value: 2 }]).is_err());
    }

    #[test]
    fn replay_checksums_repeat() {
        let mut s = small();
        let a = s.replay(&mut |_| Ok(())).unwrap();
        let b = s.replay(&mut |_| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.events, 3);
        assert_eq!(s.passes(), 2);
    }

    #[test]
    fn empty_body() {
        let mut s = MemoryStream::new(4, 4, 20, Vec::new()).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 36);
        let mut seen = 0;
        assert_eq!(s.replay(&mut |_| { seen += 1; Ok(()) }).unwrap().events, 0);
        assert_eq!(seen, 0);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        small().write_to(&mut buf).unwrap();
        let err = MemoryStream::read_from(&buf[..buf.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == buf.len() as u64 - 1));
        let err = MemoryStream::read_from(&buf[..20]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 20, .. }));
    }

    #[test]
    fn count_mismatch_is_format_error() {
        let mut buf = Vec::new();
        small().write_to(&mut buf).unwrap();
        let mut more = buf.clone();
        more[28] = 2;
        assert!(matches!(MemoryStream::read_from(&more[..]), Err(Error::Format { .. })));
        let mut fewer = buf.clone();
        fewer[28] = 4;
        assert!(matches!(MemoryStream::read_from(&fewer[..]), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut buf = Vec::new();
        small().write_to(&mut buf).unwrap();
        let mut b = buf.clone();
        b[0] = b'X';
        assert!(matches!(MemoryStream::read_from(&b[..]), Err(Error::Format { offset: 0, .. })));
        let mut b = buf.clone();
        b[8] = 9;
        assert!(matches!(MemoryStream::read_from(&b[..]), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn out_of_shape_record() {
        let mut buf = Vec::new();
        small().write_to(&mut buf).unwrap();
        buf[12] = 1;
        buf[13] = 0;
        assert!(matches!(MemoryStream::read_from(&buf[..]), Err(Error::Format { .. })));
    }

    #[test]
    fn text_round_trip() {
        let s = small();
        let mut buf = Vec::new();
        write_text(&mut buf, &s).unwrap();
        let t = read_text(&buf[..], 20).unwrap();
        assert_eq!(t.events(), s.events());
        assert_eq!(t.header(), s.header());
        let inferred = read_text("0 2 1.5\n# note\n\n3 1 -2\n".as_bytes(), 20).unwrap();
        assert_eq!((inferred.header().n_rows, inferred.header().n_cols), (4, 3));
        assert!(read_text("0 1\n".as_bytes(), 20).is_err());
    }

    #[test]
    fn one_shot_refuses_second_pass() {
        let mut s = OneShot(small());
        assert!(!s.replayable());
        s.replay(&mut |_| Ok(())).unwrap();
        assert!(s.replay(&mut |_| Ok(())).is_err());
    }

    #[test]
    fn logdata_shape_and_norms() {
        let g = gen_logdata(12, 3, LogDataVariant::ExpMinusOne).unwrap();
        assert_eq!(g.stream.events().len(), 5 * 12 * 12);
        for (i, col) in g.latent.column_iter().enumerate() {
            assert!((col.norm() - 4.0 / (i + 1) as f64).abs() < 1e-12);
        }
        let mut s = g.stream.clone();
        let acc = accumulate(&mut s).unwrap();
        assert!((acc - &g.a).abs().max() <= 1e-9);
        let exact = g.latent.map(f64::exp_m1);
        assert!((&g.a - exact).abs().max() <= 5.0 * 0.5f64.powi(21));
        assert!(gen_logdata(1, 0, LogDataVariant::Exp).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_logdata(8, 5, LogDataVariant::Exp).unwrap();
        let b = gen_logdata(8, 5, LogDataVariant::Exp).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.stream.write_to(&mut x).unwrap();
        b.stream.write_to(&mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn sqdata_is_nonnegative() {
        let g = gen_sqdata(10, 1).unwrap();
        assert_eq!(g.stream.events().len(), 500);
        let mut s = g.stream.clone();
        let acc = accumulate(&mut s).unwrap();
        assert!(acc.iter().all(|&v| v >= 0.0));
        assert!((acc - g.a).abs().max() <= 1e-9);
    }

    #[test]
    fn vandermonde_first_column_and_errors() {
        let (a, _) = vandermonde_fixture(&[2.0, 3.0, 5.0]).unwrap();
        assert!(a.column(0).iter().all(|&v| v == 1.0));
        assert!((a.determinant() - 6.0).abs() < 1e-9);
        assert!(vandermonde_fixture(&[2.0, 2.0]).is_err());
        assert!(vandermonde_fixture(&[2.0, -1.0]).is_err());
    }

    #[test]
    fn block_fixture_structure() {
        let (a, _) = block_fixture(6).unwrap();
        for b in 0..3 {
            let block = a.fixed_view::<2, 2>(2 * b, 2 * b);
            assert_eq!(block[(0, 0)] * block[(1, 1)] - block[(0, 1)] * block[(1, 0)], 0.0);
        }
        assert_eq!(a[(0, 2)], 0.0);
        assert_eq!(a[(5, 0)], 0.0);
        assert!(block_fixture(5).is_err());
    }

    #[test]
    fn cooccurrence_pair() {
        let c = ingest_cooccurrence("a b", &CooccurrenceConfig::new(10)).unwrap();
        let mut ev: Vec<(u64, u64, i64)> = c.stream.events().iter().map(|e| (e.row, e.col, e.value)).collect();
        ev.sort();
        assert_eq!(ev, vec![(0, 1, 1 << 20), (1, 0, 1 << 20)]);
    }

    #[test]
    fn cooccurrence_inverse_distance() {
        let mut cfg = CooccurrenceConfig::new(2);
        cfg.weighting = Weighting::InverseDistance;
        let c = ingest_cooccurrence("x a y z b\nx y z", &cfg).unwrap();
        // Vocabulary keeps the two most frequent tokens: x, y (ties broken alphabetically).
        assert_eq!(c.vocab, vec!["x", "y"]);
        let w: Vec<f64> = c.stream.events().iter().map(|e| e.delta(20)).collect();
        assert_eq!(w.len(), 4);
        assert!((w[0] - 0.5).abs() < 1e-6);
        assert!((w[2] - 1.0).abs() < 1e-6);
        assert_eq!(c.total, 8);
    }

    #[test]
    fn cooccurrence_window_and_oov() {
        let cfg = CooccurrenceConfig::new(3);
        let c = ingest_cooccurrence("a b c d d d b b c c a a", &cfg).unwrap();
        assert!(c.stream.events().iter().all(|e| e.row < 3 && e.col < 3));
        let mut small = CooccurrenceConfig::new(10);
        small.window = 3;
        let c = ingest_cooccurrence("p q r s", &small).unwrap();
        // Distances 1 and 2 only: (p,q),(p,r),(q,r),(q,s),(r,s).
        assert_eq!(c.stream.events().len(), 10);
        assert!(ingest_cooccurrence("", &cfg).is_err());
    }

    #[test]
    fn inverse_distance_three() {
        let mut cfg = CooccurrenceConfig::new(10);
        cfg.weighting = Weighting::InverseDistance;
        let c = ingest_cooccurrence("a x y b", &cfg).unwrap();
        let ab: Vec<f64> = c
            .stream
            .events()
            .iter()
            .filter(|e| {
                let (a, b) = (c.vocab[e.row as usize].as_str(), c.vocab[e.col as usize].as_str());
                (a, b) == ("a", "b")
            })
            .map(|e| e.delta(20))
            .collect();
        assert_eq!(ab.len(), 1);
        assert!((ab[0] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn pmi_weights() {
        let counts: Vec<u64> = (1..=12).rev().map(|c| c * 10).collect();
        let w = pmi_column_weights(&counts);
        // N_10 = 30.
        assert_eq!(w[0], 16.0);
        assert_eq!(w[11], 1.0);
    }
}
