//! Little-endian binary containers for cubes, atlases, lookup tables and maps.

use std::io::Write;
use std::path::Path;

use crate::cube::HistogramCube;
use crate::deglare::DepthMap;
use crate::error::{Error, Result};
use crate::gsf::{GsfAtlas, NormalizedGsf};
use crate::pileup::PileupLuts;

const VERSION: u32 = 1;

/// Cursor over a byte buffer that reports failures with their offset.
struct Reader<'a> {
    kind: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(kind: &'static str, buf: &'a [u8]) -> Self {
        Self { kind, buf, pos: 0 }
    }

    fn fail(&self, at: usize, reason: impl Into<String>) -> Error {
        Error::format(self.kind, at as u64, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            )),
        }
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(self.fail(
                0,
                format!(
                    "bad magic {got:?}, expected {:?}",
                    std::str::from_utf8(magic).unwrap()
                ),
            ));
        }
        let at = self.pos;
        let v = self.u32("version")?;
        if v != VERSION {
            return Err(self.fail(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u32(what)?;
        if v == 0 {
            return Err(self.fail(at, format!("{what} must be positive")));
        }
        Ok(v as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| self.fail(self.pos, format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| self.fail(self.pos, format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4], fields: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * fields.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

fn to_u32(kind: &'static str, v: usize, what: &str) -> Result<u32> {
    u32::try_from(v)
        .map_err(|_| Error::format(kind, 0, format!("{what} {v} does not fit in 32 bits")))
}

/// Sample type of stored cube counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountType {
    U16,
    U32,
}

impl CountType {
    /// Narrowest type holding every count of the cube.
    pub fn for_cube(cube: &HistogramCube) -> Self {
        if cube.counts.iter().all(|c| *c <= u16::MAX as u32) {
            CountType::U16
        } else {
            CountType::U32
        }
    }
}

/// The header's pulse field records all pulses integrated into the stored counts.
pub fn encode_cube(cube: &HistogramCube, dtype: CountType) -> Result<Vec<u8>> {
    let k = "SPHC";
    let pulses = u32::try_from(cube.pulses).map_err(|_| {
        Error::format(
            k,
            24,
            format!("pulse count {} does not fit in 32 bits", cube.pulses),
        )
    })?;
    let code = match dtype {
        CountType::U16 => 0,
        CountType::U32 => 1,
    };
    let mut out = header(
        b"SPHC",
        &[
            to_u32(k, cube.rows, "rows")?,
            to_u32(k, cube.cols, "cols")?,
            to_u32(k, cube.bins, "bins")?,
            code,
            pulses,
        ],
    );
    match dtype {
        CountType::U16 => {
            out.reserve(cube.counts.len() * 2);
            for (i, c) in cube.counts.iter().enumerate() {
                let v = u16::try_from(*c).map_err(|_| {
                    Error::format(
                        k,
                        (32 + 2 * i) as u64,
                        format!("count {c} does not fit in 16 bits"),
                    )
                })?;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        CountType::U32 => {
            out.reserve(cube.counts.len() * 4);
            for c in &cube.counts {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_cube(buf: &[u8]) -> Result<HistogramCube> {
    let mut r = Reader::new("SPHC", buf);
    r.magic(b"SPHC")?;
    let rows = r.dim("rows")?;
    let cols = r.dim("cols")?;
    let bins = r.dim("bins")?;
    let at = r.pos;
    let dtype = r.u32("dtype")?;
    let pulses = r.u32("pulses_per_frame")? as u64;
    let n = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(bins))
        .ok_or_else(|| r.fail(8, "cube size overflows"))?;
    let counts = match dtype {
        0 => {
            let raw = r.take(
                n.checked_mul(2)
                    .ok_or_else(|| r.fail(at, "cube size overflows"))?,
                "counts",
            )?;
            raw.chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
                .collect()
        }
        1 => {
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| r.fail(at, "cube size overflows"))?,
                "counts",
            )?;
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        d => return Err(r.fail(at, format!("unknown dtype {d}"))),
    };
    r.finish()?;
    Ok(HistogramCube {
        rows,
        cols,
        bins,
        pulses,
        counts,
    })
}

/// Maps and outscatter ratios are stored in single precision.
pub fn encode_atlas(atlas: &GsfAtlas) -> Result<Vec<u8>> {
    let k = "GSFA";
    let mut out = header(
        b"GSFA",
        &[
            to_u32(k, atlas.entries.len(), "entry count")?,
            to_u32(k, atlas.rows, "rows")?,
            to_u32(k, atlas.cols, "cols")?,
        ],
    );
    for e in &atlas.entries {
        if e.map.len() != atlas.rows * atlas.cols {
            return Err(Error::Dimension(format!(
                "atlas entry at {:?} has the wrong size",
                e.source
            )));
        }
        out.extend_from_slice(&(e.source.0 as f32).to_le_bytes());
        out.extend_from_slice(&(e.source.1 as f32).to_le_bytes());
        out.extend_from_slice(&(e.outscatter as f32).to_le_bytes());
        for v in &e.map {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_atlas(buf: &[u8]) -> Result<GsfAtlas> {
    let mut r = Reader::new("GSFA", buf);
    r.magic(b"GSFA")?;
    let count = r.dim("entry count")?;
    let rows = r.dim("rows")?;
    let cols = r.dim("cols")?;
    let mut entries = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let at = r.pos;
        let head = r.f32s(3, "entry header")?;
        let pixel = |v: f32, n: usize| {
            (v >= 0.0 && v.fract() == 0.0 && (v as usize) < n).then_some(v as usize)
        };
        let (Some(sr), Some(sc)) = (pixel(head[0], rows), pixel(head[1], cols)) else {
            return Err(r.fail(
                at,
                format!("entry {i} source ({}, {}) is not a pixel", head[0], head[1]),
            ));
        };
        if !(0.0..=1.0).contains(&head[2]) {
            return Err(r.fail(
                at + 8,
                format!("entry {i} outscatter {} outside [0, 1]", head[2]),
            ));
        }
        let map = r.f32s(rows * cols, "entry map")?;
        entries.push(NormalizedGsf {
            rows,
            cols,
            source: (sr, sc),
            map: map.into_iter().map(f64::from).collect(),
            outscatter: head[2] as f64,
        });
    }
    r.finish()?;
    GsfAtlas::new(rows, cols, entries)
}

pub fn encode_luts(luts: &PileupLuts) -> Result<Vec<u8>> {
    luts.validate()?;
    let k = "PLUT";
    let mut out = header(
        b"PLUT",
        &[
            to_u32(k, luts.n_alpha(), "alpha grid size")?,
            to_u32(k, luts.n_beta(), "beta grid size")?,
            luts.window,
        ],
    );
    for v in luts
        .alpha_grid
        .iter()
        .chain(&luts.beta_grid)
        .chain(&luts.lut_gamma)
        .chain(&luts.lut_mu)
        .chain(&luts.lut_var)
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// The waveform identity is not part of the file; the loaded tables carry zero.
pub fn decode_luts(buf: &[u8]) -> Result<PileupLuts> {
    let mut r = Reader::new("PLUT", buf);
    r.magic(b"PLUT")?;
    let na = r.dim("alpha grid size")?;
    let nb = r.dim("beta grid size")?;
    let window = r.u32("window")?;
    let alpha_grid = r.f64s(na, "alpha grid")?;
    let beta_grid = r.f64s(nb, "beta grid")?;
    let n = na
        .checked_mul(nb)
        .ok_or_else(|| r.fail(8, "table size overflows"))?;
    let lut_gamma = r.f64s(n, "gamma table")?;
    let lut_mu = r.f64s(n, "mean table")?;
    let lut_var = r.f64s(n, "variance table")?;
    r.finish()?;
    let luts = PileupLuts {
        alpha_grid,
        beta_grid,
        lut_gamma,
        lut_mu,
        lut_var,
        window,
        waveform_id: 0,
    };
    luts.validate()
        .map_err(|e| Error::format("PLUT", 20, format!("invalid tables: {e}")))?;
    Ok(luts)
}

fn encode_map(magic: &[u8; 4], rows: usize, cols: usize, values: &[f32]) -> Result<Vec<u8>> {
    let k = if magic == b"DPTH" { "DPTH" } else { "CONF" };
    if values.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "{k} map has {} values for {rows}x{cols}",
            values.len()
        )));
    }
    let mut out = header(magic, &[to_u32(k, rows, "rows")?, to_u32(k, cols, "cols")?]);
    for v in values {
        let v = if v.is_nan() { f32::NAN } else { *v };
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_map(kind: &'static str, magic: &[u8; 4], buf: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = Reader::new(kind, buf);
    r.magic(magic)?;
    let rows = r.dim("rows")?;
    let cols = r.dim("cols")?;
    let values = r.f32s(rows * cols, "values")?;
    r.finish()?;
    Ok((rows, cols, values))
}

/// No-return pixels are written as quiet NaN; source tags are not stored.
pub fn encode_depth(map: &DepthMap) -> Result<Vec<u8>> {
    encode_map(b"DPTH", map.rows, map.cols, &map.depth)
}

pub fn decode_depth(buf: &[u8]) -> Result<DepthMap> {
    let (rows, cols, depth) = decode_map("DPTH", b"DPTH", buf)?;
    Ok(DepthMap::from_meters(rows, cols, depth))
}

/// Per-pixel confidence in the depth-map layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceImage {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

pub fn encode_confidence(img: &ConfidenceImage) -> Result<Vec<u8>> {
    encode_map(b"CONF", img.rows, img.cols, &img.values)
}

pub fn decode_confidence(buf: &[u8]) -> Result<ConfidenceImage> {
    let (rows, cols, values) = decode_map("CONF", b"CONF", buf)?;
    Ok(ConfidenceImage { rows, cols, values })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}
