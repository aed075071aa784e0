//! Sinogram stacks and the MSCTSTK1 container.
//!
//! Binary layout (little endian): 8-byte magic `MSCTSTK1`, u32 version (1),
//! u8 dtype (0 = f32, 1 = u16), u8 ndim, `ndim` × u64 dims, then the payload
//! with the first dimension fastest. A stack has dims (width, rows, angles),
//! so sample `(w, row, a)` sits at `w + width·(row + rows·a)`.
//!
//! Metadata lives in a sidecar text file next to the binary (same basename,
//! extension `.meta`), one `key=value` per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MSCTSTK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StackData {
    F32(Vec<f32>),
    U16(Vec<u16>),
}

impl StackData {
    pub fn len(&self) -> usize {
        match self {
            StackData::F32(v) => v.len(),
            StackData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_code(&self) -> u8 {
        match self {
            StackData::F32(_) => 0,
            StackData::U16(_) => 1,
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        match self {
            StackData::F32(v) => v[i] as f64,
            StackData::U16(v) => v[i] as f64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            StackData::F32(v) => v.iter().map(|x| *x as f64).collect(),
            StackData::U16(v) => v.iter().map(|x| *x as f64).collect(),
        }
    }
}

/// N-dimensional array in the container format, without metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct RawArray {
    pub dims: Vec<u64>,
    pub data: StackData,
}

pub fn encode_raw(array: &RawArray) -> Result<Vec<u8>> {
    let n: u64 = array.dims.iter().product();
    if n as usize != array.data.len() {
        return Err(Error::ShapeMismatch(format!(
            "dims {:?} hold {n} values, payload has {}",
            array.dims,
            array.data.len()
        )));
    }
    let ndim = u8::try_from(array.dims.len()).map_err(|_| Error::Format("too many dimensions".into()))?;
    let width = if array.data.dtype_code() == 0 { 4 } else { 2 };
    let mut out = Vec::with_capacity(14 + 8 * array.dims.len() + width * array.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(array.data.dtype_code());
    out.push(ndim);
    for d in &array.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match &array.data {
        StackData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        StackData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<RawArray> {
    let fail = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 14 || &bytes[..8] != MAGIC {
        return Err(fail("missing MSCTSTK1 magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let dtype = bytes[12];
    let ndim = bytes[13] as usize;
    let header = 14 + 8 * ndim;
    if bytes.len() < header {
        return Err(fail("truncated header"));
    }
    let dims: Vec<u64> = (0..ndim)
        .map(|i| u64::from_le_bytes(bytes[14 + 8 * i..22 + 8 * i].try_into().unwrap()))
        .collect();
    let n = dims
        .iter()
        .try_fold(1u64, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| fail("dims overflow"))? as usize;
    let payload = &bytes[header..];
    let data = match dtype {
        0 => {
            if payload.len() != 4 * n {
                return Err(Error::Format(format!("payload is {} bytes, expected {}", payload.len(), 4 * n)));
            }
            StackData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        1 => {
            if payload.len() != 2 * n {
                return Err(Error::Format(format!("payload is {} bytes, expected {}", payload.len(), 2 * n)));
            }
            StackData::U16(payload.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect())
        }
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    Ok(RawArray { dims, data })
}

pub fn write_raw(path: impl AsRef<Path>, array: &RawArray) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_raw(array)?).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<RawArray> {
    let path = path.as_ref();
    decode_raw(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Energy interval collected by one detector row, keV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowEnergy {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StackMeta {
    pub row_energies: Vec<RowEnergy>,
    /// Expected gray value per row without object (DN).
    pub flat_field: Vec<f64>,
    pub angles: Vec<f64>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    /// Free-form provenance entries.
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinogramStack {
    width: usize,
    n_rows: usize,
    n_angles: usize,
    pub data: StackData,
    pub meta: StackMeta,
}

impl SinogramStack {
    pub fn new(width: usize, n_rows: usize, n_angles: usize, data: StackData, meta: StackMeta) -> Result<Self> {
        if width * n_rows * n_angles != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "stack {width}x{n_rows}x{n_angles} with {} values",
                data.len()
            )));
        }
        if !meta.flat_field.is_empty() && meta.flat_field.len() != n_rows {
            return Err(Error::ShapeMismatch(format!("{} flat-field entries for {n_rows} rows", meta.flat_field.len())));
        }
        if !meta.row_energies.is_empty() && meta.row_energies.len() != n_rows {
            return Err(Error::ShapeMismatch(format!("{} row energies for {n_rows} rows", meta.row_energies.len())));
        }
        if !meta.angles.is_empty() && meta.angles.len() != n_angles {
            return Err(Error::ShapeMismatch(format!("{} angles for {n_angles} projections", meta.angles.len())));
        }
        Ok(Self {
            width,
            n_rows,
            n_angles,
            data,
            meta,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.n_rows, self.n_angles)
    }

    pub fn index(&self, w: usize, row: usize, angle: usize) -> usize {
        w + self.width * (row + self.n_rows * angle)
    }

    pub fn get(&self, w: usize, row: usize, angle: usize) -> f64 {
        self.data.get(self.index(w, row, angle))
    }

    /// Sinogram of one row as an `n_angles × width` image (width fastest).
    pub fn band(&self, row: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width * self.n_angles);
        for a in 0..self.n_angles {
            let start = self.index(0, row, a);
            out.extend((start..start + self.width).map(|i| self.data.get(i)));
        }
        out
    }

    /// Replaces one row's sinogram; values are cast to the stack's dtype
    /// (u16 is rounded half to even and clamped).
    pub fn set_band(&mut self, row: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.width * self.n_angles {
            return Err(Error::ShapeMismatch(format!(
                "band of {} values for {}x{}",
                values.len(),
                self.width,
                self.n_angles
            )));
        }
        for a in 0..self.n_angles {
            let start = self.index(0, row, a);
            let src = &values[a * self.width..(a + 1) * self.width];
            match &mut self.data {
                StackData::F32(v) => v[start..start + self.width]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d = *s as f32),
                StackData::U16(v) => v[start..start + self.width]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d = s.round_ties_even().clamp(0.0, u16::MAX as f64) as u16),
            }
        }
        Ok(())
    }

    pub fn to_f32(&self) -> SinogramStack {
        let data = match &self.data {
            StackData::F32(v) => StackData::F32(v.clone()),
            StackData::U16(v) => StackData::F32(v.iter().map(|x| *x as f32).collect()),
        };
        SinogramStack { data, ..self.clone() }
    }

    pub fn same_dims(&self, other: &SinogramStack) -> bool {
        self.dims() == other.dims()
    }
}

/// Sidecar path for a stack file: same basename, `.meta` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

fn join(values: impl Iterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.enumerate() {
        if i > 0 {
            s.push(',');
        }
        // `{}` prints the shortest representation that parses back exactly.
        let _ = write!(s, "{v}");
    }
    s
}

pub fn encode_meta(stack: &SinogramStack) -> String {
    let m = &stack.meta;
    let mut out = String::new();
    let _ = writeln!(out, "# MSCTSTK1 sidecar");
    let _ = writeln!(out, "width={}", stack.width);
    let _ = writeln!(out, "n_rows={}", stack.n_rows);
    let _ = writeln!(out, "n_angles={}", stack.n_angles);
    if let Some(p) = &m.preset {
        let _ = writeln!(out, "preset={p}");
    }
    if let Some(s) = m.seed {
        let _ = writeln!(out, "seed={s}");
    }
    if !m.angles.is_empty() {
        let _ = writeln!(out, "angles={}", join(m.angles.iter().copied()));
    }
    if !m.flat_field.is_empty() {
        let _ = writeln!(out, "flat_field={}", join(m.flat_field.iter().copied()));
    }
    if !m.row_energies.is_empty() {
        let _ = writeln!(out, "row_energy_min={}", join(m.row_energies.iter().map(|r| r.min)));
        let _ = writeln!(out, "row_energy_max={}", join(m.row_energies.iter().map(|r| r.max)));
        let _ = writeln!(out, "row_energy_mean={}", join(m.row_energies.iter().map(|r| r.mean)));
    }
    for (k, v) in &m.extra {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("sidecar line {} has no '='", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("{key}: bad number {x:?}: {e}")))
        })
        .collect()
}

fn parse_usize(map: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    map.get(key)
        .ok_or_else(|| Error::Format(format!("sidecar lacks {key}")))?
        .parse()
        .map_err(|e| Error::Format(format!("{key}: {e}")))
}

pub fn decode_meta(text: &str) -> Result<((usize, usize, usize), StackMeta)> {
    let mut map = parse_key_values(text)?;
    let dims = (
        parse_usize(&map, "width")?,
        parse_usize(&map, "n_rows")?,
        parse_usize(&map, "n_angles")?,
    );
    for k in ["width", "n_rows", "n_angles"] {
        map.remove(k);
    }
    let mut meta = StackMeta {
        preset: map.remove("preset"),
        ..Default::default()
    };
    if let Some(s) = map.remove("seed") {
        meta.seed = Some(s.parse().map_err(|e| Error::Format(format!("seed: {e}")))?);
    }
    if let Some(v) = map.remove("angles") {
        meta.angles = parse_list("angles", &v)?;
    }
    if let Some(v) = map.remove("flat_field") {
        meta.flat_field = parse_list("flat_field", &v)?;
    }
    let lo = map.remove("row_energy_min").map(|v| parse_list("row_energy_min", &v)).transpose()?;
    let hi = map.remove("row_energy_max").map(|v| parse_list("row_energy_max", &v)).transpose()?;
    let mean = map.remove("row_energy_mean").map(|v| parse_list("row_energy_mean", &v)).transpose()?;
    if let (Some(lo), Some(hi), Some(mean)) = (lo, hi, mean) {
        if lo.len() != hi.len() || lo.len() != mean.len() {
            return Err(Error::Format("row energy lists differ in length".into()));
        }
        meta.row_energies = lo
            .into_iter()
            .zip(hi)
            .zip(mean)
            .map(|((min, max), mean)| RowEnergy { min, max, mean })
            .collect();
    }
    meta.extra = map;
    Ok((dims, meta))
}

/// Writes the binary stack and its sidecar.
pub fn write_stack(path: impl AsRef<Path>, stack: &SinogramStack) -> Result<()> {
    let path = path.as_ref();
    let raw = RawArray {
        dims: vec![stack.width as u64, stack.n_rows as u64, stack.n_angles as u64],
        data: stack.data.clone(),
    };
    write_raw(path, &raw)?;
    let side = sidecar_path(path);
    fs::write(&side, encode_meta(stack)).map_err(|e| Error::io(&side, e))
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<SinogramStack> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    if raw.dims.len() != 3 {
        return Err(Error::Format(format!("{}: expected 3 dims, found {}", path.display(), raw.dims.len())));
    }
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let (dims, meta) = decode_meta(&text)?;
    let bin_dims = (raw.dims[0] as usize, raw.dims[1] as usize, raw.dims[2] as usize);
    if dims != bin_dims {
        return Err(Error::ShapeMismatch(format!("sidecar dims {dims:?} differ from binary {bin_dims:?}")));
    }
    SinogramStack::new(bin_dims.0, bin_dims.1, bin_dims.2, raw.data, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SinogramStack {
        let data: Vec<u16> = (0..4 * 3 * 2).map(|i| (i * 997 % 65536) as u16).collect();
        let meta = StackMeta {
            row_energies: (0..3)
                .map(|r| RowEnergy {
                    min: 30.0 + r as f64,
                    max: 30.5 + r as f64,
                    mean: 0.1 + 0.2,
                })
                .collect(),
            flat_field: vec![1.0 / 3.0, 2e4, 7.25],
            angles: vec![0.0, std::f64::consts::FRAC_PI_2],
            preset: Some("bm18-sim".into()),
            seed: Some(u64::MAX),
            extra: BTreeMap::from([("slice".to_string(), "3".to_string())]),
        };
        SinogramStack::new(4, 3, 2, StackData::U16(data), meta).unwrap()
    }

    #[test]
    fn header_layout() {
        let raw = RawArray {
            dims: vec![2, 1, 1],
            data: StackData::F32(vec![1.0, -2.5]),
        };
        let b = encode_raw(&raw).unwrap();
        assert_eq!(&b[..8], b"MSCTSTK1");
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(b[12], 0);
        assert_eq!(b[13], 3);
        assert_eq!(&b[14..22], &2u64.to_le_bytes());
        assert_eq!(&b[38..42], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 38 + 8);
    }

    #[test]
    fn index_is_width_fastest() {
        let s = sample();
        assert_eq!(s.index(1, 0, 0), 1);
        assert_eq!(s.index(0, 1, 0), 4);
        assert_eq!(s.index(0, 0, 1), 12);
        assert_eq!(s.band(1)[4], s.get(0, 1, 1));
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.msct");
        let s = sample();
        write_stack(&p, &s).unwrap();
        assert_eq!(read_stack(&p).unwrap(), s);
        let f = s.to_f32();
        write_stack(&p, &f).unwrap();
        assert_eq!(read_stack(&p).unwrap(), f);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let raw = RawArray {
            dims: vec![2, 2],
            data: StackData::U16(vec![1, 2, 3, 4]),
        };
        let mut b = encode_raw(&raw).unwrap();
        assert!(decode_raw(&b[..b.len() - 1]).is_err());
        b[12] = 9;
        assert!(decode_raw(&b).is_err());
        assert!(decode_raw(b"NOTMAGIC\x01\0\0\0\0\0").is_err());
        assert!(encode_raw(&RawArray { dims: vec![3], data: StackData::U16(vec![1]) }).is_err());
    }

    #[test]
    fn set_band_rounds_half_to_even() {
        let mut s = sample();
        let vals = vec![2.5; 8];
        s.set_band(2, &vals).unwrap();
        assert_eq!(s.get(0, 2, 0), 2.0);
        let vals = vec![-3.0; 8];
        s.set_band(2, &vals).unwrap();
        assert_eq!(s.get(3, 2, 1), 0.0);
    }
}
