//! File formats: the HSC cube container, endmember CSV, and 16-bit PGM
//! abundance images.
//!
//! HSC layout: magic bytes `HSC1`, three 32-bit little-endian unsigned
//! integers `L, H, W`, then `L*H*W` IEEE-754 32-bit little-endian floats in
//! band-major, row-major order.

use super::HsiCube;
use crate::error::{Result, UnmixError};
use crate::hsi_data::EndmemberMatrix;
use ndarray::{Array2, Array3};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const HSC_MAGIC: &[u8; 4] = b"HSC1";

/// Writes a cube to the HSC container. Values are narrowed to 32-bit floats.
pub fn store_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(HSC_MAGIC)?;
    for dim in [cube.bands(), cube.height(), cube.width()] {
        let dim = u32::try_from(dim)
            .map_err(|_| UnmixError::Format(format!("dimension {dim} exceeds u32")))?;
        w.write_all(&dim.to_le_bytes())?;
    }
    for v in cube.values().iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cube from the HSC container, widening the payload to 64-bit floats.
pub fn load_cube(path: &Path) -> Result<HsiCube> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| UnmixError::Format("file too short for HSC header".into()))?;
    if &magic != HSC_MAGIC {
        return Err(UnmixError::Format(format!(
            "bad magic {:?}, expected \"HSC1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)
            .map_err(|_| UnmixError::Format("truncated HSC header".into()))?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let [l, h, w] = dims;
    if l == 0 || h == 0 || w == 0 {
        return Err(UnmixError::Format(format!("empty cube axis in {l}x{h}x{w}")));
    }
    let count = l
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| UnmixError::Format(format!("dimension overflow: {l}x{h}x{w}")))?;

    let mut payload = vec![0.0f64; count];
    let mut buf = [0u8; 4];
    for (i, v) in payload.iter_mut().enumerate() {
        r.read_exact(&mut buf).map_err(|_| {
            UnmixError::Format(format!("truncated payload: got {i} of {count} samples"))
        })?;
        *v = f32::from_le_bytes(buf) as f64;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(UnmixError::Format(
            "trailing bytes after declared payload".into(),
        ));
    }
    let values = Array3::from_shape_vec((l, h, w), payload).expect("count = l*h*w");
    HsiCube::new(values)
}

/// Writes the `L x P` endmember matrix as CSV with header `band,em1,...,emP`.
pub fn store_endmember_csv(endmembers: &EndmemberMatrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "band")?;
    for p in 1..=endmembers.materials() {
        write!(w, ",em{p}")?;
    }
    writeln!(w)?;
    for l in 0..endmembers.bands() {
        write!(w, "{l}")?;
        for p in 0..endmembers.materials() {
            write!(w, ",{}", endmembers.values()[[l, p]])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an endmember CSV written by [`store_endmember_csv`].
pub fn load_endmember_csv(path: &Path) -> Result<EndmemberMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| UnmixError::Format("empty endmember CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"band") || cols.len() < 2 {
        return Err(UnmixError::Format(format!(
            "bad endmember CSV header {header:?}"
        )));
    }
    let materials = cols.len() - 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != materials + 1 {
            return Err(UnmixError::Format(format!(
                "row {i} has {} fields, expected {}",
                fields.len(),
                materials + 1
            )));
        }
        let mut row = Vec::with_capacity(materials);
        for f in &fields[1..] {
            row.push(f.parse::<f64>().map_err(|_| {
                UnmixError::Format(format!("bad float {f:?} in endmember CSV row {i}"))
            })?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(UnmixError::Format("endmember CSV has no data rows".into()));
    }
    let bands = rows.len();
    let mut values = Array2::zeros((bands, materials));
    for (l, row) in rows.iter().enumerate() {
        for (p, v) in row.iter().enumerate() {
            values[[l, p]] = *v;
        }
    }
    EndmemberMatrix::new(values)
}

/// Writes one abundance map as a 16-bit binary PGM (P5), scaling values
/// linearly from `[0, 1]` to `[0, 65535]`.
pub fn store_abundance_pgm(map: ndarray::ArrayView2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for i in 0..h {
        for j in 0..w {
            let q = (map[[i, j]].clamp(0.0, 1.0) * 65535.0).round() as u16;
            out.write_all(&q.to_be_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a 16-bit binary PGM written by [`store_abundance_pgm`], scaling back
/// to `[0, 1]`.
pub fn load_abundance_pgm(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(UnmixError::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(UnmixError::Format("not a binary PGM (missing P5)".into()));
    }
    let w: usize = token(&bytes)?
        .parse()
        .map_err(|_| UnmixError::Format("bad PGM width".into()))?;
    let h: usize = token(&bytes)?
        .parse()
        .map_err(|_| UnmixError::Format("bad PGM height".into()))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| UnmixError::Format("bad PGM maxval".into()))?;
    if maxval != 65535 {
        return Err(UnmixError::Format(format!(
            "expected 16-bit PGM (maxval 65535), got {maxval}"
        )));
    }
    pos += 1; // single whitespace after maxval
    let need = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| UnmixError::Format("PGM dimension overflow".into()))?;
    if bytes.len() < pos + need {
        return Err(UnmixError::Format("truncated PGM payload".into()));
    }
    let mut values = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let o = pos + 2 * (i * w + j);
            let q = u16::from_be_bytes([bytes[o], bytes[o + 1]]);
            values[[i, j]] = q as f64 / 65535.0;
        }
    }
    Ok(values)
}
