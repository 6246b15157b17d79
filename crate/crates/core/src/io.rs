//! Tensor file formats.
//!
//! Binary: an ASCII header `CPT1 <N> <I_1> ... <I_N>\n` followed by the
//! values as little-endian f64 in row-major order.
//!
//! CSV: one line per entry, `i_1,...,i_N,value` with 1-based indices.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{flat_offset, DenseTensor, MultiIndex, Shape};

const MAGIC: &str = "CPT1";

pub fn write_tensor<W: Write>(mut w: W, tensor: &DenseTensor) -> Result<()> {
    let dims = tensor.shape().dims();
    let mut header = format!("{MAGIC} {}", dims.len());
    for d in dims {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    for v in tensor.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor<R: BufRead>(mut r: R) -> Result<DenseTensor> {
    let mut header = Vec::new();
    r.read_until(b'\n', &mut header)?;
    if header.last() != Some(&b'\n') {
        return Err(Error::Input(
            "tensor header is not newline-terminated".into(),
        ));
    }
    let header = std::str::from_utf8(&header[..header.len() - 1])
        .map_err(|_| Error::Input("tensor header is not ASCII".into()))?;
    let mut fields = header.split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(Error::Input(format!("missing {MAGIC} magic")));
    }
    let parse = |s: Option<&str>| -> Result<usize> {
        s.and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Input(format!("malformed tensor header `{header}`")))
    };
    let order = parse(fields.next())?;
    let dims = (0..order)
        .map(|_| parse(fields.next()))
        .collect::<Result<Vec<_>>>()?;
    if fields.next().is_some() {
        return Err(Error::Input(format!(
            "trailing fields in header `{header}`"
        )));
    }
    let shape = Shape::new(dims)?;

    let mut values = Vec::with_capacity(shape.element_count());
    let mut buf = [0u8; 8];
    for k in 0..shape.element_count() {
        r.read_exact(&mut buf).map_err(|e| {
            Error::Input(format!(
                "tensor body truncated at element {k} of {}: {e}",
                shape.element_count()
            ))
        })?;
        let v = f64::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(Error::Input(format!("non-finite value at element {k}")));
        }
        values.push(v);
    }
    DenseTensor::from_vec(shape, values)
}

pub fn save_tensor(path: &Path, tensor: &DenseTensor) -> Result<()> {
    write_tensor(BufWriter::new(File::create(path)?), tensor)
}

pub fn load_tensor(path: &Path) -> Result<DenseTensor> {
    read_tensor(BufReader::new(File::open(path)?))
}

pub fn write_tensor_csv<W: Write>(mut w: W, tensor: &DenseTensor) -> Result<()> {
    for (idx, v) in tensor.shape().indices().zip(tensor.values()) {
        let coords: Vec<String> = idx.to_one_based().iter().map(usize::to_string).collect();
        writeln!(w, "{},{v:?}", coords.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV form into a tensor of the given shape. Entries not listed
/// stay zero.
pub fn read_tensor_csv<R: BufRead>(r: R, shape: Shape) -> Result<DenseTensor> {
    let mut t = DenseTensor::zeros(shape);
    let order = t.shape().order();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != order + 1 {
            return Err(Error::Input(format!(
                "line {}: expected {} fields, found {}",
                lineno + 1,
                order + 1,
                fields.len()
            )));
        }
        let coords = fields[..order]
            .iter()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Input(format!("line {}: {e}", lineno + 1)))?;
        let value: f64 = fields[order]
            .parse()
            .map_err(|e| Error::Input(format!("line {}: {e}", lineno + 1)))?;
        if !value.is_finite() {
            return Err(Error::Input(format!(
                "line {}: non-finite value",
                lineno + 1
            )));
        }
        let idx = MultiIndex::from_one_based(&coords)?;
        let off = flat_offset(t.shape(), &idx)?;
        t.values_mut()[off] = value;
    }
    Ok(t)
}
