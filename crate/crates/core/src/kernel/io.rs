//! Kernel files.
//!
//! Binary layout (little-endian): the 8-byte magic `NDPPKRN1`, then `u64`
//! `n`, `d1`, `d2`, then `V` (n·d1), `B` (n·d2) and `D` (d2·d2) as row-major
//! binary64. The text variant (`*.ndpp.txt`) has a header line
//! `NDPP n d1 d2` followed by whitespace-separated decimal rows of `V`, `B`,
//! `D` in the same order. Decimals are written in shortest round-trip form,
//! so both variants are lossless.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::LowRankKernel;
use crate::error::{NdppError, Result};

pub const MAGIC: &[u8; 8] = b"NDPPKRN1";
const TEXT_TAG: &str = "NDPP";
// Guards allocation from a corrupt header.
const MAX_ENTRIES: u64 = 1 << 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFormat {
    Binary,
    Text,
}

impl KernelFormat {
    pub fn from_path(path: &Path) -> Self {
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if name.ends_with(".txt") {
            KernelFormat::Text
        } else {
            KernelFormat::Binary
        }
    }
}

/// Writes `kernel` to `path`, choosing the text variant for `*.txt` names.
pub fn save_kernel(kernel: &LowRankKernel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path)?);
    match KernelFormat::from_path(path) {
        KernelFormat::Binary => write_binary(kernel, &mut out)?,
        KernelFormat::Text => write_text(kernel, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

pub fn load_kernel(path: impl AsRef<Path>) -> Result<LowRankKernel> {
    let path = path.as_ref();
    let file = BufReader::new(File::open(path)?);
    match KernelFormat::from_path(path) {
        KernelFormat::Binary => read_binary(file),
        KernelFormat::Text => read_text(file),
    }
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

pub fn write_binary<W: Write>(kernel: &LowRankKernel, out: &mut W) -> Result<()> {
    out.write_all(MAGIC)?;
    for dim in [kernel.n(), kernel.d1(), kernel.d2()] {
        out.write_all(&(dim as u64).to_le_bytes())?;
    }
    for m in [kernel.v(), kernel.b(), kernel.d()] {
        for value in row_major(m) {
            out.write_all(&value.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_text<W: Write>(kernel: &LowRankKernel, out: &mut W) -> Result<()> {
    writeln!(
        out,
        "{TEXT_TAG} {} {} {}",
        kernel.n(),
        kernel.d1(),
        kernel.d2()
    )?;
    for m in [kernel.v(), kernel.b(), kernel.d()] {
        for i in 0..m.nrows() {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

fn check_dims(n: u64, d1: u64, d2: u64) -> Result<(usize, usize, usize)> {
    if n == 0 {
        return Err(NdppError::Format("header declares n = 0".into()));
    }
    if d1.saturating_add(d2) < 2 {
        return Err(NdppError::Format(format!(
            "header declares d1 + d2 = {} < 2",
            d1 + d2
        )));
    }
    let entries = n
        .checked_mul(d1.saturating_add(d2))
        .and_then(|e| e.checked_add(d2.checked_mul(d2)?));
    match entries {
        Some(e) if e <= MAX_ENTRIES => Ok((n as usize, d1 as usize, d2 as usize)),
        _ => Err(NdppError::Format(format!(
            "implausible dimensions n={n} d1={d1} d2={d2}"
        ))),
    }
}

fn finish(v: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>) -> Result<LowRankKernel> {
    LowRankKernel::new(v, b, d).map_err(|e| match e {
        NdppError::NonFinite(section) => {
            NdppError::Format(format!("non-finite value in section {section}"))
        }
        other => other,
    })
}

pub fn read_binary<R: Read>(mut input: R) -> Result<LowRankKernel> {
    let mut magic = [0u8; 8];
    read_exact_or(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(NdppError::Format(
            "bad magic, not an NDPP kernel file".into(),
        ));
    }
    let mut dims = [0u64; 3];
    for (slot, name) in dims.iter_mut().zip(["n", "d1", "d2"]) {
        let mut buf = [0u8; 8];
        read_exact_or(&mut input, &mut buf, name)?;
        *slot = u64::from_le_bytes(buf);
    }
    let (n, d1, d2) = check_dims(dims[0], dims[1], dims[2])?;

    let mut section = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let mut bytes = vec![0u8; rows * cols * 8];
        read_exact_or(&mut input, &mut bytes, name)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    };
    let v = section("V", n, d1)?;
    let b = section("B", n, d2)?;
    let d = section("D", d2, d2)?;

    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(NdppError::Format("trailing bytes after section D".into()));
    }
    finish(v, b, d)
}

fn read_exact_or<R: Read>(input: &mut R, buf: &mut [u8], section: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NdppError::Format(format!("truncated payload: missing section {section}"))
        } else {
            NdppError::Io(e)
        }
    })
}

pub fn read_text<R: BufRead>(input: R) -> Result<LowRankKernel> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| NdppError::Format("empty file, missing header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != TEXT_TAG {
        return Err(NdppError::Format(format!("malformed header {header:?}")));
    }
    let parse_dim = |s: &str| {
        s.parse::<u64>()
            .map_err(|_| NdppError::Format(format!("malformed header dimension {s:?}")))
    };
    let (n, d1, d2) = check_dims(
        parse_dim(fields[1])?,
        parse_dim(fields[2])?,
        parse_dim(fields[3])?,
    )?;

    let mut values = Vec::with_capacity(n * (d1 + d2) + d2 * d2);
    for line in lines {
        for tok in line?.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| NdppError::Format(format!("unparseable number {tok:?}")))?;
            values.push(v);
        }
    }
    let sections = [("V", n, d1), ("B", n, d2), ("D", d2, d2)];
    let mut offset = 0;
    let mut mats = Vec::with_capacity(3);
    for (name, rows, cols) in sections {
        let len = rows * cols;
        if values.len() < offset + len {
            return Err(NdppError::Format(format!(
                "truncated payload: missing section {name}"
            )));
        }
        mats.push(DMatrix::from_row_slice(
            rows,
            cols,
            &values[offset..offset + len],
        ));
        offset += len;
    }
    if values.len() != offset {
        return Err(NdppError::Format(format!(
            "{} values after section D",
            values.len() - offset
        )));
    }
    let d = mats.pop().expect("three sections");
    let b = mats.pop().expect("three sections");
    let v = mats.pop().expect("three sections");
    finish(v, b, d)
}
