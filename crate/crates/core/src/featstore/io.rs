//! `.feat` binary and CSV feature files.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic    "FEAT1\0"            6 bytes
//! version  u32 (= 1)
//! dim      u32
//! count    u64
//! labeled  u8 (0 or 1)
//! vectors  count * dim * f32    row-major
//! labels   count * i32          only when labeled = 1
//! ids      count * u64
//! ```
//!
//! CSV files carry the header `id,class,f0,...,f{D-1}`; the class column is
//! left empty for unlabeled sets.

use std::fs;
use std::path::Path;

use super::{FeatureRecord, FeatureSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"FEAT1\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 6 + 4 + 4 + 8 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Binary,
    Csv,
}

impl FileFormat {
    /// `.csv` selects CSV, anything else the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

pub fn load_features(path: &Path, format: FileFormat) -> Result<FeatureSet> {
    match format {
        FileFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            read_binary(&bytes)
        }
        FileFormat::Csv => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_csv(file)
        }
    }
}

pub fn save_features(fs_: &FeatureSet, path: &Path, format: FileFormat) -> Result<()> {
    let bytes = match format {
        FileFormat::Binary => write_binary(fs_),
        FileFormat::Csv => {
            let mut buf = Vec::new();
            write_csv(fs_, &mut buf)?;
            buf
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N, what)?);
        Ok(out)
    }
}

pub fn read_binary(bytes: &[u8]) -> Result<FeatureSet> {
    if bytes.len() < HEADER_LEN || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing FEAT1 magic".into()));
    }
    let mut cur = Cursor { bytes, pos: 6 };
    let version = u32::from_le_bytes(cur.array("version")?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(cur.array("dim")?) as usize;
    let count = u64::from_le_bytes(cur.array("count")?);
    let labeled = match cur.array::<1>("label flag")?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("label flag must be 0 or 1, got {other}"))),
    };
    if dim == 0 {
        return Err(Error::Format("dimension must be positive".into()));
    }
    let count = usize::try_from(count).map_err(|_| Error::Format("count overflows".into()))?;
    let per_record = dim * 4 + 8 + if labeled { 4 } else { 0 };
    let expected = count
        .checked_mul(per_record)
        .and_then(|body| body.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("count overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes for {count} records of dim {dim}, found {}",
            bytes.len()
        )));
    }

    let vec_bytes = cur.take(count * dim * 4, "vectors")?;
    let label_bytes = if labeled {
        Some(cur.take(count * 4, "labels")?)
    } else {
        None
    };
    let id_bytes = cur.take(count * 8, "ids")?;

    let records = (0..count)
        .map(|i| {
            let row = &vec_bytes[i * dim * 4..(i + 1) * dim * 4];
            let vector = row
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let true_class = label_bytes.map(|lb| {
                let c = &lb[i * 4..i * 4 + 4];
                i32::from_le_bytes([c[0], c[1], c[2], c[3]])
            });
            let mut id = [0u8; 8];
            id.copy_from_slice(&id_bytes[i * 8..i * 8 + 8]);
            FeatureRecord {
                id: u64::from_le_bytes(id),
                vector,
                true_class,
            }
        })
        .collect();
    FeatureSet::new(dim, records)
}

pub fn write_binary(fs_: &FeatureSet) -> Vec<u8> {
    let n = fs_.len();
    let dim = fs_.dim();
    let labeled = fs_.is_labeled();
    let mut out = Vec::with_capacity(HEADER_LEN + n * (dim * 4 + 12));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.push(u8::from(labeled));
    for r in fs_.records() {
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if labeled {
        for r in fs_.records() {
            out.extend_from_slice(&r.true_class.unwrap_or_default().to_le_bytes());
        }
    }
    for r in fs_.records() {
        out.extend_from_slice(&r.id.to_le_bytes());
    }
    out
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<FeatureSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "class" {
        return Err(Error::Format("CSV header must start with id,class,f0".into()));
    }
    let dim = headers.len() - 2;
    for (j, h) in headers.iter().skip(2).enumerate() {
        if h != format!("f{j}") {
            return Err(Error::Format(format!("unexpected CSV column {h:?}, wanted f{j}")));
        }
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, .. } => Error::dim(dim, (*len as usize).saturating_sub(2)),
            _ => Error::Csv(e),
        })?;
        let id: u64 = row[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad record id {:?}", &row[0])))?;
        let class = row[1].trim();
        let true_class = if class.is_empty() {
            None
        } else {
            Some(
                class
                    .parse()
                    .map_err(|_| Error::Format(format!("bad class {class:?} for record {id}")))?,
            )
        };
        let vector = row
            .iter()
            .skip(2)
            .map(|v| {
                v.trim()
                    .parse::<f32>()
                    .map_err(|_| Error::Format(format!("bad value {v:?} in record {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(FeatureRecord {
            id,
            vector,
            true_class,
        });
    }
    FeatureSet::new(dim, records)
}

pub fn write_csv<W: std::io::Write>(fs_: &FeatureSet, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "class".to_string()];
    header.extend((0..fs_.dim()).map(|j| format!("f{j}")));
    wtr.write_record(&header)?;
    for r in fs_.records() {
        let mut row = Vec::with_capacity(fs_.dim() + 2);
        row.push(r.id.to_string());
        row.push(r.true_class.map(|c| c.to_string()).unwrap_or_default());
        row.extend(r.vector.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
