//! Self-describing binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u8` element width, then
//! tagged sections (`[u8; 4]` tag, `u64` payload length, payload). Tensor
//! sections hold a `u32` count followed by `(name, rank, dims, data)` records.
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SINKLAB\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    /// Canonical configuration text.
    Config,
    Params,
    Moment1,
    Moment2,
    /// Serialized training state (step, RNG, statistics).
    State,
}

impl Section {
    fn tag(self) -> [u8; 4] {
        *match self {
            Section::Config => b"CONF",
            Section::Params => b"PARM",
            Section::Moment1 => b"MOM1",
            Section::Moment2 => b"MOM2",
            Section::State => b"STAT",
        }
    }

    fn from_tag(tag: [u8; 4]) -> Option<Self> {
        Some(match &tag {
            b"CONF" => Section::Config,
            b"PARM" => Section::Params,
            b"MOM1" => Section::Moment1,
            b"MOM2" => Section::Moment2,
            b"STAT" => Section::State,
            _ => return None,
        })
    }
}

pub type Named<F> = Vec<(String, Tensor<F>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub config: String,
    pub params: Named<F>,
    pub moment1: Named<F>,
    pub moment2: Named<F>,
    pub state: String,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size overflow".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn text(bytes: &[u8]) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("section is not UTF-8".into()))
}

fn encode_tensors<F: Scalar>(list: &Named<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(list.len() as u32).to_le_bytes());
    for (name, t) in list {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        out.extend_from_slice(&F::to_le_bytes_vec(t.data()));
    }
    out
}

fn decode_tensors<F: Scalar>(bytes: &[u8]) -> Result<Named<F>> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = text(r.take(name_len)?)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let width = F::PRECISION.bytes();
        let data = F::from_le_bytes_slice(r.take(n * width)?);
        out.push((name, Tensor::new(shape, data)?));
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes in tensor section".into()));
    }
    Ok(out)
}

fn width_precision(width: u8) -> Result<Precision> {
    match width {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        w => Err(Error::Format(format!("unsupported element width {w}"))),
    }
}

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(F::PRECISION.bytes() as u8);
        let sections: [(Section, Vec<u8>); 5] = [
            (Section::Config, self.config.as_bytes().to_vec()),
            (Section::Params, encode_tensors(&self.params)),
            (Section::Moment1, encode_tensors(&self.moment1)),
            (Section::Moment2, encode_tensors(&self.moment2)),
            (Section::State, self.state.as_bytes().to_vec()),
        ];
        for (section, payload) in sections {
            out.extend_from_slice(&section.tag());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let precision = Self::peek_precision(bytes)?;
        if precision != F::PRECISION {
            return Err(Error::Format(format!(
                "checkpoint holds {precision:?} values, requested {:?}",
                F::PRECISION
            )));
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len() + 5,
        };
        let mut ckpt = Checkpoint {
            config: String::new(),
            params: Vec::new(),
            moment1: Vec::new(),
            moment2: Vec::new(),
            state: String::new(),
        };
        let mut seen = Vec::new();
        while !r.done() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.usize()?;
            let payload = r.take(len)?;
            let section = Section::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("unknown section {:?}", String::from_utf8_lossy(&tag))))?;
            if seen.contains(&section) {
                return Err(Error::Format(format!("duplicate section {section:?}")));
            }
            seen.push(section);
            match section {
                Section::Config => ckpt.config = text(payload)?,
                Section::Params => ckpt.params = decode_tensors(payload)?,
                Section::Moment1 => ckpt.moment1 = decode_tensors(payload)?,
                Section::Moment2 => ckpt.moment2 = decode_tensors(payload)?,
                Section::State => ckpt.state = text(payload)?,
            }
        }
        if !seen.contains(&Section::Config) || !seen.contains(&Section::Params) {
            return Err(Error::Format("checkpoint lacks config or parameters".into()));
        }
        Ok(ckpt)
    }

    /// Element precision recorded in a checkpoint header.
    pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
        if bytes.len() < MAGIC.len() + 5 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a sinklab checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        width_precision(bytes[12])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes to a sibling temporary file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
