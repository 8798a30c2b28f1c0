//! Binary containers for models and adapters.
//!
//! Layout: 4-byte magic (`LCMP` model, `LCAD` adapter), `u32` LE version,
//! `u64` LE header length, a JSON header, then every matrix listed in the
//! header as row-major `f64` LE.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{Adapter, Edit, EditMode};
use crate::model::{ModelDims, ModelParams};

pub const MODEL_MAGIC: [u8; 4] = *b"LCMP";
pub const ADAPTER_MAGIC: [u8; 4] = *b"LCAD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MatrixInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    dims: ModelDims,
    seed: u64,
    fingerprint: String,
    matrices: Vec<MatrixInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterHeader {
    mode: EditMode,
    provenance: Vec<Edit>,
    matrices: Vec<MatrixInfo>,
}

fn write_container<W: Write>(out: &mut W, magic: [u8; 4], header: &[u8], mats: &[&DMatrix<f64>]) -> Result<()> {
    out.write_all(&magic)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(header)?;
    for m in mats {
        let mut buf = Vec::with_capacity(m.len() * 8);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                buf.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Container<'a> {
    header: &'a [u8],
    body: &'a [u8],
}

fn split_container<'a>(bytes: &'a [u8], magic: [u8; 4], kind: &str) -> Result<Container<'a>> {
    if bytes.len() < 16 {
        return Err(Error::Parse(format!("{kind} file truncated ({} bytes)", bytes.len())));
    }
    if bytes[..4] != magic {
        return Err(Error::Parse(format!(
            "not a {kind} file: magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Parse(format!("unsupported {kind} format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Parse(format!("{kind} header length {len} exceeds file size")))?;
    Ok(Container { header: &bytes[16..end], body: &bytes[end..] })
}

fn read_matrices(body: &[u8], infos: &[MatrixInfo]) -> Result<Vec<DMatrix<f64>>> {
    let total: usize = infos.iter().map(|i| i.rows * i.cols * 8).sum();
    if body.len() != total {
        return Err(Error::Parse(format!("matrix payload is {} bytes, header describes {total}", body.len())));
    }
    let mut at = 0;
    Ok(infos
        .iter()
        .map(|info| {
            let m = DMatrix::from_fn(info.rows, info.cols, |i, j| {
                let o = at + (i * info.cols + j) * 8;
                f64::from_le_bytes(body[o..o + 8].try_into().expect("8 bytes"))
            });
            at += info.rows * info.cols * 8;
            m
        })
        .collect())
}

fn info(name: &str, m: &DMatrix<f64>) -> MatrixInfo {
    MatrixInfo { name: name.into(), rows: m.nrows(), cols: m.ncols() }
}

fn parse_header<T: for<'de> Deserialize<'de>>(bytes: &[u8], kind: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("{kind} header: {e}")))
}

pub fn write_model<W: Write>(out: &mut W, params: &ModelParams) -> Result<()> {
    let mats = [params.embeddings(), params.mlp_in(), params.value(), params.output()];
    let header = ModelHeader {
        dims: params.dims(),
        seed: params.seed(),
        fingerprint: params.frozen_fingerprint(),
        matrices: ["E", "U", "V", "W"].iter().zip(&mats).map(|(n, m)| info(n, m)).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Numerical(e.to_string()))?;
    write_container(out, MODEL_MAGIC, &json, &mats)
}

pub fn read_model<R: Read>(input: &mut R) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let c = split_container(&bytes, MODEL_MAGIC, "model")?;
    let header: ModelHeader = parse_header(c.header, "model")?;
    if header.matrices.len() != 4 {
        return Err(Error::Parse(format!("model header lists {} matrices, expected 4", header.matrices.len())));
    }
    let mut mats = read_matrices(c.body, &header.matrices)?.into_iter();
    let mut next = || mats.next().expect("four matrices");
    let (e, u, v, w) = (next(), next(), next(), next());
    let params = ModelParams::from_parts(header.dims, e, u, v, w, header.seed)?;
    if params.frozen_fingerprint() != header.fingerprint {
        return Err(Error::Parse("model fingerprint does not match its frozen weights".into()));
    }
    Ok(params)
}

pub fn write_adapter<W: Write>(out: &mut W, adapter: &Adapter) -> Result<()> {
    let mats = [adapter.out_factor(), adapter.in_factor()];
    let header = AdapterHeader {
        mode: adapter.mode(),
        provenance: adapter.provenance().to_vec(),
        matrices: vec![info("out", mats[0]), info("in", mats[1])],
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Numerical(e.to_string()))?;
    write_container(out, ADAPTER_MAGIC, &json, &mats)
}

pub fn read_adapter<R: Read>(input: &mut R) -> Result<Adapter> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let c = split_container(&bytes, ADAPTER_MAGIC, "adapter")?;
    let header: AdapterHeader = parse_header(c.header, "adapter")?;
    if header.matrices.len() != 2 {
        return Err(Error::Parse(format!("adapter header lists {} matrices, expected 2", header.matrices.len())));
    }
    let mut mats = read_matrices(c.body, &header.matrices)?.into_iter();
    let (o, i) = (mats.next().expect("out"), mats.next().expect("in"));
    Adapter::new(o, i, header.provenance, header.mode)
}

pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_model(&mut fs::File::open(path)?)
}

pub fn save_adapter(adapter: &Adapter, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_adapter(&mut buf, adapter)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<Adapter> {
    read_adapter(&mut fs::File::open(path)?)
}
