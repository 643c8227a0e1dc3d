//! Binary model checkpoints.
//!
//! Layout: an 8-byte little-endian header length, the JSON header, then the
//! raw little-endian tensor values concatenated in table order. Byte offsets
//! in the table are relative to the start of the body.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clsnet::{StudentConfig, StudentModel};
use crate::error::{bail, Result};
use crate::tensor::{DType, Float, ParamSet, Tensor};
use crate::wsdnet::{TeacherConfig, TeacherModel};

pub const FORMAT_VERSION: u32 = 1;
pub const TEACHER_KIND: &str = "teacher";
pub const STUDENT_KIND: &str = "student";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model_kind: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Header {
    /// Offsets must start at zero and follow each other without gaps.
    fn check_layout(&self, body_len: usize) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            bail!(Input, "unsupported checkpoint format version {}", self.format_version);
        }
        let mut next = 0u64;
        for t in &self.tensors {
            if t.byte_offset != next {
                bail!(Input, "tensor {} starts at byte {} but {} was expected", t.name, t.byte_offset, next);
            }
            next += (t.shape.iter().product::<usize>() * t.dtype.size_of()) as u64;
        }
        if next != body_len as u64 {
            bail!(Input, "checkpoint body has {body_len} bytes but the table describes {next}");
        }
        Ok(())
    }
}

pub fn save_params<T: Float>(
    params: &ParamSet<T>,
    model_kind: &str,
    metadata: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut body = Vec::with_capacity(params.numel() * T::DTYPE.size_of());
    let mut tensors = Vec::with_capacity(params.len());
    for p in params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: T::DTYPE,
            byte_offset: body.len() as u64,
        });
        for &v in p.value.data() {
            v.write_le(&mut body);
        }
    }
    let header = Header { format_version: FORMAT_VERSION, model_kind: model_kind.to_string(), tensors, metadata };
    let json = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&body)?;
    out.flush()?;
    Ok(())
}

fn read_raw(path: &Path) -> Result<(Header, Vec<u8>)> {
    let mut file = std::fs::File::open(path)?;
    let mut len = [0u8; 8];
    file.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if len > rest.len() {
        bail!(Input, "{}: header length {len} exceeds file size", path.display());
    }
    let header: Header = serde_json::from_slice(&rest[..len])?;
    let body = rest.split_off(len);
    header.check_layout(body.len())?;
    Ok((header, body))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    Ok(read_raw(path.as_ref())?.0)
}

/// Load every tensor of a checkpoint whose element type is `T`.
pub fn load_params<T: Float>(path: impl AsRef<Path>) -> Result<(Header, ParamSet<T>)> {
    let path = path.as_ref();
    let (header, body) = read_raw(path)?;
    let mut params = ParamSet::new();
    let size = T::DTYPE.size_of();
    for t in &header.tensors {
        if t.dtype != T::DTYPE {
            bail!(Input, "{}: tensor {} is {:?}, expected {:?}", path.display(), t.name, t.dtype, T::DTYPE);
        }
        let start = t.byte_offset as usize;
        let n: usize = t.shape.iter().product();
        let data = body[start..start + n * size].chunks_exact(size).map(T::read_le).collect();
        params.insert(t.name.clone(), Tensor::new(&t.shape, data)?)?;
    }
    Ok((header, params))
}

/// Copy `loaded` into `target`, requiring identical names and shapes.
fn assign<T: Float>(target: &mut ParamSet<T>, loaded: ParamSet<T>) -> Result<()> {
    if target.len() != loaded.len() {
        bail!(Input, "checkpoint has {} tensors, model expects {}", loaded.len(), target.len());
    }
    for p in loaded.iter() {
        let Some(slot) = target.get_mut(&p.name) else {
            bail!(Input, "checkpoint tensor {} does not belong to this model", p.name);
        };
        if slot.value.shape() != p.value.shape() {
            bail!(Input, "tensor {}: checkpoint shape {:?}, model {:?}", p.name, p.value.shape(), slot.value.shape());
        }
        slot.value = p.value.clone();
    }
    Ok(())
}

fn expect_kind(header: &Header, kind: &str, path: &Path) -> Result<()> {
    if header.model_kind != kind {
        bail!(Input, "{} holds a {} checkpoint, expected {kind}", path.display(), header.model_kind);
    }
    Ok(())
}

fn config_from<C: for<'de> Deserialize<'de>>(header: &Header, path: &Path) -> Result<C> {
    match header.metadata.get("config") {
        Some(c) => Ok(serde_json::from_value(c.clone())?),
        None => bail!(Input, "{}: checkpoint metadata has no config", path.display()),
    }
}

pub fn save_teacher<T: Float>(model: &TeacherModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let meta = serde_json::json!({ "config": model.cfg });
    save_params(&model.params, TEACHER_KIND, meta, path)
}

pub fn load_teacher<T: Float>(path: impl AsRef<Path>) -> Result<TeacherModel<T>> {
    let path = path.as_ref();
    let (header, params) = load_params::<T>(path)?;
    expect_kind(&header, TEACHER_KIND, path)?;
    let cfg: TeacherConfig = config_from(&header, path)?;
    let mut model = TeacherModel::new(cfg, 0)?;
    assign(&mut model.params, params)?;
    Ok(model)
}

/// Save a student; `extra` is merged into the metadata next to the config
/// and the stage-1 flag.
pub fn save_student<T: Float>(model: &StudentModel<T>, extra: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let mut meta = serde_json::json!({ "config": model.cfg, "stage1_done": model.stage1_done });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    save_params(&model.params, STUDENT_KIND, meta, path)
}

pub fn load_student<T: Float>(path: impl AsRef<Path>) -> Result<StudentModel<T>> {
    let path = path.as_ref();
    let (header, params) = load_params::<T>(path)?;
    expect_kind(&header, STUDENT_KIND, path)?;
    let cfg: StudentConfig = config_from(&header, path)?;
    let mut model = StudentModel::new(cfg, 0)?;
    assign(&mut model.params, params)?;
    model.stage1_done = header.metadata.get("stage1_done").and_then(|v| v.as_bool()).unwrap_or(false);
    Ok(model)
}
