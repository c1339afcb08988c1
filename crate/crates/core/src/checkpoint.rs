//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMPI" | u32 version | [u8; 32] config digest | u32 len | config text
//! u32 tensor count, then per tensor:
//!   u32 len | name | u8 group | u8 frozen | u32 rank | u64 dims[rank]
//!   u8 dtype (0 = f64) | u64 count | f64 values[count]
//!   u8 has_optimizer [ | u64 steps | f64 m[count] | f64 v[count] ]
//! ```
//!
//! Geometry that is not learned (frustum poses, plane depths, the cube box,
//! density shifts, head sizes) is stored as tensors in the `meta` group.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use sha2::{Digest, Sha256};

use crate::appearance::HeadConfig;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::{MpiFrustum, Pose, Vec3};
use crate::grids::PlaneStack;
use crate::model::{CubeSpec, MmpiModel, ModelSpec, MpiSpec};
use crate::optim::ParamGroup;

pub const MAGIC: &[u8; 4] = b"MMPI";
pub const VERSION: u32 = 1;
const META_GROUP: u8 = 255;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
struct Tensor {
    name: String,
    group: u8,
    frozen: bool,
    dims: Vec<usize>,
    values: Vec<f64>,
    optimizer: Option<(u64, Vec<f64>, Vec<f64>)>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MmpiModel,
    pub config: TrainConfig,
    pub digest: [u8; 32],
}

fn meta(name: impl Into<String>, values: Vec<f64>) -> Tensor {
    Tensor {
        name: name.into(),
        group: META_GROUP,
        frozen: true,
        dims: vec![values.len()],
        values,
        optimizer: None,
    }
}

fn frustum_values(f: &MpiFrustum) -> Vec<f64> {
    let r = f.pose.rotation();
    let t = f.pose.position();
    let mut v = Vec::with_capacity(15);
    for row in 0..3 {
        v.extend([r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row]]);
    }
    v.extend([f.tan_half_fov_x, f.tan_half_fov_y, f.near]);
    v
}

fn frustum_from(v: &[f64]) -> Result<MpiFrustum> {
    if v.len() != 15 {
        return Err(Error::Checkpoint("frustum record must hold 15 values".into()));
    }
    let r = Matrix3::from_fn(|i, j| v[4 * i + j]);
    let t = Vec3::new(v[3], v[7], v[11]);
    let pose = Pose::new(r, t).map_err(|e| Error::Checkpoint(format!("stored pose: {e}")))?;
    MpiFrustum::new(pose, v[12], v[13], v[14])
}

fn tensors_of(model: &MmpiModel, with_optimizer: bool) -> Vec<Tensor> {
    let mut out = Vec::new();
    let h = model.head.config;
    out.push(meta(
        "meta.head",
        vec![
            h.feature_dim as f64,
            h.pe_freqs_x as f64,
            h.pe_freqs_d as f64,
            h.hidden_width as f64,
            h.hidden_layers as f64,
        ],
    ));
    for (i, m) in model.mpis.iter().enumerate() {
        out.push(meta(format!("meta.mpi.{i}.frustum"), frustum_values(&m.frustum)));
        out.push(meta(
            format!("meta.mpi.{i}.layout"),
            vec![m.density_layout.res_x as f64, m.density_layout.res_y as f64, m.density_shift],
        ));
        out.push(meta(format!("meta.mpi.{i}.plane_z"), m.density_layout.plane_z.clone()));
    }
    if let Some(c) = &model.cube {
        let g = &c.density_layout;
        let mut v = vec![g.dims[0] as f64, g.dims[1] as f64, g.dims[2] as f64];
        v.extend(g.aabb_min.iter());
        v.extend(g.aabb_max.iter());
        v.extend([c.step_ratio, c.density_shift]);
        out.push(meta("meta.cube", v));
    }
    for p in model.store.params() {
        out.push(Tensor {
            name: p.name.clone(),
            group: p.group.code(),
            frozen: p.frozen,
            dims: p.shape.clone(),
            values: p.values.clone(),
            optimizer: with_optimizer.then(|| (p.steps, p.first_moment.clone(), p.second_moment.clone())),
        });
    }
    out
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes a model and its configuration.
pub fn encode(model: &MmpiModel, config: &TrainConfig, with_optimizer: bool) -> Vec<u8> {
    let text = config.canonical();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    buf.extend_from_slice(&config.digest());
    put_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    let tensors = tensors_of(model, with_optimizer);
    put_u32(&mut buf, tensors.len() as u32);
    for t in &tensors {
        put_u32(&mut buf, t.name.len() as u32);
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.group);
        buf.push(t.frozen as u8);
        put_u32(&mut buf, t.dims.len() as u32);
        for &d in &t.dims {
            put_u64(&mut buf, d as u64);
        }
        buf.push(DTYPE_F64);
        put_u64(&mut buf, t.values.len() as u64);
        put_f64s(&mut buf, &t.values);
        match &t.optimizer {
            None => buf.push(0),
            Some((steps, m, v)) => {
                buf.push(1);
                put_u64(&mut buf, *steps);
                put_f64s(&mut buf, m);
                put_f64s(&mut buf, v);
            }
        }
    }
    buf
}

pub fn save(model: &MmpiModel, config: &TrainConfig, path: &Path, with_optimizer: bool) -> Result<()> {
    let bytes = encode(model, config, with_optimizer);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

fn as_usize(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
        Ok(v as usize)
    } else {
        Err(Error::Checkpoint(format!("{what} is not a count: {v}")))
    }
}

/// Parses checkpoint bytes. The stored digest must match `expected` unless
/// `force` is set; the stored digest must always match the stored config.
pub fn decode(bytes: &[u8], expected: Option<&[u8; 32]>, force: bool) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not an MMPI checkpoint)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let text = r.string()?;
    let actual: [u8; 32] = Sha256::digest(text.as_bytes()).into();
    if actual != digest {
        return Err(Error::Checkpoint("stored configuration does not match its digest".into()));
    }
    if let Some(exp) = expected {
        if exp != &digest && !force {
            return Err(Error::Checkpoint(
                "configuration digest differs from the expected one (use force to load anyway)".into(),
            ));
        }
    }
    let config = TrainConfig::parse_str(&text)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let group = r.u8()?;
        let frozen = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if r.u8()? != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("tensor {name}: unsupported scalar type")));
        }
        let n = r.len()?;
        if dims.iter().product::<usize>() != n {
            return Err(Error::Checkpoint(format!("tensor {name}: dims {dims:?} do not hold {n} values")));
        }
        let values = r.f64s(n)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => Some((r.u64()?, r.f64s(n)?, r.f64s(n)?)),
            _ => return Err(Error::Checkpoint(format!("tensor {name}: bad optimizer flag"))),
        };
        tensors.push(Tensor {
            name,
            group,
            frozen,
            dims,
            values,
            optimizer,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor table".into()));
    }
    let model = rebuild(&tensors, &config)?;
    Ok(Checkpoint { model, config, digest })
}

pub fn load(path: &Path, expected: Option<&[u8; 32]>, force: bool) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected, force).map_err(|e| Error::load(path, e.to_string()))
}

fn rebuild(tensors: &[Tensor], config: &TrainConfig) -> Result<MmpiModel> {
    let find = |name: &str| -> Result<&Tensor> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let h = &find("meta.head")?.values;
    if h.len() != 5 {
        return Err(Error::Checkpoint("meta.head must hold 5 values".into()));
    }
    let head = HeadConfig {
        feature_dim: as_usize(h[0], "feature_dim")?,
        pe_freqs_x: as_usize(h[1], "pe_freqs_x")?,
        pe_freqs_d: as_usize(h[2], "pe_freqs_d")?,
        hidden_width: as_usize(h[3], "hidden_width")?,
        hidden_layers: as_usize(h[4], "hidden_layers")?,
    };
    let mut mpis = Vec::new();
    let mut shifts = Vec::new();
    let mut i = 0;
    while let Ok(f) = find(&format!("meta.mpi.{i}.frustum")) {
        let layout = &find(&format!("meta.mpi.{i}.layout"))?.values;
        let plane_z = &find(&format!("meta.mpi.{i}.plane_z"))?.values;
        if layout.len() != 3 {
            return Err(Error::Checkpoint(format!("meta.mpi.{i}.layout must hold 3 values")));
        }
        if *plane_z != PlaneStack::uniform_depths(plane_z.len()) {
            return Err(Error::Checkpoint(format!("MPI {i}: plane depths are not uniform in NDC")));
        }
        mpis.push(MpiSpec {
            frustum: frustum_from(&f.values)?,
            res_x: as_usize(layout[0], "res_x")?,
            res_y: as_usize(layout[1], "res_y")?,
            planes: plane_z.len(),
        });
        shifts.push(layout[2]);
        i += 1;
    }
    let (cube, cube_shift) = match find("meta.cube") {
        Err(_) => (None, None),
        Ok(t) => {
            let v = &t.values;
            if v.len() != 11 {
                return Err(Error::Checkpoint("meta.cube must hold 11 values".into()));
            }
            (
                Some(CubeSpec {
                    res: [as_usize(v[0], "cube res")?, as_usize(v[1], "cube res")?, as_usize(v[2], "cube res")?],
                    aabb_min: Vec3::new(v[3], v[4], v[5]),
                    aabb_max: Vec3::new(v[6], v[7], v[8]),
                    step_ratio: v[9],
                }),
                Some(v[10]),
            )
        }
    };
    let spec = ModelSpec {
        mpis,
        cube,
        head,
        alpha_init: config.alpha_init,
        feature_init: 0.0,
    };
    let mut model = MmpiModel::new(&spec, 0)?;
    for (m, s) in model.mpis.iter_mut().zip(shifts) {
        m.density_shift = s;
    }
    if let (Some(c), Some(s)) = (model.cube.as_mut(), cube_shift) {
        c.density_shift = s;
    }
    let learned = tensors.iter().filter(|t| t.group != META_GROUP).count();
    if learned != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {learned} learnable tensors, model expects {}",
            model.store.len()
        )));
    }
    for p in model.store.params_mut() {
        let t = find(&p.name)?;
        if t.dims != p.shape || ParamGroup::from_code(t.group) != Some(p.group) {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?} / group {}, expected {:?} / {}",
                p.name, t.dims, t.group, p.shape, p.group
            )));
        }
        p.values.copy_from_slice(&t.values);
        p.frozen = t.frozen;
        if let Some((steps, m, v)) = &t.optimizer {
            p.steps = *steps;
            p.first_moment.copy_from_slice(m);
            p.second_moment.copy_from_slice(v);
        }
    }
    Ok(model)
}
