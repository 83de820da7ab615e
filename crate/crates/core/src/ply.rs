//! Binary little-endian splat PLY reader and writer.
//!
//! The layout is the one produced by the common 3DGS training code: position
//! `x,y,z`, log-scales `scale_0..2`, quaternion `rot_0..3` (w first), the
//! pre-sigmoid `opacity` logit and degree-0 SH color `f_dc_0..2`. Any
//! higher-order SH coefficients are dropped on import.

use std::path::Path;

use thiserror::Error;

use crate::splat::{Gaussian, SplatModel, Vec3};

/// Degree-0 spherical harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_77;

/// Opacities are clamped into `(EPS, 1 - EPS)` before taking the logit.
pub const OPACITY_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("malformed header: {0}")]
    Header(String),
    #[error("missing required vertex property `{0}`")]
    MissingField(&'static str),
    #[error("vertex {index}: field `{field}` is not finite")]
    NonFinite { field: String, index: usize },
    #[error("vertex {index}: field `{field}`: {reason}")]
    Invalid {
        field: String,
        index: usize,
        reason: String,
    },
    #[error("unexpected end of data in vertex {index}")]
    Truncated { index: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
    "f_dc_0", "f_dc_1", "f_dc_2",
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
    has_list: bool,
}

impl Element {
    fn stride(&self) -> usize {
        self.props.iter().map(|(_, t)| t.size()).sum()
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<Element>, usize), PlyError> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| PlyError::Header("no end_header line".into()))?;
    let mut body = end + END.len();
    match bytes.get(body) {
        Some(b'\n') => body += 1,
        Some(b'\r') if bytes.get(body + 1) == Some(&b'\n') => body += 2,
        _ => {
            return Err(PlyError::Header(
                "end_header not followed by a newline".into(),
            ))
        }
    }
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| PlyError::Header("header is not valid UTF-8".into()))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(PlyError::Header("missing `ply` magic".into()));
    }
    let mut format_seen = false;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(PlyError::Header(format!("unsupported format `{fmt}`")));
                }
                format_seen = true;
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| PlyError::Header(format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Header("property before element".into()))?;
                el.has_list = true;
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Header("property before element".into()))?;
                let t = Scalar::parse(ty)
                    .ok_or_else(|| PlyError::Header(format!("unknown property type `{ty}`")))?;
                el.props.push((name.to_string(), t));
            }
            _ => {
                return Err(PlyError::Header(format!(
                    "unrecognized header line `{line}`"
                )))
            }
        }
    }
    if !format_seen {
        return Err(PlyError::Header("missing format line".into()));
    }
    Ok((elements, body))
}

pub fn import_ply(bytes: &[u8]) -> Result<SplatModel, PlyError> {
    let (elements, mut offset) = parse_header(bytes)?;
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| PlyError::Header("no vertex element".into()))?;
    for e in &elements[..vi] {
        if e.has_list {
            return Err(PlyError::Header(format!(
                "list properties in element `{}` preceding vertices are not supported",
                e.name
            )));
        }
        offset += e.stride() * e.count;
    }
    let vertex = &elements[vi];
    if vertex.has_list {
        return Err(PlyError::Header("list properties in vertex element".into()));
    }

    // byte offset and type of every required field within a vertex record
    let mut layout = [(0usize, Scalar::F32); REQUIRED.len()];
    for (slot, name) in layout.iter_mut().zip(REQUIRED) {
        let mut at = 0;
        let mut found = None;
        for (pname, t) in &vertex.props {
            if pname == name {
                found = Some((at, *t));
                break;
            }
            at += t.size();
        }
        *slot = found.ok_or(PlyError::MissingField(name))?;
    }
    let dropped = vertex
        .props
        .iter()
        .filter(|(n, _)| n.starts_with("f_rest_"))
        .count();
    if dropped > 0 {
        log::warn!("dropping {dropped} higher-order SH coefficients per vertex");
    }

    let stride = vertex.stride();
    let mut gaussians = Vec::with_capacity(vertex.count);
    for index in 0..vertex.count {
        let start = offset + index * stride;
        let rec = bytes
            .get(start..start + stride)
            .ok_or(PlyError::Truncated { index })?;
        let mut v = [0.0f64; REQUIRED.len()];
        for (k, (at, t)) in layout.iter().enumerate() {
            v[k] = t.read(&rec[*at..]);
            if !v[k].is_finite() {
                return Err(PlyError::NonFinite {
                    field: REQUIRED[k].to_string(),
                    index,
                });
            }
        }
        let rotation = Gaussian::rotation_from_wxyz(v[6], v[7], v[8], v[9]).ok_or_else(|| {
            PlyError::Invalid {
                field: "rot_0".into(),
                index,
                reason: "zero-norm quaternion".into(),
            }
        })?;
        let scale = Vec3::new(v[3].exp(), v[4].exp(), v[5].exp());
        if let Some(k) = scale.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(PlyError::Invalid {
                field: REQUIRED[3 + k].into(),
                index,
                reason: "scale underflows to zero or overflows".into(),
            });
        }
        gaussians.push(Gaussian {
            position: Vec3::new(v[0], v[1], v[2]),
            scale,
            rotation,
            color: Vec3::new(v[11], v[12], v[13]).map(|c| (c * SH_C0 + 0.5).clamp(0.0, 1.0)),
            opacity: sigmoid(v[10]),
            trained: true,
        });
    }
    Ok(SplatModel::new(gaussians))
}

const EXPORT_FIELDS: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
    "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

pub fn export_ply(model: &SplatModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(512 + model.len() * EXPORT_FIELDS.len() * 4);
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", model.len()).as_bytes());
    for f in EXPORT_FIELDS {
        out.extend_from_slice(format!("property float {f}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for g in &model.gaussians {
        let q = g.rotation.quaternion();
        let c = g.color.map(|c| (c - 0.5) / SH_C0);
        let vals = [
            g.position.x,
            g.position.y,
            g.position.z,
            0.0,
            0.0,
            0.0,
            c.x,
            c.y,
            c.z,
            logit(g.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS)),
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            q.w,
            q.i,
            q.j,
            q.k,
        ];
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<SplatModel, PlyError> {
    import_ply(&std::fs::read(path)?)
}

pub fn write_ply(path: impl AsRef<Path>, model: &SplatModel) -> Result<(), PlyError> {
    std::fs::write(path, export_ply(model))?;
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
