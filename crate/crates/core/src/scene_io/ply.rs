//! Binary little-endian splat PLY reading and writing.
//!
//! Only the properties the pipeline consumes are decoded. Every other vertex
//! property (normals, `f_rest_*`, custom attributes) is kept as an opaque
//! per-element byte payload so a load/save cycle reproduces it untouched.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Properties the pipeline reads, in the canonical write order used for
/// scenes created in memory.
const REQUIRED: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

// Slots into the REQUIRED table.
const SLOT_POS: usize = 0;
const SLOT_DC: usize = 3;
const SLOT_OPACITY: usize = 6;
const SLOT_SCALE: usize = 7;
const SLOT_ROT: usize = 10;

/// Quaternions whose norm is this close to one are taken as already normalized,
/// which keeps repeated load/save cycles bit-stable.
const QUAT_NORM_SLACK: f64 = 1e-6;

/// A single 3D Gaussian in splat-PLY conventions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f32; 3],
    /// Natural-log scales along the local axes.
    pub log_scale: [f32; 3],
    /// Unit quaternion (w, x, y, z).
    pub rotation: [f32; 4],
    /// Pre-sigmoid opacity.
    pub opacity_logit: f32,
    /// Zeroth-order spherical-harmonic color coefficients.
    pub color_dc: [f32; 3],
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit as f64)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(|s| (s as f64).exp())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            ScalarType::I8 => "char",
            ScalarType::U8 => "uchar",
            ScalarType::I16 => "short",
            ScalarType::U16 => "ushort",
            ScalarType::I32 => "int",
            ScalarType::U32 => "uint",
            ScalarType::F32 => "float",
            ScalarType::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlyProperty {
    pub name: String,
    pub ty: ScalarType,
}

/// Where a property lives once decoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Required(usize),
    /// Byte offset inside the opaque per-element payload.
    Extra(usize),
}

/// Vertex property layout in file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlyLayout {
    properties: Vec<PlyProperty>,
    slots: Vec<Slot>,
    extra_stride: usize,
}

impl Default for PlyLayout {
    fn default() -> Self {
        let properties = REQUIRED
            .iter()
            .map(|name| PlyProperty {
                name: (*name).to_string(),
                ty: ScalarType::F32,
            })
            .collect();
        Self::from_properties(properties).expect("canonical layout is valid")
    }
}

impl PlyLayout {
    fn from_properties(properties: Vec<PlyProperty>) -> Result<Self> {
        let mut slots = Vec::with_capacity(properties.len());
        let mut extra_stride = 0;
        let mut seen = [false; REQUIRED.len()];
        for prop in &properties {
            match REQUIRED.iter().position(|r| *r == prop.name) {
                Some(i) => {
                    if seen[i] {
                        return Err(Error::Format(format!("duplicate property '{}'", prop.name)));
                    }
                    if !matches!(prop.ty, ScalarType::F32 | ScalarType::F64) {
                        return Err(Error::Format(format!(
                            "property '{}' must be float or double, found {}",
                            prop.name,
                            prop.ty.name()
                        )));
                    }
                    seen[i] = true;
                    slots.push(Slot::Required(i));
                }
                None => {
                    slots.push(Slot::Extra(extra_stride));
                    extra_stride += prop.ty.size();
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "missing required vertex property '{}'",
                REQUIRED[i]
            )));
        }
        Ok(Self {
            properties,
            slots,
            extra_stride,
        })
    }

    pub fn properties(&self) -> &[PlyProperty] {
        &self.properties
    }

    fn record_size(&self) -> usize {
        self.properties.iter().map(|p| p.ty.size()).sum()
    }
}

/// An ordered collection of Gaussians plus the opaque payload needed to
/// re-emit the file they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    gaussians: Vec<Gaussian>,
    layout: PlyLayout,
    extra: Vec<u8>,
}

impl GaussianScene {
    /// A scene with the canonical property layout and no extra payload.
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self {
            gaussians,
            layout: PlyLayout::default(),
            extra: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    /// Mutable access for edits. The element count cannot change, which
    /// keeps the opaque payload aligned.
    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    pub fn layout(&self) -> &PlyLayout {
        &self.layout
    }

    /// Raw bytes of the non-pipeline properties of element `index`.
    pub fn extra_payload(&self, index: usize) -> &[u8] {
        let stride = self.layout.extra_stride;
        &self.extra[index * stride..(index + 1) * stride]
    }

    /// Check every Gaussian against the loader invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            validate_gaussian(i, g)?;
        }
        Ok(())
    }
}

fn validate_gaussian(index: usize, g: &Gaussian) -> Result<()> {
    let finite = g.position.iter().all(|v| v.is_finite())
        && g.log_scale.iter().all(|v| v.is_finite())
        && g.rotation.iter().all(|v| v.is_finite())
        && g.opacity_logit.is_finite()
        && g.color_dc.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::Data(format!("non-finite value in Gaussian {index}")));
    }
    if g.scale().iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Data(format!(
            "Gaussian {index} has a scale whose exponential is not strictly positive and finite"
        )));
    }
    let norm = quat_norm(&g.rotation);
    if (norm - 1.0).abs() > 1e-4 {
        return Err(Error::Data(format!(
            "Gaussian {index} has a non-unit quaternion (norm {norm})"
        )));
    }
    Ok(())
}

fn quat_norm(q: &[f32; 4]) -> f64 {
    q.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

fn normalize_quat(index: usize, q: [f32; 4]) -> Result<[f32; 4]> {
    let norm = quat_norm(&q);
    if !(norm > 0.0) {
        return Err(Error::Data(format!("Gaussian {index} has a zero quaternion")));
    }
    if (norm - 1.0).abs() <= QUAT_NORM_SLACK {
        return Ok(q);
    }
    Ok(q.map(|v| ((v as f64) / norm) as f32))
}

struct Header {
    layout: PlyLayout,
    count: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("PLY header has no end_header".into()))?;
    let mut data_start = end + END.len();
    // The header terminator is followed by a single newline (optionally CRLF).
    if bytes.get(data_start) == Some(&b'\r') {
        data_start += 1;
    }
    if bytes.get(data_start) != Some(&b'\n') {
        return Err(Error::Format("end_header must be followed by a newline".into()));
    }
    data_start += 1;

    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("PLY header is not valid UTF-8".into()))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(Error::Format("missing 'ply' magic line".into()));
    }

    let mut format_ok = false;
    let mut count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                let kind = tok.next().unwrap_or_default();
                if kind != "binary_little_endian" {
                    return Err(Error::Format(format!(
                        "unsupported PLY format '{kind}', expected binary_little_endian"
                    )));
                }
                format_ok = true;
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = tok.next().unwrap_or_default();
                if name != "vertex" || count.is_some() {
                    return Err(Error::Format(format!(
                        "unsupported element '{name}': only a single vertex element is allowed"
                    )));
                }
                let n = tok
                    .next()
                    .and_then(|v| v.parse::<usize>().ok())
                    .ok_or_else(|| Error::Format("vertex element has no valid count".into()))?;
                count = Some(n);
                in_vertex = true;
            }
            Some("property") => {
                if !in_vertex {
                    return Err(Error::Format("property declared outside an element".into()));
                }
                let ty_name = tok.next().unwrap_or_default();
                if ty_name == "list" {
                    return Err(Error::Format("list properties are not supported".into()));
                }
                let ty = ScalarType::parse(ty_name)
                    .ok_or_else(|| Error::Format(format!("unknown property type '{ty_name}'")))?;
                let name = tok
                    .next()
                    .ok_or_else(|| Error::Format("property without a name".into()))?;
                properties.push(PlyProperty {
                    name: name.to_string(),
                    ty,
                });
            }
            Some(other) => {
                return Err(Error::Format(format!("unexpected header keyword '{other}'")));
            }
            None => {}
        }
    }
    if !format_ok {
        return Err(Error::Format("PLY header has no format line".into()));
    }
    let count = count.ok_or_else(|| Error::Format("PLY header has no vertex element".into()))?;
    Ok(Header {
        layout: PlyLayout::from_properties(properties)?,
        count,
        data_start,
    })
}

fn read_f64(ty: ScalarType, b: &[u8]) -> f64 {
    match ty {
        ScalarType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
        ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        // Required properties are float-typed; other types never reach here.
        _ => unreachable!("required property with integer type"),
    }
}

/// Decode a splat PLY held in memory.
pub fn parse_scene(bytes: &[u8]) -> Result<GaussianScene> {
    let header = parse_header(bytes)?;
    let layout = header.layout;
    let record = layout.record_size();
    let expected = (header.count as u64) * (record as u64);
    let payload = &bytes[header.data_start..];
    if (payload.len() as u64) < expected {
        return Err(Error::Length {
            expected,
            found: payload.len() as u64,
        });
    }

    let mut gaussians = Vec::with_capacity(header.count);
    let mut extra = Vec::with_capacity(header.count * layout.extra_stride);
    let mut values = [0f32; REQUIRED.len()];
    for i in 0..header.count {
        let rec = &payload[i * record..(i + 1) * record];
        let mut at = 0;
        for (prop, slot) in layout.properties.iter().zip(&layout.slots) {
            let size = prop.ty.size();
            let raw = &rec[at..at + size];
            match *slot {
                Slot::Required(r) => {
                    let v = read_f64(prop.ty, raw);
                    if !v.is_finite() {
                        return Err(Error::Data(format!(
                            "non-finite value in property '{}' of element {i}",
                            prop.name
                        )));
                    }
                    values[r] = v as f32;
                }
                Slot::Extra(_) => extra.extend_from_slice(raw),
            }
            at += size;
        }
        let rotation = normalize_quat(
            i,
            [
                values[SLOT_ROT],
                values[SLOT_ROT + 1],
                values[SLOT_ROT + 2],
                values[SLOT_ROT + 3],
            ],
        )?;
        let g = Gaussian {
            position: [values[SLOT_POS], values[SLOT_POS + 1], values[SLOT_POS + 2]],
            log_scale: [
                values[SLOT_SCALE],
                values[SLOT_SCALE + 1],
                values[SLOT_SCALE + 2],
            ],
            rotation,
            opacity_logit: values[SLOT_OPACITY],
            color_dc: [values[SLOT_DC], values[SLOT_DC + 1], values[SLOT_DC + 2]],
        };
        validate_gaussian(i, &g)?;
        gaussians.push(g);
    }

    Ok(GaussianScene {
        gaussians,
        layout,
        extra,
    })
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&bytes)
}

/// Encode a scene as binary little-endian PLY.
pub fn encode_scene(scene: &GaussianScene) -> Vec<u8> {
    let layout = &scene.layout;
    let mut out = Vec::with_capacity(256 + scene.len() * layout.record_size());
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", scene.len()).as_bytes());
    for p in &layout.properties {
        // Pipeline properties are always written as float.
        let ty = match layout.slot_of(&p.name) {
            Some(Slot::Required(_)) => ScalarType::F32,
            _ => p.ty,
        };
        out.extend_from_slice(format!("property {} {}\n", ty.name(), p.name).as_bytes());
    }
    out.extend_from_slice(b"end_header\n");

    for (i, g) in scene.gaussians.iter().enumerate() {
        let extra = scene.extra_payload(i);
        for (prop, slot) in layout.properties.iter().zip(&layout.slots) {
            match *slot {
                Slot::Required(r) => {
                    let v = match r {
                        0..=2 => g.position[r - SLOT_POS],
                        3..=5 => g.color_dc[r - SLOT_DC],
                        SLOT_OPACITY => g.opacity_logit,
                        7..=9 => g.log_scale[r - SLOT_SCALE],
                        _ => g.rotation[r - SLOT_ROT],
                    };
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Slot::Extra(offset) => {
                    out.extend_from_slice(&extra[offset..offset + prop.ty.size()]);
                }
            }
        }
    }
    out
}

impl PlyLayout {
    fn slot_of(&self, name: &str) -> Option<Slot> {
        self.properties
            .iter()
            .position(|p| p.name == name)
            .map(|i| self.slots[i])
    }
}

pub fn save_scene(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_scene(scene))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
