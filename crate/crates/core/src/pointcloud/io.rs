use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::Point3;

use super::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    PlyBinaryLe,
    XyzText,
}

impl CloudFormat {
    /// Guesses the format from the extension and, for `.ply`, the header.
    pub fn detect(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("ply") => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                let head = String::from_utf8_lossy(&bytes[..bytes.len().min(512)]);
                if head.contains("format binary_little_endian") {
                    Ok(CloudFormat::PlyBinaryLe)
                } else if head.contains("format ascii") {
                    Ok(CloudFormat::PlyAscii)
                } else {
                    Err(Error::parse(
                        path.display().to_string(),
                        "unsupported PLY format (ascii or binary_little_endian only)",
                    ))
                }
            }
            _ => Ok(CloudFormat::XyzText),
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ply-ascii" => Ok(CloudFormat::PlyAscii),
            "ply-binary-le" | "ply" => Ok(CloudFormat::PlyBinaryLe),
            "xyz-text" | "xyz" => Ok(CloudFormat::XyzText),
            other => Err(Error::Config(format!("unknown cloud format {other:?}"))),
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let points = match format {
        CloudFormat::XyzText => parse_xyz(&bytes)?,
        CloudFormat::PlyAscii | CloudFormat::PlyBinaryLe => parse_ply(&bytes, format)?,
    };
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    let mut cloud = PointCloud::new(points)?;
    cloud.id = id;
    Ok(cloud)
}

/// Writes `cloud`. PLY output stores float32 `x y z`; text output uses the
/// shortest representation that round-trips the f64 value.
pub fn save_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        match format {
            CloudFormat::XyzText => {
                for p in cloud.points() {
                    writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
                }
            }
            CloudFormat::PlyAscii | CloudFormat::PlyBinaryLe => {
                let fmt = if format == CloudFormat::PlyAscii {
                    "ascii"
                } else {
                    "binary_little_endian"
                };
                write!(
                    w,
                    "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
                    cloud.len()
                )?;
                for p in cloud.points() {
                    let v = [p.x as f32, p.y as f32, p.z as f32];
                    if format == CloudFormat::PlyAscii {
                        writeln!(w, "{} {} {}", v[0], v[1], v[2])?;
                    } else {
                        for c in v {
                            w.write_all(&c.to_le_bytes())?;
                        }
                    }
                }
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

fn parse_xyz(bytes: &[u8]) -> Result<Vec<Point3<f64>>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::parse("xyz", e.to_string()))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        points.push(parse_coords(line.split_whitespace(), lineno + 1)?);
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(points)
}

fn parse_coords<'a>(mut fields: impl Iterator<Item = &'a str>, line: usize) -> Result<Point3<f64>> {
    let mut xyz = [0.0; 3];
    for (d, v) in xyz.iter_mut().enumerate() {
        let field = fields
            .next()
            .ok_or_else(|| Error::parse(format!("line {line}"), format!("expected 3 coordinates, got {d}")))?;
        *v = field
            .parse()
            .map_err(|_| Error::parse(format!("line {line}"), format!("invalid number {field:?}")))?;
    }
    Ok(Point3::from(xyz))
}

#[derive(Debug, Clone, Copy)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct PlyHeader {
    vertex_count: usize,
    /// Vertex properties in file order.
    properties: Vec<(String, Scalar)>,
    /// Byte offset of the body.
    body_start: usize,
}

fn parse_ply_header(bytes: &[u8]) -> Result<PlyHeader> {
    let end = find_subslice(bytes, b"end_header")
        .ok_or_else(|| Error::parse("header", "missing end_header"))?;
    let mut body_start = end + b"end_header".len();
    if bytes.get(body_start) == Some(&b'\r') {
        body_start += 1;
    }
    if bytes.get(body_start) == Some(&b'\n') {
        body_start += 1;
    }
    let header = std::str::from_utf8(&bytes[..end]).map_err(|e| Error::parse("header", e.to_string()))?;
    let mut lines = header.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse("line 1", "missing 'ply' magic")),
    }

    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    for (i, line) in lines {
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::parse(format!("line {lineno}"), "invalid element count"))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count);
                } else if vertex_count.is_none() && count > 0 {
                    return Err(Error::parse(
                        format!("line {lineno}"),
                        "vertex element must come first",
                    ));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::parse(
                    format!("line {lineno}"),
                    "list properties on vertices are not supported",
                ))
            }
            ["property", ty, name] if in_vertex => {
                let scalar = Scalar::parse(ty).ok_or_else(|| {
                    Error::parse(format!("line {lineno}"), format!("unknown property type {ty:?}"))
                })?;
                properties.push((name.to_string(), scalar));
            }
            _ => {}
        }
    }
    let vertex_count = vertex_count.ok_or_else(|| Error::parse("header", "no vertex element"))?;
    for axis in ["x", "y", "z"] {
        if !properties.iter().any(|(n, _)| n == axis) {
            return Err(Error::parse("header", format!("missing vertex property {axis}")));
        }
    }
    Ok(PlyHeader {
        vertex_count,
        properties,
        body_start,
    })
}

fn parse_ply(bytes: &[u8], format: CloudFormat) -> Result<Vec<Point3<f64>>> {
    let header = parse_ply_header(bytes)?;
    if header.vertex_count == 0 {
        return Err(Error::EmptyCloud);
    }
    let axis_index = |axis: &str| header.properties.iter().position(|(n, _)| n == axis).unwrap();
    let idx = [axis_index("x"), axis_index("y"), axis_index("z")];
    let body = &bytes[header.body_start..];
    let mut points = Vec::with_capacity(header.vertex_count);

    match format {
        CloudFormat::PlyAscii => {
            let text = std::str::from_utf8(body).map_err(|e| Error::parse("body", e.to_string()))?;
            let header_lines = bytes[..header.body_start].iter().filter(|&&b| b == b'\n').count();
            let mut records = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty());
            for v in 0..header.vertex_count {
                let (i, line) = records.next().ok_or_else(|| {
                    Error::parse(
                        format!("vertex {v}"),
                        format!("header declares {} vertices, found {v}", header.vertex_count),
                    )
                })?;
                let lineno = header_lines + i + 1;
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() < header.properties.len() {
                    return Err(Error::parse(
                        format!("line {lineno}"),
                        format!("expected {} values, got {}", header.properties.len(), fields.len()),
                    ));
                }
                points.push(parse_coords(idx.iter().map(|&k| fields[k]), lineno)?);
            }
        }
        CloudFormat::PlyBinaryLe => {
            let offsets: Vec<usize> = header
                .properties
                .iter()
                .scan(0, |acc, (_, s)| {
                    let o = *acc;
                    *acc += s.size();
                    Some(o)
                })
                .collect();
            let stride: usize = header.properties.iter().map(|(_, s)| s.size()).sum();
            let needed = stride * header.vertex_count;
            if body.len() < needed {
                return Err(Error::parse(
                    format!("byte offset {}", header.body_start + body.len()),
                    format!(
                        "header declares {} vertices ({needed} bytes), body has {} bytes",
                        header.vertex_count,
                        body.len()
                    ),
                ));
            }
            for rec in body[..needed].chunks_exact(stride) {
                let mut xyz = [0.0; 3];
                for (d, &k) in idx.iter().enumerate() {
                    xyz[d] = header.properties[k].1.read_le(&rec[offsets[k]..]);
                }
                points.push(Point3::from(xyz));
            }
        }
        CloudFormat::XyzText => unreachable!(),
    }
    Ok(points)
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}
