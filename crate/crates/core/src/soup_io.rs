//! Reading triangle soups from OBJ/PLY and writing indexed meshes back out.
//!
//! Normals stored in files are ignored; face normals are always recomputed
//! from winding. Polygons are fan-triangulated from their first vertex.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{GeometryError, Mesh, Point3, TriangleSoup, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFileFormat {
    ObjAscii,
    PlyAscii,
    PlyBinaryLe,
}

impl MeshFileFormat {
    pub fn name(self) -> &'static str {
        match self {
            MeshFileFormat::ObjAscii => "obj",
            MeshFileFormat::PlyAscii => "ply-ascii",
            MeshFileFormat::PlyBinaryLe => "ply-binary",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "obj" => Some(Self::ObjAscii),
            "ply-ascii" => Some(Self::PlyAscii),
            "ply" | "ply-binary" => Some(Self::PlyBinaryLe),
            _ => None,
        }
    }
}

/// Where in the input a parse error occurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Offset(usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(l) => write!(f, "line {l}"),
            Location::Offset(o) => write!(f, "byte offset {o}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum SoupIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("parse error at {location}: {message}")]
    Parse { location: Location, message: String },
    #[error("format conflict: {0}")]
    FormatConflict(String),
    #[error("unsupported mesh file extension {0:?}")]
    UnknownExtension(String),
    #[error("no usable triangles: {0}")]
    Geometry(#[from] GeometryError),
}

fn parse_err(location: Location, message: impl Into<String>) -> SoupIoError {
    SoupIoError::Parse {
        location,
        message: message.into(),
    }
}

/// A loaded soup plus the number of degenerate triangles that were dropped.
#[derive(Debug, Clone)]
pub struct LoadedSoup {
    pub soup: TriangleSoup,
    pub dropped_degenerate: usize,
}

/// Detects the format from the extension and checks it against the file's
/// leading bytes. A disagreement is an error, never a guess.
pub fn detect_format(path: &Path, head: &[u8]) -> Result<MeshFileFormat, SoupIoError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let has_ply_magic = head.starts_with(b"ply\n") || head.starts_with(b"ply\r\n");
    match ext.as_str() {
        "obj" => {
            if has_ply_magic {
                return Err(SoupIoError::FormatConflict(format!(
                    "{} has .obj extension but PLY magic",
                    path.display()
                )));
            }
            Ok(MeshFileFormat::ObjAscii)
        }
        "ply" => {
            if !has_ply_magic {
                return Err(SoupIoError::FormatConflict(format!(
                    "{} has .ply extension but no PLY magic",
                    path.display()
                )));
            }
            let header = PlyHeader::parse(head)?;
            Ok(header.format)
        }
        _ => Err(SoupIoError::UnknownExtension(ext)),
    }
}

/// Loads a soup from `path`, verifying that the file really is `fmt`.
pub fn load_soup(path: &Path, fmt: MeshFileFormat) -> Result<LoadedSoup, SoupIoError> {
    let bytes = fs::read(path)?;
    let detected = detect_format(path, &bytes)?;
    if detected != fmt {
        return Err(SoupIoError::FormatConflict(format!(
            "{} requested as {} but file is {}",
            path.display(),
            fmt.name(),
            detected.name()
        )));
    }
    parse_soup(&bytes, fmt)
}

/// Loads a soup, taking the format from the extension and magic bytes.
pub fn load_soup_auto(path: &Path) -> Result<LoadedSoup, SoupIoError> {
    let bytes = fs::read(path)?;
    let fmt = detect_format(path, &bytes)?;
    parse_soup(&bytes, fmt)
}

/// Parses in-memory file contents.
pub fn parse_soup(bytes: &[u8], fmt: MeshFileFormat) -> Result<LoadedSoup, SoupIoError> {
    let (vertices, faces) = match fmt {
        MeshFileFormat::ObjAscii => parse_obj(bytes)?,
        MeshFileFormat::PlyAscii | MeshFileFormat::PlyBinaryLe => {
            let header = PlyHeader::parse(bytes)?;
            if header.format != fmt {
                return Err(SoupIoError::FormatConflict(format!(
                    "expected {} but header says {}",
                    fmt.name(),
                    header.format.name()
                )));
            }
            parse_ply_body(&header, bytes)?
        }
    };
    let (soup, dropped) = TriangleSoup::from_vertex_triples(faces.iter().flat_map(|f| {
        let vertices = &vertices;
        (1..f.len() - 1).map(move |i| {
            [
                vertices[f[0] as usize],
                vertices[f[i] as usize],
                vertices[f[i + 1] as usize],
            ]
        })
    }))?;
    if dropped > 0 {
        log::warn!("dropped {dropped} degenerate triangles");
    }
    Ok(LoadedSoup {
        soup,
        dropped_degenerate: dropped,
    })
}

type Faces = Vec<Vec<u32>>;

fn parse_obj(bytes: &[u8]) -> Result<(Vec<Point3>, Faces), SoupIoError> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        parse_err(Location::Offset(e.valid_up_to()), "file is not valid UTF-8")
    })?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let loc = Location::Line(lineno + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0.0f64; 3];
                for slot in &mut c {
                    let tok = it.next().ok_or_else(|| parse_err(loc, "vertex needs 3 coordinates"))?;
                    *slot = parse_finite(tok, loc)?;
                }
                vertices.push(Vec3::from_array(c));
            }
            Some("f") => {
                let mut face = Vec::new();
                for tok in it {
                    let idx_str = tok.split('/').next().unwrap_or("");
                    let idx: i64 = idx_str
                        .parse()
                        .map_err(|_| parse_err(loc, format!("bad face index {tok:?}")))?;
                    let n = vertices.len() as i64;
                    let resolved = if idx > 0 {
                        idx - 1
                    } else if idx < 0 {
                        n + idx
                    } else {
                        -1
                    };
                    if resolved < 0 || resolved >= n {
                        return Err(parse_err(loc, format!("face index {idx} out of range (have {n} vertices)")));
                    }
                    face.push(resolved as u32);
                }
                if face.len() < 3 {
                    return Err(parse_err(loc, "face needs at least 3 vertices"));
                }
                faces.push(face);
            }
            // vn, vt, vp, usemtl, mtllib, o, g, s, l, blank
            _ => {}
        }
    }
    Ok((vertices, faces))
}

fn parse_finite(tok: &str, loc: Location) -> Result<f64, SoupIoError> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(loc, format!("bad number {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(loc, format!("non-finite coordinate {tok:?}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProperty>,
}

#[derive(Debug, Clone)]
struct PlyHeader {
    format: MeshFileFormat,
    elements: Vec<PlyElement>,
    /// Byte offset of the first body byte.
    body_start: usize,
    /// Line number of the first body line (ASCII).
    body_line: usize,
}

impl PlyHeader {
    fn parse(bytes: &[u8]) -> Result<Self, SoupIoError> {
        let mut pos = 0usize;
        let mut lineno = 0usize;
        let mut format = None;
        let mut elements: Vec<PlyElement> = Vec::new();
        loop {
            let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                return Err(parse_err(Location::Line(lineno + 1), "unterminated PLY header"));
            };
            lineno += 1;
            let loc = Location::Line(lineno);
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| parse_err(loc, "header is not valid UTF-8"))?
                .trim_end_matches('\r');
            pos += nl + 1;
            let mut it = line.split_whitespace();
            let kw = it.next();
            if lineno == 1 {
                if line != "ply" {
                    return Err(parse_err(loc, "missing 'ply' magic"));
                }
                continue;
            }
            match kw {
                Some("format") => {
                    let f = match (it.next(), it.next()) {
                        (Some("ascii"), Some("1.0")) => MeshFileFormat::PlyAscii,
                        (Some("binary_little_endian"), Some("1.0")) => MeshFileFormat::PlyBinaryLe,
                        (f, v) => {
                            return Err(parse_err(loc, format!("unsupported PLY format {f:?} {v:?}")))
                        }
                    };
                    format = Some(f);
                }
                Some("comment") | Some("obj_info") => {}
                Some("element") => {
                    let name = it.next().ok_or_else(|| parse_err(loc, "element without name"))?;
                    let count: usize = it
                        .next()
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| parse_err(loc, "element without valid count"))?;
                    elements.push(PlyElement {
                        name: name.to_string(),
                        count,
                        props: Vec::new(),
                    });
                }
                Some("property") => {
                    let el = elements
                        .last_mut()
                        .ok_or_else(|| parse_err(loc, "property before any element"))?;
                    let toks: Vec<&str> = it.collect();
                    let prop = match toks.as_slice() {
                        ["list", c, i, name] => {
                            let count = Scalar::parse(c)
                                .filter(|s| s.is_integer())
                                .ok_or_else(|| parse_err(loc, format!("bad list count type {c:?}")))?;
                            let item = Scalar::parse(i)
                                .ok_or_else(|| parse_err(loc, format!("bad list item type {i:?}")))?;
                            PlyProperty::List {
                                name: name.to_string(),
                                count,
                                item,
                            }
                        }
                        [t, name] => PlyProperty::Scalar {
                            name: name.to_string(),
                            ty: Scalar::parse(t).ok_or_else(|| parse_err(loc, format!("bad property type {t:?}")))?,
                        },
                        _ => return Err(parse_err(loc, "malformed property line")),
                    };
                    el.props.push(prop);
                }
                Some("end_header") => break,
                Some(other) => return Err(parse_err(loc, format!("unknown header keyword {other:?}"))),
                None => return Err(parse_err(loc, "blank header line")),
            }
        }
        let format = format.ok_or_else(|| parse_err(Location::Line(2), "missing format line"))?;
        Ok(Self {
            format,
            elements,
            body_start: pos,
            body_line: lineno + 1,
        })
    }
}

/// Value source for the PLY body, either whitespace tokens or LE bytes.
trait PlyReader {
    fn begin_record(&mut self) -> Result<(), SoupIoError>;
    fn read(&mut self, ty: Scalar) -> Result<f64, SoupIoError>;
    fn end_record(&mut self) -> Result<(), SoupIoError>;
    fn location(&self) -> Location;
}

struct AsciiReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    current: Vec<&'a str>,
    cursor: usize,
    line: usize,
    first_line: usize,
}

impl<'a> AsciiReader<'a> {
    fn next_line(&mut self) -> Result<(), SoupIoError> {
        loop {
            let (i, l) = self
                .lines
                .next()
                .ok_or_else(|| parse_err(Location::Line(self.line + 1), "unexpected end of file"))?;
            self.line = self.first_line + i;
            let toks: Vec<&str> = l.split_whitespace().collect();
            if !toks.is_empty() {
                self.current = toks;
                self.cursor = 0;
                return Ok(());
            }
        }
    }
}

impl PlyReader for AsciiReader<'_> {
    fn begin_record(&mut self) -> Result<(), SoupIoError> {
        self.next_line()
    }

    fn read(&mut self, ty: Scalar) -> Result<f64, SoupIoError> {
        let loc = Location::Line(self.line);
        let tok = self
            .current
            .get(self.cursor)
            .ok_or_else(|| parse_err(loc, "too few values on line"))?;
        self.cursor += 1;
        if ty.is_integer() {
            tok.parse::<i64>()
                .map(|v| v as f64)
                .map_err(|_| parse_err(loc, format!("bad integer {tok:?}")))
        } else {
            parse_finite(tok, loc)
        }
    }

    fn end_record(&mut self) -> Result<(), SoupIoError> {
        if self.cursor != self.current.len() {
            return Err(parse_err(Location::Line(self.line), "trailing values on line"));
        }
        self.current.clear();
        self.cursor = 0;
        Ok(())
    }

    fn location(&self) -> Location {
        Location::Line(self.line)
    }
}

struct BinaryReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PlyReader for BinaryReader<'_> {
    fn begin_record(&mut self) -> Result<(), SoupIoError> {
        Ok(())
    }

    fn read(&mut self, ty: Scalar) -> Result<f64, SoupIoError> {
        let n = ty.size();
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(parse_err(Location::Offset(self.pos), "unexpected end of file"));
        };
        let v = ty.read_le(&self.bytes[self.pos..end]);
        if !v.is_finite() {
            return Err(parse_err(Location::Offset(self.pos), "non-finite value"));
        }
        self.pos = end;
        Ok(v)
    }

    fn end_record(&mut self) -> Result<(), SoupIoError> {
        Ok(())
    }

    fn location(&self) -> Location {
        Location::Offset(self.pos)
    }
}

fn parse_ply_body(header: &PlyHeader, bytes: &[u8]) -> Result<(Vec<Point3>, Faces), SoupIoError> {
    let body = &bytes[header.body_start..];
    match header.format {
        MeshFileFormat::PlyAscii => {
            let text = std::str::from_utf8(body)
                .map_err(|e| parse_err(Location::Offset(header.body_start + e.valid_up_to()), "body is not valid UTF-8"))?;
            let mut r = AsciiReader {
                lines: text.lines().enumerate(),
                current: Vec::new(),
                cursor: 0,
                line: header.body_line - 1,
                first_line: header.body_line,
            };
            read_elements(header, &mut r)
        }
        _ => {
            let mut r = BinaryReader {
                bytes,
                pos: header.body_start,
            };
            read_elements(header, &mut r)
        }
    }
}

fn read_elements(header: &PlyHeader, r: &mut impl PlyReader) -> Result<(Vec<Point3>, Faces), SoupIoError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut seen_vertex = false;
    for el in &header.elements {
        match el.name.as_str() {
            "vertex" => {
                let slot = |n: &str| {
                    el.props.iter().position(|p| matches!(p, PlyProperty::Scalar { name, .. } if name == n))
                };
                let (Some(ix), Some(iy), Some(iz)) = (slot("x"), slot("y"), slot("z")) else {
                    return Err(parse_err(r.location(), "vertex element lacks x/y/z"));
                };
                for _ in 0..el.count {
                    r.begin_record()?;
                    let mut c = [0.0; 3];
                    for (k, p) in el.props.iter().enumerate() {
                        let v = read_property(p, r)?;
                        if k == ix {
                            c[0] = v[0];
                        } else if k == iy {
                            c[1] = v[0];
                        } else if k == iz {
                            c[2] = v[0];
                        }
                    }
                    r.end_record()?;
                    vertices.push(Vec3::from_array(c));
                }
                seen_vertex = true;
            }
            "face" => {
                let idx_prop = el.props.iter().position(|p| {
                    matches!(p, PlyProperty::List { name, .. } if name == "vertex_indices" || name == "vertex_index")
                });
                let Some(idx_prop) = idx_prop else {
                    return Err(parse_err(r.location(), "face element lacks vertex_indices"));
                };
                if !seen_vertex {
                    return Err(parse_err(r.location(), "face element precedes vertex element"));
                }
                for _ in 0..el.count {
                    r.begin_record()?;
                    let loc = r.location();
                    let mut face = Vec::new();
                    for (k, p) in el.props.iter().enumerate() {
                        let v = read_property(p, r)?;
                        if k == idx_prop {
                            face = v
                                .iter()
                                .map(|&i| {
                                    if i < 0.0 || i >= vertices.len() as f64 {
                                        Err(parse_err(loc, format!("face index {i} out of range (have {} vertices)", vertices.len())))
                                    } else {
                                        Ok(i as u32)
                                    }
                                })
                                .collect::<Result<_, _>>()?;
                        }
                    }
                    r.end_record()?;
                    if face.len() < 3 {
                        return Err(parse_err(loc, "face needs at least 3 vertices"));
                    }
                    faces.push(face);
                }
            }
            _ => {
                for _ in 0..el.count {
                    r.begin_record()?;
                    for p in &el.props {
                        read_property(p, r)?;
                    }
                    r.end_record()?;
                }
            }
        }
    }
    Ok((vertices, faces))
}

fn read_property(p: &PlyProperty, r: &mut impl PlyReader) -> Result<Vec<f64>, SoupIoError> {
    match p {
        PlyProperty::Scalar { ty, .. } => Ok(vec![r.read(*ty)?]),
        PlyProperty::List { count, item, .. } => {
            let loc = r.location();
            let n = r.read(*count)?;
            if !(0.0..=1024.0).contains(&n) {
                return Err(parse_err(loc, format!("unreasonable list length {n}")));
            }
            (0..n as usize).map(|_| r.read(*item)).collect()
        }
    }
}

/// Formats like C's `%.9g`: enough digits to round-trip any `f32`.
pub fn format_sig9(v: f32) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.8e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{exp}")
    }
}

/// Writes `mesh` to `path`. Binary PLY stores float32 vertices and int32
/// face indices, little-endian.
pub fn save_mesh(mesh: &Mesh, path: &Path, fmt: MeshFileFormat) -> Result<(), SoupIoError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_mesh(mesh, &mut w, fmt)?;
    w.flush()?;
    Ok(())
}

pub fn write_mesh(mesh: &Mesh, w: &mut impl Write, fmt: MeshFileFormat) -> io::Result<()> {
    match fmt {
        MeshFileFormat::ObjAscii => {
            for v in &mesh.vertices {
                writeln!(
                    w,
                    "v {} {} {}",
                    format_sig9(v.x as f32),
                    format_sig9(v.y as f32),
                    format_sig9(v.z as f32)
                )?;
            }
            for t in &mesh.triangles {
                writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
            }
        }
        MeshFileFormat::PlyAscii | MeshFileFormat::PlyBinaryLe => {
            let fmt_name = if fmt == MeshFileFormat::PlyAscii {
                "ascii"
            } else {
                "binary_little_endian"
            };
            write!(
                w,
                "ply\nformat {fmt_name} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
                 element face {}\nproperty list uchar int vertex_indices\nend_header\n",
                mesh.vertices.len(),
                mesh.triangles.len()
            )?;
            if fmt == MeshFileFormat::PlyAscii {
                for v in &mesh.vertices {
                    writeln!(
                        w,
                        "{} {} {}",
                        format_sig9(v.x as f32),
                        format_sig9(v.y as f32),
                        format_sig9(v.z as f32)
                    )?;
                }
                for t in &mesh.triangles {
                    writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
                }
            } else {
                for v in &mesh.vertices {
                    for c in [v.x, v.y, v.z] {
                        w.write_all(&(c as f32).to_le_bytes())?;
                    }
                }
                for t in &mesh.triangles {
                    w.write_all(&[3u8])?;
                    for &i in t {
                        w.write_all(&(i as i32).to_le_bytes())?;
                    }
                }
            }
        }
    }
    Ok(())
}
