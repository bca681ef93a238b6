//! Minimal PLY 1.0 support: ascii and binary little-endian, vertex data read
//! into named `f64` columns. Non-vertex elements are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PLY header at line {line}: `{content}` ({reason})")]
    Header {
        line: usize,
        content: String,
        reason: &'static str,
    },
    #[error("PLY schema error: {0}")]
    Schema(String),
    #[error("PLY data error: {0}")]
    Data(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    pub fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn encode_le(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::I8 => out.push(v as i8 as u8),
            Self::U8 => out.push(v as u8),
            Self::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Self::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            Self::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            Self::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            Self::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Self::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    fn format_ascii(self, v: f64) -> String {
        match self {
            Self::F32 => format!("{}", v as f32),
            Self::F64 => format!("{v}"),
            _ => format!("{}", v as i64),
        }
    }
}

#[derive(Debug, Clone)]
enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone)]
struct ElementDef {
    name: String,
    count: usize,
    properties: Vec<(String, PropertyKind)>,
}

/// Vertex table read from a PLY file.
#[derive(Debug, Clone)]
pub struct VertexTable {
    pub encoding: PlyEncoding,
    pub comments: Vec<String>,
    pub properties: Vec<(String, ScalarType)>,
    pub columns: Vec<Vec<f64>>,
    pub len: usize,
}

impl VertexTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.properties
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    pub fn has(&self, name: &str) -> bool {
        self.properties.iter().any(|(n, _)| n == name)
    }

    pub fn property_type(&self, name: &str) -> Option<ScalarType> {
        self.properties
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| *t)
    }

    /// Looks up several required columns at once.
    pub fn require<'a>(&'a self, names: &[&str]) -> Result<Vec<&'a [f64]>, PlyError> {
        names
            .iter()
            .map(|n| {
                self.column(n)
                    .ok_or_else(|| PlyError::Schema(format!("missing vertex property `{n}`")))
            })
            .collect()
    }
}

struct Header {
    encoding: PlyEncoding,
    comments: Vec<String>,
    elements: Vec<ElementDef>,
}

fn header_err(line: usize, content: &str, reason: &'static str) -> PlyError {
    PlyError::Header {
        line,
        content: content.to_string(),
        reason,
    }
}

fn parse_header<R: BufRead>(reader: &mut R) -> Result<Header, PlyError> {
    let mut encoding = None;
    let mut comments = Vec::new();
    let mut elements: Vec<ElementDef> = Vec::new();
    let mut line_no = 0;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| PlyError::Data(e.to_string()))?;
        line_no += 1;
        if n == 0 {
            return Err(header_err(line_no, "", "unexpected end of header"));
        }
        let text = String::from_utf8_lossy(&buf);
        let line = text.trim_end_matches(['\n', '\r']).trim();
        let mut tokens = line.split_whitespace();
        let first = tokens.next().unwrap_or("");
        if line_no == 1 {
            if line != "ply" {
                return Err(header_err(line_no, line, "expected magic `ply`"));
            }
            continue;
        }
        match first {
            "format" => {
                let fmt = tokens.next().unwrap_or("");
                let version = tokens.next().unwrap_or("");
                if version != "1.0" {
                    return Err(header_err(line_no, line, "unsupported version"));
                }
                encoding = Some(match fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    "binary_big_endian" => {
                        return Err(header_err(line_no, line, "big-endian not supported"))
                    }
                    _ => return Err(header_err(line_no, line, "unknown format")),
                });
            }
            "comment" | "obj_info" => {
                comments.push(line[first.len()..].trim().to_string());
            }
            "element" => {
                let name = tokens
                    .next()
                    .ok_or_else(|| header_err(line_no, line, "element without name"))?;
                let count = tokens
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| header_err(line_no, line, "bad element count"))?;
                elements.push(ElementDef {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            "property" => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| header_err(line_no, line, "property before element"))?;
                let ty = tokens
                    .next()
                    .ok_or_else(|| header_err(line_no, line, "property without type"))?;
                let kind = if ty == "list" {
                    let count = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| header_err(line_no, line, "bad list count type"))?;
                    let item = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| header_err(line_no, line, "bad list item type"))?;
                    PropertyKind::List { count, item }
                } else {
                    PropertyKind::Scalar(
                        ScalarType::parse(ty)
                            .ok_or_else(|| header_err(line_no, line, "unknown property type"))?,
                    )
                };
                let name = tokens
                    .next()
                    .ok_or_else(|| header_err(line_no, line, "property without name"))?;
                element.properties.push((name.to_string(), kind));
            }
            "end_header" => break,
            "" => {}
            _ => return Err(header_err(line_no, line, "unknown keyword")),
        }
    }
    let encoding = encoding.ok_or_else(|| header_err(line_no, "end_header", "missing format line"))?;
    Ok(Header {
        encoding,
        comments,
        elements,
    })
}

struct AsciiTokens<R: BufRead> {
    reader: R,
    pending: std::collections::VecDeque<String>,
}

impl<R: BufRead> AsciiTokens<R> {
    fn next_value(&mut self) -> Result<f64, PlyError> {
        loop {
            if let Some(tok) = self.pending.pop_front() {
                return tok
                    .parse::<f64>()
                    .map_err(|_| PlyError::Data(format!("bad number `{tok}`")));
            }
            let mut line = String::new();
            let n = self
                .reader
                .read_line(&mut line)
                .map_err(|e| PlyError::Data(e.to_string()))?;
            if n == 0 {
                return Err(PlyError::Data("unexpected end of data".into()));
            }
            self.pending
                .extend(line.split_whitespace().map(str::to_string));
        }
    }
}

fn read_binary_scalar<R: Read>(r: &mut R, ty: ScalarType) -> Result<f64, PlyError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf[..ty.size()])
        .map_err(|_| PlyError::Data("unexpected end of data".into()))?;
    Ok(ty.decode_le(&buf))
}

fn io_err(path: &Path, source: std::io::Error) -> PlyError {
    PlyError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads the `vertex` element of a PLY file.
pub fn read_vertices(path: &Path) -> Result<VertexTable, PlyError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    read_vertices_from(&mut reader)
}

pub fn read_vertices_from<R: BufRead>(reader: &mut R) -> Result<VertexTable, PlyError> {
    let header = parse_header(reader)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| PlyError::Schema("no `vertex` element".into()))?;
    let vdef = &header.elements[vertex_pos];
    let mut properties = Vec::new();
    for (name, kind) in &vdef.properties {
        match kind {
            PropertyKind::Scalar(t) => properties.push((name.clone(), *t)),
            PropertyKind::List { .. } => {
                return Err(PlyError::Schema(format!(
                    "list property `{name}` on vertex element is not supported"
                )))
            }
        }
    }
    let mut columns = vec![Vec::with_capacity(vdef.count); properties.len()];

    match header.encoding {
        PlyEncoding::Ascii => {
            let mut tokens = AsciiTokens {
                reader,
                pending: Default::default(),
            };
            for element in &header.elements[..vertex_pos] {
                for _ in 0..element.count {
                    for (_, kind) in &element.properties {
                        match kind {
                            PropertyKind::Scalar(_) => {
                                tokens.next_value()?;
                            }
                            PropertyKind::List { .. } => {
                                let n = tokens.next_value()? as usize;
                                for _ in 0..n {
                                    tokens.next_value()?;
                                }
                            }
                        }
                    }
                }
            }
            for _ in 0..vdef.count {
                for col in columns.iter_mut() {
                    col.push(tokens.next_value()?);
                }
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            for element in &header.elements[..vertex_pos] {
                for _ in 0..element.count {
                    for (_, kind) in &element.properties {
                        match kind {
                            PropertyKind::Scalar(t) => {
                                read_binary_scalar(reader, *t)?;
                            }
                            PropertyKind::List { count, item } => {
                                let n = read_binary_scalar(reader, *count)? as usize;
                                for _ in 0..n {
                                    read_binary_scalar(reader, *item)?;
                                }
                            }
                        }
                    }
                }
            }
            let row: usize = properties.iter().map(|(_, t)| t.size()).sum();
            let mut buf = vec![0u8; row];
            for _ in 0..vdef.count {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| PlyError::Data("unexpected end of vertex data".into()))?;
                let mut off = 0;
                for (col, (_, t)) in columns.iter_mut().zip(&properties) {
                    col.push(t.decode_le(&buf[off..]));
                    off += t.size();
                }
            }
        }
    }

    Ok(VertexTable {
        encoding: header.encoding,
        comments: header.comments,
        properties,
        len: vdef.count,
        columns,
    })
}

/// Writes a single `vertex` element. `rows` yields one value per property.
pub fn write_vertices<I>(
    path: &Path,
    encoding: PlyEncoding,
    comments: &[String],
    properties: &[(&str, ScalarType)],
    count: usize,
    rows: I,
) -> Result<(), PlyError>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_vertices_to(&mut w, encoding, comments, properties, count, rows)
        .map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_vertices_to<W: Write, I>(
    w: &mut W,
    encoding: PlyEncoding,
    comments: &[String],
    properties: &[(&str, ScalarType)],
    count: usize,
    rows: I,
) -> std::io::Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    writeln!(w, "ply")?;
    match encoding {
        PlyEncoding::Ascii => writeln!(w, "format ascii 1.0")?,
        PlyEncoding::BinaryLittleEndian => writeln!(w, "format binary_little_endian 1.0")?,
    }
    for c in comments {
        writeln!(w, "comment {c}")?;
    }
    writeln!(w, "element vertex {count}")?;
    for (name, ty) in properties {
        writeln!(w, "property {} {name}", ty.name())?;
    }
    writeln!(w, "end_header")?;
    let mut written = 0;
    let mut bytes = Vec::new();
    for row in rows {
        assert_eq!(row.len(), properties.len(), "row width mismatch");
        match encoding {
            PlyEncoding::Ascii => {
                let line: Vec<String> = row
                    .iter()
                    .zip(properties)
                    .map(|(v, (_, t))| t.format_ascii(*v))
                    .collect();
                writeln!(w, "{}", line.join(" "))?;
            }
            PlyEncoding::BinaryLittleEndian => {
                bytes.clear();
                for (v, (_, t)) in row.iter().zip(properties) {
                    t.encode_le(*v, &mut bytes);
                }
                w.write_all(&bytes)?;
            }
        }
        written += 1;
    }
    assert_eq!(written, count, "vertex count mismatch");
    Ok(())
}
