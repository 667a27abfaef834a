//! PLY reader and writer for vertex-only files in ASCII or binary
//! little-endian encoding.
//!
//! Values are held as `f64` columns; every supported scalar type converts
//! to `f64` and back without loss, so binary round trips are bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{sh_coeff_count, Gaussian3D, GaussianCloud, MAX_SH_DEGREE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
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

    fn name(self) -> &'static str {
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

    fn decode(self, b: &[u8]) -> f64 {
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

    fn encode(self, v: f64, out: &mut Vec<u8>) {
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
            Self::F32 => format!("{:?}", v as f32),
            Self::F64 => format!("{v:?}"),
            _ => format!("{}", v as i64),
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Self::F32 | Self::F64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlyProperty {
    pub name: String,
    pub kind: PlyScalar,
}

/// A vertex element stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyData {
    pub format: PlyFormat,
    pub comments: Vec<String>,
    pub properties: Vec<PlyProperty>,
    pub columns: Vec<Vec<f64>>,
}

impl PlyData {
    pub fn new(format: PlyFormat) -> Self {
        Self {
            format,
            comments: Vec::new(),
            properties: Vec::new(),
            columns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_property(&mut self, name: &str, kind: PlyScalar, values: Vec<f64>) -> Result<()> {
        if !self.columns.is_empty() && values.len() != self.len() {
            return Err(Error::Shape(format!("property {name}: {} values vs {}", values.len(), self.len())));
        }
        self.properties.push(PlyProperty {
            name: name.to_string(),
            kind,
        });
        self.columns.push(values);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.properties
            .iter()
            .position(|p| p.name == name)
            .map(|i| self.columns[i].as_slice())
    }

    fn require(&self, name: &str) -> Result<&[f64]> {
        self.column(name)
            .ok_or_else(|| Error::Unsupported(format!("ply is missing property '{name}'")))
    }

    pub fn positions(&self) -> Result<Vec<Vector3<f64>>> {
        let (x, y, z) = (self.require("x")?, self.require("y")?, self.require("z")?);
        Ok((0..self.len()).map(|i| Vector3::new(x[i], y[i], z[i])).collect())
    }

    /// Colours in [0, 1] from `red/green/blue`, rescaling 8-bit channels.
    pub fn colours(&self) -> Option<Vec<[f64; 3]>> {
        let idx: Vec<usize> = ["red", "green", "blue"]
            .iter()
            .map(|n| self.properties.iter().position(|p| p.name == *n))
            .collect::<Option<_>>()?;
        let scale = if self.properties[idx[0]].kind == PlyScalar::U8 {
            1.0 / 255.0
        } else {
            1.0
        };
        Some(
            (0..self.len())
                .map(|i| [0, 1, 2].map(|c| self.columns[idx[c]][i] * scale))
                .collect(),
        )
    }

    /// Points with optional 8-bit colours and normals.
    pub fn from_points(
        format: PlyFormat,
        positions: &[Vector3<f64>],
        colours: Option<&[[f64; 3]]>,
        normals: Option<&[Vector3<f64>]>,
    ) -> Result<Self> {
        let mut ply = Self::new(format);
        for (k, name) in ["x", "y", "z"].iter().enumerate() {
            ply.add_property(name, PlyScalar::F64, positions.iter().map(|p| p[k]).collect())?;
        }
        if let Some(n) = normals {
            for (k, name) in ["nx", "ny", "nz"].iter().enumerate() {
                ply.add_property(name, PlyScalar::F64, n.iter().map(|p| p[k]).collect())?;
            }
        }
        if let Some(c) = colours {
            for (k, name) in ["red", "green", "blue"].iter().enumerate() {
                let col = c.iter().map(|p| (p[k].clamp(0.0, 1.0) * 255.0).round()).collect();
                ply.add_property(name, PlyScalar::U8, col)?;
            }
        }
        Ok(ply)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let fmt = match self.format {
            PlyFormat::Ascii => "ascii",
            PlyFormat::BinaryLittleEndian => "binary_little_endian",
        };
        let mut header = format!("ply\nformat {fmt} 1.0\n");
        for c in &self.comments {
            header += &format!("comment {c}\n");
        }
        header += &format!("element vertex {}\n", self.len());
        for p in &self.properties {
            header += &format!("property {} {}\n", p.kind.name(), p.name);
        }
        header += "end_header\n";
        out.extend_from_slice(header.as_bytes());
        for i in 0..self.len() {
            match self.format {
                PlyFormat::Ascii => {
                    let row: Vec<String> = self
                        .properties
                        .iter()
                        .zip(&self.columns)
                        .map(|(p, c)| p.kind.format_ascii(c[i]))
                        .collect();
                    out.extend_from_slice(row.join(" ").as_bytes());
                    out.push(b'\n');
                }
                PlyFormat::BinaryLittleEndian => {
                    for (p, c) in self.properties.iter().zip(&self.columns) {
                        p.kind.encode(c[i], &mut out);
                    }
                }
            }
        }
        out
    }

    pub fn from_reader<R: Read>(r: R, source: &str) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut line_no = 0;
        let next_line = |r: &mut BufReader<R>, line: &mut String, line_no: &mut usize| -> Result<usize> {
            line.clear();
            *line_no += 1;
            let n = r.read_line(line).map_err(|e| Error::io(source, e))?;
            if n == 0 {
                return Err(Error::parse(source, *line_no, "unexpected end of header"));
            }
            Ok(*line_no)
        };

        let ln = next_line(&mut r, &mut line, &mut line_no)?;
        if line.trim_end() != "ply" {
            return Err(Error::parse(source, ln, "missing 'ply' magic"));
        }
        let mut format = None;
        let mut comments = Vec::new();
        let mut count = None;
        let mut properties = Vec::new();
        loop {
            let ln = next_line(&mut r, &mut line, &mut line_no)?;
            let t: Vec<&str> = line.split_whitespace().collect();
            match t.as_slice() {
                ["end_header"] => break,
                ["format", f, _] => {
                    format = Some(match *f {
                        "ascii" => PlyFormat::Ascii,
                        "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                        other => return Err(Error::Unsupported(format!("ply format {other}"))),
                    })
                }
                ["comment", ..] => comments.push(line.trim()["comment".len()..].trim().to_string()),
                ["obj_info", ..] => {}
                ["element", "vertex", n] => {
                    if count.is_some() {
                        return Err(Error::parse(source, ln, "duplicate vertex element"));
                    }
                    count = Some(
                        n.parse::<usize>()
                            .map_err(|_| Error::parse(source, ln, format!("bad vertex count '{n}'")))?,
                    );
                }
                ["element", name, _] => {
                    return Err(Error::Unsupported(format!("ply element '{name}'")));
                }
                ["property", "list", ..] => {
                    return Err(Error::Unsupported("ply list properties".into()));
                }
                ["property", kind, name] => {
                    let kind = PlyScalar::parse(kind)
                        .ok_or_else(|| Error::parse(source, ln, format!("unknown property type '{kind}'")))?;
                    properties.push(PlyProperty {
                        name: name.to_string(),
                        kind,
                    });
                }
                _ => return Err(Error::parse(source, ln, format!("unexpected header line '{}'", line.trim()))),
            }
        }
        let format = format.ok_or_else(|| Error::parse(source, line_no, "missing format line"))?;
        let count = count.ok_or_else(|| Error::parse(source, line_no, "missing vertex element"))?;
        let mut columns = vec![Vec::with_capacity(count); properties.len()];
        match format {
            PlyFormat::Ascii => {
                for i in 0..count {
                    let ln = next_line(&mut r, &mut line, &mut line_no)
                        .map_err(|_| Error::parse(source, line_no + 1, format!("truncated: {i} of {count} vertices")))?;
                    let t: Vec<&str> = line.split_whitespace().collect();
                    if t.len() != properties.len() {
                        return Err(Error::parse(
                            source,
                            ln,
                            format!("expected {} values, found {}", properties.len(), t.len()),
                        ));
                    }
                    for ((tok, col), p) in t.iter().zip(columns.iter_mut()).zip(&properties) {
                        let v: f64 = tok
                            .parse()
                            .map_err(|_| Error::parse(source, ln, format!("bad value '{tok}'")))?;
                        if p.kind.is_integer() && v.fract() != 0.0 {
                            return Err(Error::parse(source, ln, format!("non-integer '{tok}' for {}", p.name)));
                        }
                        col.push(v);
                    }
                }
            }
            PlyFormat::BinaryLittleEndian => {
                let row: usize = properties.iter().map(|p| p.kind.size()).sum();
                let mut buf = vec![0u8; row];
                for i in 0..count {
                    r.read_exact(&mut buf)
                        .map_err(|_| Error::Unsupported(format!("{source}: truncated at vertex {i} of {count}")))?;
                    let mut off = 0;
                    for (p, col) in properties.iter().zip(columns.iter_mut()) {
                        col.push(p.kind.decode(&buf[off..]));
                        off += p.kind.size();
                    }
                }
                let mut rest = Vec::new();
                r.read_to_end(&mut rest).map_err(|e| Error::io(source, e))?;
                if !rest.is_empty() {
                    return Err(Error::Unsupported(format!("{source}: {} trailing bytes", rest.len())));
                }
            }
        }
        Ok(Self {
            format,
            comments,
            properties,
            columns,
        })
    }
}

pub fn read_ply(path: &Path) -> Result<PlyData> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    PlyData::from_reader(f, &path.display().to_string())
}

pub fn write_ply(path: &Path, ply: &PlyData) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ply.to_bytes()).map_err(|e| Error::io(path, e))
}

const ACTIVE_DEGREE_COMMENT: &str = "active_sh_degree";

/// Gaussian cloud as a binary PLY with `double` properties.
pub fn cloud_to_ply(cloud: &GaussianCloud) -> PlyData {
    let mut ply = PlyData::new(PlyFormat::BinaryLittleEndian);
    ply.comments
        .push(format!("{ACTIVE_DEGREE_COMMENT} {}", cloud.active_sh_degree));
    let col = |f: &dyn Fn(&Gaussian3D) -> f64| cloud.gaussians.iter().map(f).collect::<Vec<_>>();
    let mut add = |name: String, values: Vec<f64>| {
        ply.add_property(&name, PlyScalar::F64, values).expect("congruent columns");
    };
    for k in 0..3 {
        add(["x", "y", "z"][k].into(), col(&|g| g.position[k]));
    }
    for k in 0..3 {
        add(format!("scale_{k}"), col(&|g| g.log_scale[k]));
    }
    for k in 0..4 {
        add(format!("rot_{k}"), col(&|g| g.rotation[k]));
    }
    add("opacity".into(), col(&|g| g.opacity_logit));
    for k in 0..3 {
        add(format!("backscatter_{k}"), col(&|g| g.backscatter_logit[k]));
    }
    for k in 0..3 {
        add(format!("f_dc_{k}"), col(&|g| g.sh[0][k]));
    }
    let n = sh_coeff_count(cloud.sh_degree);
    // channel-major like the usual splatting exports
    for ch in 0..3 {
        for j in 1..n {
            add(format!("f_rest_{}", ch * (n - 1) + j - 1), col(&|g| g.sh[j][ch]));
        }
    }
    ply
}

pub fn cloud_from_ply(ply: &PlyData) -> Result<GaussianCloud> {
    let rest = ply
        .properties
        .iter()
        .filter(|p| p.name.starts_with("f_rest_"))
        .count();
    let degree = (0..=MAX_SH_DEGREE)
        .find(|&d| 3 * (sh_coeff_count(d) - 1) == rest)
        .ok_or_else(|| Error::Unsupported(format!("{rest} f_rest properties do not match an SH degree")))?;
    let n = sh_coeff_count(degree);
    let get = |name: String| ply.require(&name).map(|c| c.to_vec());
    let pos = [get("x".into())?, get("y".into())?, get("z".into())?];
    let scale = [get("scale_0".into())?, get("scale_1".into())?, get("scale_2".into())?];
    let rot = [
        get("rot_0".into())?,
        get("rot_1".into())?,
        get("rot_2".into())?,
        get("rot_3".into())?,
    ];
    let opacity = get("opacity".into())?;
    let bs: Vec<Vec<f64>> = (0..3)
        .map(|k| get(format!("backscatter_{k}")).or_else(|_| Ok::<_, Error>(vec![0.0; ply.len()])))
        .collect::<Result<_>>()?;
    let dc: Vec<Vec<f64>> = (0..3).map(|k| get(format!("f_dc_{k}"))).collect::<Result<_>>()?;
    let rest: Vec<Vec<f64>> = (0..rest).map(|k| get(format!("f_rest_{k}"))).collect::<Result<_>>()?;

    let mut gaussians = Vec::with_capacity(ply.len());
    for i in 0..ply.len() {
        let mut sh = vec![[0.0; 3]; n];
        sh[0] = [dc[0][i], dc[1][i], dc[2][i]];
        for ch in 0..3 {
            for j in 1..n {
                sh[j][ch] = rest[ch * (n - 1) + j - 1][i];
            }
        }
        gaussians.push(Gaussian3D {
            position: Vector3::new(pos[0][i], pos[1][i], pos[2][i]),
            log_scale: Vector3::new(scale[0][i], scale[1][i], scale[2][i]),
            rotation: [rot[0][i], rot[1][i], rot[2][i], rot[3][i]],
            opacity_logit: opacity[i],
            sh,
            backscatter_logit: [bs[0][i], bs[1][i], bs[2][i]],
        });
    }
    let mut cloud = GaussianCloud::new(gaussians, degree)?;
    cloud.active_sh_degree = ply
        .comments
        .iter()
        .find_map(|c| c.strip_prefix(ACTIVE_DEGREE_COMMENT)?.trim().parse().ok())
        .unwrap_or(degree)
        .min(degree);
    Ok(cloud)
}
