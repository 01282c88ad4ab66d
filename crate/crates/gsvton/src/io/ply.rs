//! Binary little-endian PLY with the property layout used by 3DGS tools.
//!
//! Opacity is stored as a logit and scale as a log; both are mapped back on
//! load. Rotation is `rot_0..3 = (w, x, y, z)`. Higher-order SH lives in
//! `f_rest_*`, channel-major: all red coefficients, then green, then blue.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use gsvton_core::sh::coeff_count;
use gsvton_core::{Gaussian, GaussianCloud};

use crate::error::{IoError, Result};

/// Opacities are clamped this far from 0 and 1 before taking the logit.
pub const OPACITY_EPS: f64 = 1e-6;

fn logit(p: f64) -> f64 {
    let p = p.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn property_names(degree: usize) -> Vec<String> {
    let rest = 3 * (coeff_count(degree) - 1);
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

pub fn write_ply<W: Write>(mut out: W, cloud: &GaussianCloud) -> std::io::Result<()> {
    let degree = cloud.sh_degree();
    let names = property_names(degree);
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        cloud.len()
    );
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;

    let rest = coeff_count(degree) - 1;
    let mut row = Vec::with_capacity(names.len());
    for g in cloud.iter() {
        row.clear();
        row.extend(g.position());
        row.extend([0.0; 3]);
        row.extend(g.sh()[0]);
        for ch in 0..3 {
            row.extend(g.sh()[1..].iter().map(|c| c[ch]));
        }
        debug_assert_eq!(row.len(), 9 + 3 * rest);
        row.push(logit(g.opacity()));
        row.extend(g.scale().map(f64::ln));
        row.extend(g.rotation().0);
        for v in &row {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()
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

    fn read(self, b: &[u8]) -> f64 {
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

/// Reads the vertex element of a binary little-endian PLY. Extra vertex
/// properties and elements after the vertices are ignored.
pub fn read_ply<R: Read>(input: R) -> std::result::Result<GaussianCloud, String> {
    let mut r = BufReader::new(input);
    let mut line = String::new();
    let next = |r: &mut BufReader<R>, line: &mut String| -> std::result::Result<(), String> {
        line.clear();
        if r.read_line(line).map_err(|e| e.to_string())? == 0 {
            return Err("unexpected end of header".into());
        }
        Ok(())
    };
    next(&mut r, &mut line)?;
    if line.trim_end() != "ply" {
        return Err("missing ply magic".into());
    }
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        next(&mut r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(format!("unsupported PLY format {fmt}"));
                }
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse().map_err(|_| format!("bad vertex count {n}"))?);
                } else if count.is_none() {
                    return Err(format!("element {name} precedes the vertices"));
                }
            }
            ["property", "list", ..] if in_vertex => return Err("list properties on vertices".into()),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| format!("unknown property type {ty}"))?;
                props.push((name.to_string(), s));
            }
            _ => {}
        }
    }
    let count = count.ok_or("no vertex element")?;
    let mut offset = HashMap::new();
    let mut stride = 0;
    for (name, s) in &props {
        offset.insert(name.as_str(), (stride, *s));
        stride += s.size();
    }
    let field = |name: &str| offset.get(name).copied().ok_or_else(|| format!("missing property {name}"));
    let pos = ["x", "y", "z"].map(field);
    let dc = ["f_dc_0", "f_dc_1", "f_dc_2"].map(field);
    let scale = ["scale_0", "scale_1", "scale_2"].map(field);
    let rot = ["rot_0", "rot_1", "rot_2", "rot_3"].map(field);
    let opacity = field("opacity")?;
    let n_rest = (0..).take_while(|i| offset.contains_key(format!("f_rest_{i}").as_str())).count();
    let degree = (0..=3)
        .find(|&d| 3 * (coeff_count(d) - 1) == n_rest)
        .ok_or_else(|| format!("{n_rest} f_rest properties match no SH degree"))?;
    let rest: Vec<_> = (0..n_rest).map(|i| field(&format!("f_rest_{i}"))).collect::<std::result::Result<_, _>>()?;
    let unwrap3 = |a: [std::result::Result<(usize, Scalar), String>; 3]| -> std::result::Result<[(usize, Scalar); 3], String> {
        let [a, b, c] = a;
        Ok([a?, b?, c?])
    };
    let (pos, dc, scale) = (unwrap3(pos)?, unwrap3(dc)?, unwrap3(scale)?);
    let [r0, r1, r2, r3] = rot;
    let rot = [r0?, r1?, r2?, r3?];

    let per_channel = coeff_count(degree) - 1;
    let mut buf = vec![0u8; stride];
    let mut gaussians = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut buf).map_err(|e| format!("vertex {i}: {e}"))?;
        let get = |(o, s): (usize, Scalar)| s.read(&buf[o..]);
        let mut sh = vec![dc.map(get)];
        for k in 0..per_channel {
            sh.push([0, 1, 2].map(|ch| get(rest[ch * per_channel + k])));
        }
        let g = Gaussian::new(
            pos.map(get),
            rot.map(get),
            scale.map(|f| get(f).exp()),
            sigmoid(get(opacity)),
            sh,
        )
        .map_err(|e| format!("vertex {i}: {e}"))?;
        gaussians.push(g);
    }
    GaussianCloud::new(gaussians).map_err(|e| e.to_string())
}

pub fn load_ply(path: &Path) -> Result<GaussianCloud> {
    let f = std::fs::File::open(path).map_err(|e| IoError::file(path, e))?;
    read_ply(f).map_err(|m| IoError::format(path, m))
}

pub fn save_ply(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    let mut bytes = Vec::new();
    write_ply(&mut bytes, cloud).expect("in-memory write");
    super::write_file(path, &bytes)
}
