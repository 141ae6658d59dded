//! Binary little-endian PLY for Gaussian scenes, using the property names
//! of common splat viewers:
//! `x y z f_dc_0..2 f_rest_0..(3L-4) opacity scale_0..2 rot_0..3`.
//!
//! `opacity` holds the logit, `scale_*` the log-scales and `rot_*` the
//! quaternion `(w, x, y, z)`. `f_rest` is channel-major: all red higher-order
//! coefficients first, then green, then blue.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::camera::Vec3;
use crate::error::{format_err, Result};
use crate::gaussian::{GaussianPrimitive, GaussianScene, Quat};
use crate::sh::ShOrder;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PlyPrecision {
    /// `float` properties; what splat viewers expect.
    #[default]
    F32,
    /// `double` properties; lossless for in-memory scenes.
    F64,
}

pub fn property_names(order: ShOrder) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * (order.num_coeffs() - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

fn primitive_row(p: &GaussianPrimitive, order: ShOrder, row: &mut Vec<f64>) {
    let l = order.num_coeffs();
    row.clear();
    row.extend(p.position.iter());
    row.extend_from_slice(&p.sh[..3]);
    for c in 0..3 {
        for k in 1..l {
            row.push(p.sh[k * 3 + c]);
        }
    }
    row.push(p.opacity_logit);
    row.extend(p.log_scale.iter());
    row.extend(p.rotation.iter());
}

pub fn write_ply<W: Write>(scene: &GaussianScene, out: W, precision: PlyPrecision) -> Result<()> {
    let mut out = BufWriter::new(out);
    let ty = match precision {
        PlyPrecision::F32 => "float",
        PlyPrecision::F64 => "double",
    };
    writeln!(out, "ply")?;
    writeln!(out, "format binary_little_endian 1.0")?;
    writeln!(out, "element vertex {}", scene.primitives.len())?;
    for name in property_names(scene.sh_order) {
        writeln!(out, "property {ty} {name}")?;
    }
    writeln!(out, "end_header")?;
    let mut row = Vec::new();
    for p in &scene.primitives {
        primitive_row(p, scene.sh_order, &mut row);
        for &v in &row {
            match precision {
                PlyPrecision::F32 => out.write_all(&(v as f32).to_le_bytes())?,
                PlyPrecision::F64 => out.write_all(&v.to_le_bytes())?,
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ScalarType {
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

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Property {
    name: String,
    ty: ScalarType,
    offset: usize,
}

fn bad(msg: impl Into<String>) -> crate::Error {
    format_err("ply", msg)
}

pub fn read_ply<R: Read>(input: R) -> Result<GaussianScene> {
    let mut input = BufReader::new(input);
    let mut line = String::new();
    let next_line = |input: &mut BufReader<R>, line: &mut String| -> Result<()> {
        line.clear();
        if input.read_line(line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(())
    };
    next_line(&mut input, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing magic"));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<Property> = Vec::new();
    let mut stride = 0;
    let mut in_vertex = false;
    loop {
        next_line(&mut input, &mut line)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(bad(format!("unsupported format {fmt}")));
                }
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, n] => {
                if count.is_some() {
                    return Err(bad("only a single vertex element is supported"));
                }
                in_vertex = *name == "vertex";
                if !in_vertex {
                    return Err(bad(format!("unexpected element {name}")));
                }
                count = Some(n.parse().map_err(|_| bad(format!("bad vertex count {n}")))?);
            }
            ["property", "list", ..] => return Err(bad("list properties are not supported")),
            ["property", ty, name] if in_vertex => {
                let ty = ScalarType::parse(ty).ok_or_else(|| bad(format!("unknown type {ty}")))?;
                props.push(Property { name: name.to_string(), ty, offset: stride });
                stride += ty.size();
            }
            _ => return Err(bad(format!("unexpected header line {:?}", line.trim_end()))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let find = |name: &str| -> Result<&Property> {
        props
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| bad(format!("missing property {name}")))
    };
    let n_rest = props.iter().filter(|p| p.name.starts_with("f_rest_")).count();
    if n_rest % 3 != 0 {
        return Err(bad(format!("{n_rest} f_rest properties is not a multiple of 3")));
    }
    let order = ShOrder::from_num_coeffs(n_rest / 3 + 1)
        .ok_or_else(|| bad(format!("{n_rest} f_rest properties match no SH order")))?;
    let l = order.num_coeffs();
    let mut layout: Vec<&Property> = Vec::new();
    for name in property_names(order) {
        layout.push(find(&name)?);
    }

    let mut buf = vec![0u8; stride];
    let mut vals = vec![0.0; layout.len()];
    let mut primitives = Vec::with_capacity(count);
    for i in 0..count {
        input
            .read_exact(&mut buf)
            .map_err(|_| bad(format!("truncated at vertex {i} of {count}")))?;
        for (v, p) in vals.iter_mut().zip(&layout) {
            *v = p.ty.read(&buf[p.offset..]);
        }
        let mut sh = vec![0.0; 3 * l];
        sh[..3].copy_from_slice(&vals[3..6]);
        for c in 0..3 {
            for k in 1..l {
                sh[k * 3 + c] = vals[6 + c * (l - 1) + (k - 1)];
            }
        }
        let o = 6 + 3 * (l - 1);
        primitives.push(GaussianPrimitive {
            position: Vec3::new(vals[0], vals[1], vals[2]),
            log_scale: Vec3::new(vals[o + 1], vals[o + 2], vals[o + 3]),
            rotation: Quat::new(vals[o + 4], vals[o + 5], vals[o + 6], vals[o + 7]),
            opacity_logit: vals[o],
            sh,
        });
    }
    Ok(GaussianScene::with_primitives(order, primitives))
}

pub fn save_ply(path: &Path, scene: &GaussianScene, precision: PlyPrecision) -> Result<()> {
    write_ply(scene, File::create(path)?, precision)
}

pub fn load_ply(path: &Path) -> Result<GaussianScene> {
    read_ply(File::open(path)?)
}
