//! PLY persistence of a [`GaussianSet`].
//!
//! One `vertex` element per gaussian with properties `x y z`,
//! `log_scale_0..2`, `rot_0..3` (w, x, y, z), `alpha_logit` and
//! `f_0..f_{D-1}`. Values are written as `double` so a save/load round trip
//! is bit-exact; the reader also accepts `float`.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::Quat;
use crate::scene::GaussianSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

fn property_names(feature_dim: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("log_scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names.push("alpha_logit".into());
    names.extend((0..feature_dim).map(|i| format!("f_{i}")));
    names
}

fn row(set: &GaussianSet, i: usize) -> Vec<f64> {
    let p = set.positions[i];
    let s = set.log_scales[i];
    let mut r = vec![p.x, p.y, p.z, s.x, s.y, s.z];
    r.extend(set.rotations[i].to_array());
    r.push(set.opacity_logits[i]);
    r.extend_from_slice(set.feature(i));
    r
}

pub fn write_ply(set: &GaussianSet, format: PlyFormat, mut w: impl Write) -> Result<()> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply")?;
    writeln!(w, "format {fmt} 1.0")?;
    writeln!(w, "comment gsavatar canonical gaussians")?;
    writeln!(w, "element vertex {}", set.len())?;
    for name in property_names(set.feature_dim) {
        writeln!(w, "property double {name}")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..set.len() {
        let r = row(set, i);
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in r {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn save_ply(set: &GaussianSet, path: &Path, format: PlyFormat) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ply(set, format, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<GaussianSet> {
    read_ply(BufReader::new(std::fs::File::open(path)?), path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    Float,
    Double,
}

struct Header {
    format: PlyFormat,
    count: usize,
    props: Vec<(String, Scalar)>,
    lines: usize,
}

fn parse_error(path: &Path, line: usize, field: &str, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn read_header(r: &mut impl BufRead, path: &Path) -> Result<Header> {
    let mut lines = 0;
    let mut next = |r: &mut dyn BufRead| -> Result<Option<String>> {
        let mut s = String::new();
        if r.read_line(&mut s)? == 0 {
            return Ok(None);
        }
        lines += 1;
        Ok(Some(s.trim_end_matches(['\n', '\r']).to_string()))
    };
    let magic = next(r)?;
    if magic.as_deref() != Some("ply") {
        return Err(parse_error(
            path,
            1,
            "magic",
            "file does not start with `ply`",
        ));
    }
    let mut format = None;
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    let mut line_no = 1;
    loop {
        let Some(line) = next(r)? else {
            return Err(parse_error(
                path,
                line_no + 1,
                "header",
                "missing end_header",
            ));
        };
        line_no += 1;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", f, ver] => {
                if *ver != "1.0" {
                    return Err(parse_error(
                        path,
                        line_no,
                        "format",
                        format!("unsupported version {ver}"),
                    ));
                }
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(parse_error(
                            path,
                            line_no,
                            "format",
                            format!("unsupported format {other}"),
                        ))
                    }
                });
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|e| {
                        parse_error(path, line_no, "element vertex", e.to_string())
                    })?);
                } else if *n != "0" {
                    return Err(parse_error(
                        path,
                        line_no,
                        "element",
                        format!("unexpected non-empty element `{name}`"),
                    ));
                }
            }
            ["property", ty, name] => {
                if !in_vertex {
                    continue;
                }
                let scalar = match *ty {
                    "float" | "float32" => Scalar::Float,
                    "double" | "float64" => Scalar::Double,
                    other => {
                        return Err(parse_error(
                            path,
                            line_no,
                            name,
                            format!("unsupported property type `{other}`"),
                        ))
                    }
                };
                props.push((name.to_string(), scalar));
            }
            _ => {
                return Err(parse_error(
                    path,
                    line_no,
                    "header",
                    format!("unrecognized line `{line}`"),
                ))
            }
        }
    }
    Ok(Header {
        format: format
            .ok_or_else(|| parse_error(path, line_no, "format", "missing format line"))?,
        count: count.ok_or_else(|| {
            parse_error(path, line_no, "element vertex", "missing vertex element")
        })?,
        props,
        lines,
    })
}

pub fn read_ply(mut r: impl BufRead, path: &Path) -> Result<GaussianSet> {
    let header = read_header(&mut r, path)?;
    let feature_dim = header
        .props
        .iter()
        .filter(|(n, _)| n.starts_with("f_"))
        .count();
    let expected = property_names(feature_dim);
    let mut column = Vec::with_capacity(expected.len());
    for name in &expected {
        let idx = header
            .props
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| parse_error(path, header.lines, name, "required property missing"))?;
        column.push(idx);
    }
    let width = header.props.len();
    let mut values = vec![0.0f64; width];
    let mut set = GaussianSet::empty(feature_dim);
    let mut push = |values: &[f64]| {
        let g = |i: usize| values[column[i]];
        set.positions.push(Vector3::new(g(0), g(1), g(2)));
        set.log_scales.push(Vector3::new(g(3), g(4), g(5)));
        set.rotations.push(Quat::new(g(6), g(7), g(8), g(9)));
        set.opacity_logits.push(g(10));
        set.features.extend((0..feature_dim).map(|k| g(11 + k)));
    };
    match header.format {
        PlyFormat::Ascii => {
            let mut lines = r.lines();
            for v in 0..header.count {
                let line_no = header.lines + v + 1;
                let line = lines.next().ok_or_else(|| {
                    parse_error(path, line_no, "vertex", "unexpected end of file")
                })??;
                let tok: Vec<&str> = line.split_whitespace().collect();
                if tok.len() != width {
                    return Err(parse_error(
                        path,
                        line_no,
                        "vertex",
                        format!("expected {width} values, found {}", tok.len()),
                    ));
                }
                for (k, t) in tok.iter().enumerate() {
                    values[k] = t.parse::<f64>().map_err(|e| {
                        parse_error(path, line_no, &header.props[k].0, format!("`{t}`: {e}"))
                    })?;
                    if header.props[k].1 == Scalar::Float {
                        values[k] = values[k] as f32 as f64;
                    }
                }
                push(&values);
            }
            for (extra, line) in lines.enumerate() {
                if !line?.trim().is_empty() {
                    let line_no = header.lines + header.count + extra + 1;
                    return Err(parse_error(path, line_no, "vertex", "trailing data"));
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut raw = [0u8; 8];
            for v in 0..header.count {
                for (k, (name, ty)) in header.props.iter().enumerate() {
                    let size = if *ty == Scalar::Float { 4 } else { 8 };
                    r.read_exact(&mut raw[..size]).map_err(|_| {
                        parse_error(
                            path,
                            header.lines,
                            name,
                            format!("binary data truncated in vertex {v}"),
                        )
                    })?;
                    values[k] = match ty {
                        Scalar::Float => {
                            f32::from_le_bytes(raw[..4].try_into().expect("4 bytes")) as f64
                        }
                        Scalar::Double => f64::from_le_bytes(raw),
                    };
                }
                push(&values);
            }
            let mut rest = Vec::new();
            r.read_to_end(&mut rest)?;
            if !rest.is_empty() {
                return Err(parse_error(
                    path,
                    header.lines,
                    "vertex",
                    format!("{} trailing bytes", rest.len()),
                ));
            }
        }
    }
    Ok(set)
}

/// Reads a PLY from memory; `name` is used in error messages.
pub fn parse_ply_bytes(bytes: &[u8], name: &str) -> Result<GaussianSet> {
    read_ply(bytes, &PathBuf::from(name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, d: usize) -> GaussianSet {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = GaussianSet::empty(d);
        for _ in 0..n {
            s.positions
                .push(Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)));
            s.log_scales
                .push(Vector3::from_fn(|_, _| rng.random_range(-5.0..0.0)));
            s.rotations.push(Quat::new(
                rng.random(),
                rng.random(),
                rng.random(),
                rng.random(),
            ));
            s.opacity_logits.push(rng.random_range(-3.0..3.0));
            s.features
                .extend((0..d).map(|_| rng.random_range(-1.0..1.0) * 1e-7));
        }
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = random_set(17, 32);
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let mut buf = Vec::new();
            write_ply(&s, fmt, &mut buf).unwrap();
            assert_eq!(parse_ply_bytes(&buf, "mem").unwrap(), s);
        }
    }

    #[test]
    fn empty_set_round_trips() {
        let s = GaussianSet::empty(32);
        let mut buf = Vec::new();
        write_ply(&s, PlyFormat::BinaryLittleEndian, &mut buf).unwrap();
        let back = parse_ply_bytes(&buf, "mem").unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.feature_dim, 32);
    }

    #[test]
    fn malformed_value_reports_line_and_field() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
                    property float log_scale_0\nproperty float log_scale_1\nproperty float log_scale_2\n\
                    property float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\n\
                    property float alpha_logit\nend_header\n0 0 0 0 0 0 1 0 0 0 oops\n";
        match parse_ply_bytes(text.as_bytes(), "bad.ply").unwrap_err() {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 16);
                assert_eq!(field, "alpha_logit");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn missing_property_is_reported() {
        let text = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        match parse_ply_bytes(text.as_bytes(), "bad.ply").unwrap_err() {
            Error::Parse { field, .. } => assert_eq!(field, "y"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn truncated_binary_is_reported() {
        let s = random_set(2, 2);
        let mut buf = Vec::new();
        write_ply(&s, PlyFormat::BinaryLittleEndian, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            parse_ply_bytes(&buf, "t.ply"),
            Err(Error::Parse { .. })
        ));
    }
}
