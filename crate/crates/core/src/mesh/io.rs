//! OFF and ASCII PLY readers, OFF writer.

use super::TriMesh;
use crate::error::{Error, Result};
use nalgebra::Vector3;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    PlyAscii,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<MeshFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "off" => Some(MeshFormat::Off),
            "ply" => Some(MeshFormat::PlyAscii),
            _ => None,
        }
    }
}

/// A parsed mesh plus non-fatal findings (e.g. non-manifold edges).
#[derive(Debug, Clone)]
pub struct LoadedMesh {
    pub mesh: TriMesh,
    pub warnings: Vec<String>,
}

/// Loads a mesh; the format is inferred from the extension when `None`.
pub fn load_mesh(path: impl AsRef<Path>, format: Option<MeshFormat>) -> Result<LoadedMesh> {
    let path = path.as_ref();
    let format = match format.or_else(|| MeshFormat::from_path(path)) {
        Some(f) => f,
        None => {
            return Err(Error::Unsupported(format!(
                "cannot infer mesh format of {}",
                path.display()
            )))
        }
    };
    let text = std::fs::read(path)?;
    let name = path.display().to_string();
    let (vertices, triangles) = match format {
        MeshFormat::Off => parse_off(&String::from_utf8_lossy(&text), &name)?,
        MeshFormat::PlyAscii => {
            // a binary body is not valid UTF-8 in general, so check the header first
            let head = String::from_utf8_lossy(&text[..text.len().min(512)]);
            if head.lines().any(|l| l.trim_start().starts_with("format binary")) {
                return Err(Error::Unsupported(format!(
                    "{name}: binary PLY is not supported, convert to ASCII"
                )));
            }
            parse_ply(&String::from_utf8_lossy(&text), &name)?
        }
    };
    let mesh = TriMesh::new(vertices, triangles)?;
    let mut warnings = Vec::new();
    let nm = mesh.non_manifold_edges();
    if !nm.is_empty() {
        let msg = format!("{name}: {} non-manifold edges (first {:?})", nm.len(), nm[0]);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(LoadedMesh { mesh, warnings })
}

type Parsed = (Vec<Vector3<f64>>, Vec<[usize; 3]>);

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(tok: &str, path: &str, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(path, line, format!("invalid number {tok:?}")))
}

fn parse_off(text: &str, path: &str) -> Result<Parsed> {
    let mut lines = content_lines(text);
    let (ln, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing OFF header"))?;
    if header != "OFF" {
        return Err(parse_err(path, ln, format!("expected \"OFF\", found {header:?}")));
    }
    let (ln, counts) = lines
        .next()
        .ok_or_else(|| parse_err(path, ln + 1, "missing element counts"))?;
    let counts: Vec<&str> = counts.split_whitespace().collect();
    if counts.len() < 2 {
        return Err(parse_err(path, ln, "expected \"<nv> <nf> <ne>\""));
    }
    let nv: usize = parse_num(counts[0], path, ln)?;
    let nf: usize = parse_num(counts[1], path, ln)?;
    if nf == 0 || nv == 0 {
        return Err(Error::EmptyMesh);
    }
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "unexpected end of file in vertex list"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(path, ln, "vertex needs 3 coordinates"));
        }
        vertices.push(Vector3::new(
            parse_num(toks[0], path, ln)?,
            parse_num(toks[1], path, ln)?,
            parse_num(toks[2], path, ln)?,
        ));
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "unexpected end of file in face list"))?;
        triangles.push(parse_face(l, nv, path, ln)?);
    }
    Ok((vertices, triangles))
}

fn parse_face(l: &str, nv: usize, path: &str, ln: usize) -> Result<[usize; 3]> {
    let toks: Vec<&str> = l.split_whitespace().collect();
    let count: usize = parse_num(
        toks.first().ok_or_else(|| parse_err(path, ln, "empty face"))?,
        path,
        ln,
    )?;
    if count != 3 {
        return Err(parse_err(path, ln, format!("only triangles are supported, got {count}-gon")));
    }
    if toks.len() < 4 {
        return Err(parse_err(path, ln, "face needs 3 vertex indices"));
    }
    let mut tri = [0usize; 3];
    for (k, t) in tri.iter_mut().enumerate() {
        *t = parse_num(toks[k + 1], path, ln)?;
        if *t >= nv {
            return Err(parse_err(path, ln, format!("vertex index {} out of range", *t)));
        }
    }
    Ok(tri)
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
    list_prop: Option<String>,
}

fn parse_ply(text: &str, path: &str) -> Result<Parsed> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "expected \"ply\"")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, "unterminated PLY header"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(Error::Unsupported(format!("{path}: PLY format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: parse_num(count, path, ln)?,
                props: Vec::new(),
                list_prop: None,
            }),
            ["property", "list", _, _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, ln, "property before element"))?;
                el.list_prop = Some(name.to_string());
            }
            ["property", _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, ln, "property before element"))?;
                el.props.push(name.to_string());
            }
            _ => return Err(parse_err(path, ln, format!("unrecognized header line {l:?}"))),
        }
    }

    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut nv = 0usize;
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let idx = |p: &str| el.props.iter().position(|q| q == p);
                let (ix, iy, iz) = match (idx("x"), idx("y"), idx("z")) {
                    (Some(x), Some(y), Some(z)) => (x, y, z),
                    _ => return Err(parse_err(path, 0, "vertex element lacks x, y, z")),
                };
                nv = el.count;
                for _ in 0..el.count {
                    let (ln, l) = body
                        .next()
                        .ok_or_else(|| parse_err(path, 0, "unexpected end of vertex data"))?;
                    let toks: Vec<&str> = l.split_whitespace().collect();
                    if toks.len() < el.props.len() {
                        return Err(parse_err(path, ln, "too few vertex properties"));
                    }
                    vertices.push(Vector3::new(
                        parse_num(toks[ix], path, ln)?,
                        parse_num(toks[iy], path, ln)?,
                        parse_num(toks[iz], path, ln)?,
                    ));
                }
            }
            "face" => {
                match el.list_prop.as_deref() {
                    Some("vertex_indices") | Some("vertex_index") => {}
                    _ => return Err(parse_err(path, 0, "face element lacks vertex_indices")),
                }
                if el.count == 0 {
                    return Err(Error::EmptyMesh);
                }
                for _ in 0..el.count {
                    let (ln, l) = body
                        .next()
                        .ok_or_else(|| parse_err(path, 0, "unexpected end of face data"))?;
                    triangles.push(parse_face(l, nv, path, ln)?);
                }
            }
            _ => {
                for _ in 0..el.count {
                    body.next();
                }
            }
        }
    }
    if vertices.is_empty() || triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    Ok((vertices, triangles))
}

/// Writes a mesh as OFF with full f64 precision.
pub fn write_off(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "OFF");
    let _ = writeln!(s, "{} {} 0", mesh.num_vertices(), mesh.num_triangles());
    for v in mesh.vertices() {
        let _ = writeln!(s, "{:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    std::fs::write(path, s)?;
    Ok(())
}
