//! ASCII OFF and PLY ingestion, plus area-weighted surface sampling.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};

/// Vertices plus triangles. Polygons are fan-triangulated on load.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn to_cloud(&self) -> Result<PointCloud> {
        PointCloud::new(self.vertices.clone())
    }

    fn triangle_area(&self, f: &[usize; 3]) -> f64 {
        let [a, b, c] = f.map(|i| self.vertices[i]);
        (b - a).cross(&(c - a)).norm() / 2.0
    }

    /// Draws `n` points uniformly by area over the triangles, or uniformly
    /// over the vertices when there are no faces of positive area.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Point3>> {
        if self.vertices.is_empty() {
            return Err(Error::InvalidInput("mesh has no vertices".into()));
        }
        let areas: Vec<f64> = self.faces.iter().map(|f| self.triangle_area(f)).collect();
        let Ok(pick) = WeightedIndex::new(&areas) else {
            return Ok((0..n)
                .map(|_| self.vertices[rng.random_range(0..self.vertices.len())])
                .collect());
        };
        Ok((0..n)
            .map(|_| {
                let [a, b, c] = self.faces[pick.sample(rng)].map(|i| self.vertices[i]);
                // Square-root warp gives a uniform density on the triangle.
                let s = rng.random::<f64>().sqrt();
                let t = rng.random::<f64>();
                a * (1.0 - s) + b * (s * (1.0 - t)) + c * (s * t)
            })
            .collect())
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Non-blank, non-comment lines with their 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn num<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    tok.parse().map_err(|_| parse_err(line, format!("bad {what} `{tok}`")))
}

fn finite_point(xyz: [f64; 3], line: usize) -> Result<Point3> {
    if xyz.iter().all(|v| v.is_finite()) {
        Ok(Point3::new(xyz[0], xyz[1], xyz[2]))
    } else {
        Err(parse_err(line, "non-finite coordinate"))
    }
}

fn push_polygon(faces: &mut Vec<[usize; 3]>, poly: &[usize], n_vertices: usize, line: usize) -> Result<()> {
    if let Some(&bad) = poly.iter().find(|&&i| i >= n_vertices) {
        return Err(parse_err(line, format!("vertex index {bad} out of range ({n_vertices} vertices)")));
    }
    for w in 1..poly.len().saturating_sub(1) {
        faces.push([poly[0], poly[w], poly[w + 1]]);
    }
    Ok(())
}

pub fn parse_off(text: &str) -> Result<Mesh> {
    let mut lines = content_lines(text);
    let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let Some(rest) = header.strip_prefix("OFF") else {
        return Err(parse_err(hl, "expected `OFF` header"));
    };
    // Some writers put the counts on the header line itself.
    let (cl, counts) = if rest.trim().is_empty() {
        lines.next().ok_or_else(|| parse_err(hl + 1, "missing counts"))?
    } else {
        (hl, rest.trim())
    };
    let mut tok = counts.split_whitespace();
    let nv: usize = num(tok.next(), cl, "vertex count")?;
    let nf: usize = num(tok.next(), cl, "face count")?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (l, s) = lines.next().ok_or_else(|| parse_err(cl, format!("expected {nv} vertices")))?;
        let mut t = s.split_whitespace();
        let xyz = [num(t.next(), l, "x")?, num(t.next(), l, "y")?, num(t.next(), l, "z")?];
        vertices.push(finite_point(xyz, l)?);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (l, s) = lines.next().ok_or_else(|| parse_err(cl, format!("expected {nf} faces")))?;
        let mut t = s.split_whitespace();
        let k: usize = num(t.next(), l, "polygon size")?;
        let poly = (0..k).map(|_| num(t.next(), l, "vertex index")).collect::<Result<Vec<usize>>>()?;
        push_polygon(&mut faces, &poly, nv, l)?;
    }
    Ok(Mesh { vertices, faces })
}

#[derive(Debug)]
enum Property {
    Scalar(String),
    List,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Parses PLY from raw bytes; the header decides the encoding, so binary
/// bodies are rejected before any attempt to decode them as text.
pub fn parse_ply(bytes: &[u8]) -> Result<Mesh> {
    let end = b"end_header";
    let Some(pos) = bytes.windows(end.len()).position(|w| w == end) else {
        return Err(parse_err(1, "missing end_header"));
    };
    let header_end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |p| pos + p + 1);
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| parse_err(1, "header is not text"))?;

    let mut elements: Vec<Element> = Vec::new();
    let mut hlines = header.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match hlines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "expected `ply` magic")),
    }
    let mut ascii = false;
    for (l, s) in hlines {
        let mut t = s.split_whitespace();
        match t.next() {
            Some("format") => match t.next() {
                Some("ascii") => ascii = true,
                Some(enc @ ("binary_little_endian" | "binary_big_endian")) => {
                    return Err(Error::UnsupportedEncoding(format!("PLY format {enc}")));
                }
                other => return Err(parse_err(l, format!("unknown format {other:?}"))),
            },
            Some("element") => {
                let name = t.next().ok_or_else(|| parse_err(l, "element without name"))?.to_string();
                let count = num(t.next(), l, "element count")?;
                elements.push(Element { name, count, props: Vec::new() });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| parse_err(l, "property before any element"))?;
                let toks: Vec<&str> = t.collect();
                let prop = match toks.as_slice() {
                    ["list", _, _, _] => Property::List,
                    [_, name] => Property::Scalar(name.to_string()),
                    _ => return Err(parse_err(l, format!("malformed property `{s}`"))),
                };
                el.props.push(prop);
            }
            Some("comment" | "obj_info" | "end_header") | None => {}
            Some(other) => return Err(parse_err(l, format!("unknown header keyword `{other}`"))),
        }
    }
    if !ascii {
        return Err(parse_err(1, "missing format line"));
    }
    let body_first_line = header.lines().count() + 1;
    let body = std::str::from_utf8(&bytes[header_end..]).map_err(|_| parse_err(body_first_line, "body is not text"))?;
    let mut lines = body
        .lines()
        .enumerate()
        .map(|(i, l)| (i + body_first_line, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        let axis = |n: &str| el.props.iter().position(|p| matches!(p, Property::Scalar(s) if s == n));
        for _ in 0..el.count {
            let (l, s) = lines.next().ok_or_else(|| parse_err(body_first_line, format!("expected {} `{}` rows", el.count, el.name)))?;
            let mut t = s.split_whitespace();
            let mut scalars = Vec::new();
            let mut lists = Vec::new();
            for p in &el.props {
                match p {
                    Property::Scalar(_) => scalars.push(num::<f64>(t.next(), l, "value")?),
                    Property::List => {
                        let k: usize = num(t.next(), l, "list length")?;
                        let v = (0..k).map(|_| num::<usize>(t.next(), l, "list entry")).collect::<Result<Vec<_>>>()?;
                        lists.push(v);
                        scalars.push(f64::NAN);
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => {
                    let (Some(x), Some(y), Some(z)) = (axis("x"), axis("y"), axis("z")) else {
                        return Err(parse_err(l, "vertex element lacks x/y/z"));
                    };
                    vertices.push(finite_point([scalars[x], scalars[y], scalars[z]], l)?);
                }
                "face" => {
                    let poly = lists.first().ok_or_else(|| parse_err(l, "face element has no index list"))?;
                    push_polygon(&mut faces, poly, usize::MAX, l)?;
                }
                _ => {}
            }
        }
    }
    if let Some(&bad) = faces.iter().flatten().find(|&&i| i >= vertices.len()) {
        return Err(parse_err(body_first_line, format!("face index {bad} out of range ({} vertices)", vertices.len())));
    }
    Ok(Mesh { vertices, faces })
}

/// Loads an ASCII OFF or PLY file, chosen by content.
pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"ply") {
        parse_ply(&bytes)
    } else if bytes.starts_with(b"OFF") {
        let text = std::str::from_utf8(&bytes).map_err(|_| parse_err(1, "file is not text"))?;
        parse_off(text)
    } else {
        Err(parse_err(1, "unrecognized mesh format (expected OFF or PLY)"))
    }
}

pub fn off_string(mesh: &Mesh) -> String {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertices.len(), mesh.faces.len());
    for p in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn ply_string(mesh: &Mesh) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    );
    for p in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}
