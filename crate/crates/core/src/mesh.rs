//! Triangle meshes, surface sampling, shape metrics and file formats
//! (OBJ, binary PLY, OCC1 occupancy grids).

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{invalid, CoreError, Result};
use crate::knn::KdTree;
use crate::marching_cubes::Grid;
use crate::pose::Vec3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    /// Unnormalized normal `(b−a)×(c−a)`.
    pub fn triangle_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle(t);
        cross(sub(b, a), sub(c, a))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let n = self.triangle_normal(t);
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub(crate) fn drop_degenerate(&mut self) {
        let keep: Vec<bool> = (0..self.triangles.len()).map(|t| self.triangle_area(t) > 0.0).collect();
        let mut k = keep.iter();
        self.triangles.retain(|_| *k.next().unwrap_or(&true));
    }

    /// Every undirected edge is shared by exactly two triangles with opposite
    /// orientations.
    pub fn is_watertight(&self) -> bool {
        let mut count: HashMap<(u32, u32), i32> = HashMap::new();
        for tri in &self.triangles {
            for e in 0..3 {
                let (a, b) = (tri[e], tri[(e + 1) % 3]);
                *count.entry((a, b)).or_default() += 1;
            }
        }
        count.iter().all(|(&(a, b), &n)| n == 1 && count.get(&(b, a)) == Some(&1))
    }

    pub fn transformed(&self, f: impl Fn(Vec3) -> Vec3) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn write_obj<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    pub fn read_obj<R: Read>(mut input: R) -> Result<Mesh> {
        let mut text = String::new();
        input.read_to_string(&mut text).map_err(|e| fmt_err("obj", e.to_string()))?;
        let mut mesh = Mesh::default();
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let xs: Vec<f64> = parts.map(|p| p.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| fmt_err("obj", e.to_string()))?;
                    if xs.len() != 3 {
                        return Err(fmt_err("obj", format!("vertex with {} coordinates", xs.len())));
                    }
                    mesh.vertices.push([xs[0], xs[1], xs[2]]);
                }
                Some("f") => {
                    let ids: Vec<u32> = parts
                        .map(|p| p.split('/').next().unwrap_or("").parse::<u32>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| fmt_err("obj", e.to_string()))?;
                    if ids.len() != 3 || ids.iter().any(|&i| i == 0 || i as usize > mesh.vertices.len()) {
                        return Err(fmt_err("obj", format!("bad face {ids:?}")));
                    }
                    mesh.triangles.push([ids[0] - 1, ids[1] - 1, ids[2] - 1]);
                }
                _ => {}
            }
        }
        Ok(mesh)
    }

    /// Binary little-endian PLY with float vertices and uchar/int faces.
    pub fn write_ply<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(
            out,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.triangles.len()
        )?;
        for v in &self.vertices {
            for c in v {
                out.write_all(&(*c as f32).to_le_bytes())?;
            }
        }
        for t in &self.triangles {
            out.write_all(&[3u8])?;
            for i in t {
                out.write_all(&(*i as i32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

fn fmt_err(format: &'static str, msg: impl Into<String>) -> CoreError {
    CoreError::Format { format, msg: msg.into() }
}

/// Area-weighted uniform samples on the surface.
pub fn surface_sample<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if mesh.is_empty() {
        return invalid("surface_sample", "empty mesh");
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += mesh.triangle_area(t);
        cumulative.push(acc);
    }
    if !(acc > 0.0) {
        return invalid("surface_sample", "zero total area");
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r: f64 = rng.random::<f64>() * acc;
        let t = cumulative.partition_point(|&c| c <= r).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangle(t);
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        out.push(std::array::from_fn(|k| wa * a[k] + wb * b[k] + wc * c[k]));
    }
    Ok(out)
}

fn nearest_sq(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::new(to);
    from.iter()
        .map(|p| tree.nearest(p).map(|(_, d)| d).unwrap_or(f64::INFINITY))
        .collect()
}

fn non_empty(op: &'static str, p: &[Vec3], q: &[Vec3]) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return invalid(op, "empty point set");
    }
    Ok(())
}

/// Symmetric Chamfer distance: the average of both directions' mean squared
/// nearest-neighbor distance.
pub fn chamfer_distance(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    non_empty("chamfer", p, q)?;
    let pq: f64 = nearest_sq(p, q).iter().sum::<f64>() / p.len() as f64;
    let qp: f64 = nearest_sq(q, p).iter().sum::<f64>() / q.len() as f64;
    Ok(0.5 * (pq + qp))
}

/// F-score in percent at distance threshold `tau`.
pub fn f_score(p: &[Vec3], q: &[Vec3], tau: f64) -> Result<f64> {
    non_empty("f_score", p, q)?;
    if !(tau > 0.0) {
        return invalid("f_score", format!("threshold {tau} must be positive"));
    }
    let t2 = tau * tau;
    let precision = nearest_sq(p, q).iter().filter(|&&d| d <= t2).count() as f64 / p.len() as f64;
    let recall = nearest_sq(q, p).iter().filter(|&&d| d <= t2).count() as f64 / q.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

pub const OCC_MAGIC: &[u8; 4] = b"OCC1";

/// `OCC1`, three u32 extents, then 32-bit values x-fastest.
pub fn write_occ<W: Write>(grid: &Grid, mut out: W) -> std::io::Result<()> {
    out.write_all(OCC_MAGIC)?;
    for r in grid.res {
        out.write_all(&(r as u32).to_le_bytes())?;
    }
    for v in &grid.values {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads values and extents; the spatial frame is not stored.
pub fn read_occ<R: Read>(mut input: R) -> Result<([usize; 3], Vec<f32>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| fmt_err("occ", e.to_string()))?;
    if bytes.len() < 16 || &bytes[..4] != OCC_MAGIC {
        return Err(fmt_err("occ", "missing OCC1 header"));
    }
    let res: [usize; 3] = std::array::from_fn(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize);
    let n = res[0] * res[1] * res[2];
    if bytes.len() != 16 + 4 * n {
        return Err(fmt_err("occ", format!("expected {} value bytes, found {}", 4 * n, bytes.len() - 16)));
    }
    let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((res, values))
}
