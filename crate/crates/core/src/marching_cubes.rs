//! Marching cubes with a case table derived from face-crossing rules.
//!
//! Corners and edges follow the classic numbering (corner `i` at bit offsets
//! `(x, y, z)` = 0:(0,0,0) 1:(1,0,0) 2:(1,1,0) 3:(0,1,0) 4:(0,0,1) 5:(1,0,1)
//! 6:(1,1,1) 7:(0,1,1)). On each face, an entry crossing is joined to the next
//! exit crossing in counter-clockwise order, which separates diagonal inside
//! corners on ambiguous faces. Adjacent cubes agree on every shared face, so
//! the output is watertight wherever the field is closed.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::mesh::Mesh;
use crate::pose::Vec3;

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Face corner cycles, counter-clockwise seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [3, 7, 6, 2],
    [0, 4, 7, 3],
    [1, 2, 6, 5],
];

fn edge_of(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("corners share an edge")
}

fn edges_share_face(a: usize, b: usize) -> bool {
    FACES.iter().any(|f| {
        let on = |e: usize| f.contains(&EDGES[e][0]) && f.contains(&EDGES[e][1]);
        on(a) && on(b)
    })
}

/// Loop-center pseudo-edges start at this index in triangle entries.
pub const LOOP_CENTER: usize = 12;

/// Crossing loops (as edge cycles) for one inside-corner bitmask.
pub fn case_loops(case: u8) -> Vec<Vec<usize>> {
    let inside = |c: usize| case & (1 << c) != 0;
    let mut next = [usize::MAX; 12];
    for face in FACES {
        // (edge, is_entry) in traversal order
        let mut crossings = Vec::with_capacity(4);
        for i in 0..4 {
            let a = face[i];
            let b = face[(i + 1) % 4];
            if inside(a) != inside(b) {
                crossings.push((edge_of(a, b), !inside(a)));
            }
        }
        let n = crossings.len();
        for i in 0..n {
            let (edge, entry) = crossings[i];
            if entry {
                let exit = (1..n)
                    .map(|k| crossings[(i + k) % n])
                    .find(|&(_, is_entry)| !is_entry)
                    .expect("crossings alternate");
                next[edge] = exit.0;
            }
        }
    }
    let mut visited = [false; 12];
    let mut loops = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || visited[start] {
            continue;
        }
        let mut cycle = Vec::new();
        let mut e = start;
        while !visited[e] {
            visited[e] = true;
            cycle.push(e);
            e = next[e];
        }
        loops.push(cycle);
    }
    loops
}

/// Triangles for one case. Entries below [`LOOP_CENTER`] are edge indices;
/// `LOOP_CENTER + l` is the centroid of loop `l`.
///
/// A fan diagonal lying in a cube face could coincide with one emitted by the
/// neighboring cube, so fans use an apex whose diagonals avoid shared faces,
/// falling back to a loop centroid when no such apex exists.
pub fn case_triangles(case: u8) -> Vec<[usize; 3]> {
    let mut tris = Vec::new();
    for (l, cycle) in case_loops(case).iter().enumerate() {
        let k = cycle.len();
        let apex = (0..k).find(|&a| (2..k - 1).all(|j| !edges_share_face(cycle[a], cycle[(a + j) % k])));
        match apex {
            Some(a) => {
                for j in 1..k - 1 {
                    tris.push([cycle[a], cycle[(a + j) % k], cycle[(a + j + 1) % k]]);
                }
            }
            None => {
                for j in 0..k {
                    tris.push([LOOP_CENTER + l, cycle[j], cycle[(j + 1) % k]]);
                }
            }
        }
    }
    tris
}

/// Per cube configuration: edge loops and the triangles that fan them.
type CaseTable = Vec<(Vec<Vec<usize>>, Vec<[usize; 3]>)>;

fn table() -> &'static CaseTable {
    static TABLE: OnceLock<CaseTable> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(|c| (case_loops(c), case_triangles(c))).collect())
}

/// Regular scalar grid of `res³` samples, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub res: [usize; 3],
    pub origin: Vec3,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl Grid {
    /// Samples `f` on a cube of side `extent` centered at `center`.
    pub fn sample(res: usize, center: Vec3, extent: f64, f: impl Fn(Vec3) -> f64) -> Self {
        let spacing = extent / (res - 1) as f64;
        let origin = [center[0] - extent / 2.0, center[1] - extent / 2.0, center[2] - extent / 2.0];
        let mut values = Vec::with_capacity(res * res * res);
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    values.push(f([
                        origin[0] + i as f64 * spacing,
                        origin[1] + j as f64 * spacing,
                        origin[2] + k as f64 * spacing,
                    ]));
                }
            }
        }
        Self {
            res: [res; 3],
            origin,
            spacing,
            values,
        }
    }

    pub fn position(&self, idx: [usize; 3]) -> Vec3 {
        std::array::from_fn(|a| self.origin[a] + idx[a] as f64 * self.spacing)
    }

    pub fn points(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.values.len());
        for k in 0..self.res[2] {
            for j in 0..self.res[1] {
                for i in 0..self.res[0] {
                    out.push(self.position([i, j, k]));
                }
            }
        }
        out
    }
}

const T_CLAMP: f64 = 1e-6;

/// Iso-surface `value = iso`, inside where `value > iso`. The grid is padded
/// by one outside layer so that surfaces touching the boundary are closed.
pub fn marching_cubes(grid: &Grid, iso: f64) -> Mesh {
    let [nx, ny, nz] = grid.res;
    let pad = iso - 1.0;
    // padded coordinates: p = idx + 1, valid range 0..=n+1
    let (px, py) = (nx + 2, ny + 2);
    let value = |p: [usize; 3]| -> f64 {
        if p[0] == 0 || p[1] == 0 || p[2] == 0 || p[0] > nx || p[1] > ny || p[2] > nz {
            pad
        } else {
            grid.values[(p[0] - 1) + nx * ((p[1] - 1) + ny * (p[2] - 1))]
        }
    };
    let position = |p: [usize; 3]| -> Vec3 { std::array::from_fn(|a| grid.origin[a] + (p[a] as f64 - 1.0) * grid.spacing) };
    let table = table();
    let mut mesh = Mesh::default();
    let mut vertex_of_edge: HashMap<usize, u32> = HashMap::new();
    // Vertices on lattice edges are shared between the cubes around the edge.
    let edge_vertex = |e: usize, corner_pos: &[[usize; 3]; 8], vals: &[f64; 8], mesh: &mut Mesh, cache: &mut HashMap<usize, u32>| -> u32 {
        let [c0, c1] = EDGES[e];
        // canonical direction: from the lower lattice corner
        let (a, b) = if corner_pos[c0] <= corner_pos[c1] { (c0, c1) } else { (c1, c0) };
        let pa = corner_pos[a];
        let axis = (0..3).find(|&ax| corner_pos[b][ax] != pa[ax]).expect("edge axis");
        let key = ((pa[2] * py + pa[1]) * px + pa[0]) * 3 + axis;
        *cache.entry(key).or_insert_with(|| {
            let t = ((iso - vals[a]) / (vals[b] - vals[a])).clamp(T_CLAMP, 1.0 - T_CLAMP);
            let xa = position(pa);
            let xb = position(corner_pos[b]);
            mesh.vertices.push(std::array::from_fn(|d| xa[d] + t * (xb[d] - xa[d])));
            (mesh.vertices.len() - 1) as u32
        })
    };
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                let base = [i, j, k];
                let corner_pos: [[usize; 3]; 8] =
                    std::array::from_fn(|c| std::array::from_fn(|a| base[a] + CORNERS[c][a]));
                let vals: [f64; 8] = std::array::from_fn(|c| value(corner_pos[c]));
                let mut case = 0u8;
                for (c, v) in vals.iter().enumerate() {
                    if *v > iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let (loops, tris) = &table[case as usize];
                let mut local = [u32::MAX; LOOP_CENTER + 4];
                for tri in tris {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        if e >= LOOP_CENTER && local[e] == u32::MAX {
                            let mut c = [0.0; 3];
                            for &le in &loops[e - LOOP_CENTER] {
                                let v = edge_vertex(le, &corner_pos, &vals, &mut mesh, &mut vertex_of_edge);
                                let p = mesh.vertices[v as usize];
                                for d in 0..3 {
                                    c[d] += p[d] / loops[e - LOOP_CENTER].len() as f64;
                                }
                            }
                            mesh.vertices.push(c);
                            local[e] = (mesh.vertices.len() - 1) as u32;
                        } else if local[e] == u32::MAX {
                            local[e] = edge_vertex(e, &corner_pos, &vals, &mut mesh, &mut vertex_of_edge);
                        }
                        ids[slot] = local[e];
                    }
                    mesh.triangles.push(ids);
                }
            }
        }
    }
    mesh.drop_degenerate();
    mesh
}
