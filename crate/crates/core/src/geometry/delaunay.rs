//! Incremental Delaunay triangulation.
//!
//! Vertices are inserted in lexicographic `(x, y)` order, so every new point
//! lies outside the current convex hull. Each insertion fans the point to the
//! hull edges it sees and restores the Delaunay property with Lawson flips.
//! Orientation and in-circle tests are exact; a flip happens only when the
//! opposite vertex is strictly inside the circumcircle, so co-circular
//! configurations resolve by insertion order, which depends only on the
//! coordinates.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::PixelPoint;

use super::{incircle, orient2d};

/// Input points closer than this (in pixels) are merged into one vertex.
pub const DUPLICATE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Triangulation {
    /// Unique vertices in lexicographic `(x, y)` order.
    pub vertices: Vec<PixelPoint>,
    /// Counter-clockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    /// `neighbors[t][i]` is the triangle across the edge opposite vertex `i`.
    pub neighbors: Vec<[Option<usize>; 3]>,
    /// Vertex index of every input point after duplicate merging.
    pub input_to_vertex: Vec<usize>,
    /// For every vertex, the input point it was taken from.
    pub vertex_to_input: Vec<usize>,
    /// Set when all points are collinear (no triangles).
    pub collinear: bool,
}

impl Triangulation {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_points(&self, t: usize) -> [PixelPoint; 3] {
        self.triangles[t].map(|v| self.vertices[v])
    }
}

/// Delaunay triangulation of `points`. Near-duplicates are merged first; an
/// all-collinear input yields an empty triangulation with `collinear` set.
pub fn delaunay(points: &[PixelPoint]) -> Result<Triangulation> {
    if points.len() < 3 {
        return Err(Error::invalid(format!(
            "delaunay needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("delaunay input contains non-finite points"));
    }
    let (vertices, input_to_vertex, vertex_to_input) = merge_duplicates(points);
    let mut builder = Builder {
        pts: &vertices,
        tris: Vec::new(),
        nbr: Vec::new(),
    };
    let collinear = !builder.run();
    let Builder { tris, nbr, .. } = builder;
    Ok(Triangulation {
        vertices,
        triangles: tris,
        neighbors: nbr,
        input_to_vertex,
        vertex_to_input,
        collinear,
    })
}

fn lex_cmp(a: &PixelPoint, b: &PixelPoint) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

fn merge_duplicates(points: &[PixelPoint]) -> (Vec<PixelPoint>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| lex_cmp(&points[i], &points[j]).then(i.cmp(&j)));

    let eps2 = DUPLICATE_EPS * DUPLICATE_EPS;
    let mut vertices: Vec<PixelPoint> = Vec::new();
    let mut vertex_to_input = Vec::new();
    let mut input_to_vertex = vec![usize::MAX; points.len()];
    for (pos, &i) in order.iter().enumerate() {
        let p = points[i];
        // earlier points in sorted order within eps along x
        let mut merged = None;
        for &j in order[..pos].iter().rev() {
            if p.x - points[j].x > DUPLICATE_EPS {
                break;
            }
            if points[j].dist2(&p) <= eps2 {
                merged = Some(input_to_vertex[j]);
            }
        }
        input_to_vertex[i] = match merged {
            Some(v) => v,
            None => {
                vertices.push(p);
                vertex_to_input.push(i);
                vertices.len() - 1
            }
        };
    }
    (vertices, input_to_vertex, vertex_to_input)
}

struct Builder<'a> {
    pts: &'a [PixelPoint],
    tris: Vec<[usize; 3]>,
    nbr: Vec<[Option<usize>; 3]>,
}

impl Builder<'_> {
    /// Returns false when every vertex is collinear.
    fn run(&mut self) -> bool {
        let n = self.pts.len();
        if n < 3 {
            return false;
        }
        let p = self.pts;
        let Some(k) = (2..n).find(|&k| orient2d(p[0], p[1], p[k]) != 0.0) else {
            return false;
        };
        self.fan_from_chain(k);
        let mut stack = Vec::new();
        for v in k + 1..n {
            self.insert_outside(v, &mut stack);
        }
        true
    }

    fn push_tri(&mut self, t: [usize; 3]) -> usize {
        debug_assert!(orient2d(self.pts[t[0]], self.pts[t[1]], self.pts[t[2]]) > 0.0);
        self.tris.push(t);
        self.nbr.push([None; 3]);
        self.tris.len() - 1
    }

    /// Links the still-open edges of freshly created triangles to each other.
    fn link(&mut self, fresh: &[usize]) {
        let mut open: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for &t in fresh {
            for e in 0..3 {
                if self.nbr[t][e].is_some() {
                    continue;
                }
                let a = self.tris[t][(e + 1) % 3];
                let b = self.tris[t][(e + 2) % 3];
                let key = (a.min(b), a.max(b));
                if let Some((u, f)) = open.remove(&key) {
                    self.nbr[t][e] = Some(u);
                    self.nbr[u][f] = Some(t);
                } else {
                    open.insert(key, (t, e));
                }
            }
        }
    }

    /// Vertices `0..k` are collinear (and sorted along their line); vertex `k`
    /// is the first point off that line.
    fn fan_from_chain(&mut self, k: usize) {
        let ccw = orient2d(self.pts[0], self.pts[1], self.pts[k]) > 0.0;
        let fresh: Vec<usize> = (0..k - 1)
            .map(|s| {
                if ccw {
                    self.push_tri([s, s + 1, k])
                } else {
                    self.push_tri([s + 1, s, k])
                }
            })
            .collect();
        self.link(&fresh);
    }

    fn insert_outside(&mut self, v: usize, stack: &mut Vec<(usize, usize)>) {
        let p = self.pts[v];
        let mut visible = Vec::new();
        for t in 0..self.tris.len() {
            for e in 0..3 {
                if self.nbr[t][e].is_none() {
                    let a = self.tris[t][(e + 1) % 3];
                    let b = self.tris[t][(e + 2) % 3];
                    if orient2d(self.pts[a], self.pts[b], p) < 0.0 {
                        visible.push((t, e, a, b));
                    }
                }
            }
        }
        debug_assert!(!visible.is_empty(), "sorted insertion keeps points outside the hull");
        let mut fresh = Vec::with_capacity(visible.len());
        for (t, e, a, b) in visible {
            let nt = self.push_tri([b, a, v]);
            self.nbr[nt][2] = Some(t);
            self.nbr[t][e] = Some(nt);
            fresh.push(nt);
        }
        self.link(&fresh);
        stack.extend(fresh.iter().map(|&t| (t, 2)));
        self.legalize(stack);
    }

    fn replace_neighbor(&mut self, n: Option<usize>, old: usize, new: usize) {
        if let Some(n) = n {
            for slot in self.nbr[n].iter_mut() {
                if *slot == Some(old) {
                    *slot = Some(new);
                }
            }
        }
    }

    /// Each stack entry `(t, i)` names the edge opposite the newly inserted
    /// vertex `tris[t][i]`.
    fn legalize(&mut self, stack: &mut Vec<(usize, usize)>) {
        while let Some((t, i)) = stack.pop() {
            let Some(u) = self.nbr[t][i] else { continue };
            let tri = self.tris[t];
            let (a, b, c) = (tri[i], tri[(i + 1) % 3], tri[(i + 2) % 3]);
            let ut = self.tris[u];
            let j = (0..3)
                .find(|&j| ut[j] != b && ut[j] != c)
                .expect("adjacent triangles share an edge");
            let d = ut[j];
            debug_assert_eq!((ut[(j + 1) % 3], ut[(j + 2) % 3]), (c, b));
            if incircle(self.pts[a], self.pts[b], self.pts[c], self.pts[d]) <= 0.0 {
                continue;
            }
            let n_bd = self.nbr[u][(j + 1) % 3];
            let n_dc = self.nbr[u][(j + 2) % 3];
            let n_ca = self.nbr[t][(i + 1) % 3];
            let n_ab = self.nbr[t][(i + 2) % 3];

            self.tris[t] = [a, b, d];
            self.nbr[t] = [n_bd, Some(u), n_ab];
            self.tris[u] = [a, d, c];
            self.nbr[u] = [n_dc, n_ca, Some(t)];
            self.replace_neighbor(n_bd, u, t);
            self.replace_neighbor(n_ca, t, u);

            stack.push((t, 0));
            stack.push((u, 0));
        }
    }
}
