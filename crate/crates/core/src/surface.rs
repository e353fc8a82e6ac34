//! Surfaces for point-to-surface distances: exact ellipsoids and triangle meshes.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::shape::Point;

/// Bisection iterations; enough to exhaust f64 precision on the unit interval.
const MAX_BISECT: usize = 1100;

fn robust_length(v: &[f64]) -> f64 {
    let m = v.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    if m == 0.0 {
        return 0.0;
    }
    m * v.iter().map(|x| (x / m).powi(2)).sum::<f64>().sqrt()
}

/// Root of `Σ (n_i / (s + r_i))² - 1` for the closest-point parameter (Eberly).
fn root(r: &[f64], z: &[f64], g: f64) -> f64 {
    let n: Vec<f64> = r.iter().zip(z).map(|(r, z)| r * z).collect();
    let last = z.len() - 1;
    let mut s0 = z[last] - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { robust_length(&n) - 1.0 };
    let mut s = 0.0;
    for _ in 0..MAX_BISECT {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let g: f64 = n.iter().zip(r).map(|(n, r)| (n / (s + r)).powi(2)).sum::<f64>() - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Distance from `(y0, y1)`, both >= 0, to the ellipse with semi-axes `e0 >= e1 > 0`.
fn ellipse_distance(e0: f64, e1: f64, y0: f64, y1: f64) -> f64 {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let (z0, z1) = (y0 / e0, y1 / e1);
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g == 0.0 {
                return 0.0;
            }
            let r0 = (e0 / e1).powi(2);
            let s = root(&[r0, 1.0], &[z0, z1], g);
            let x0 = r0 * y0 / (s + r0);
            let x1 = y1 / (s + 1.0);
            ((x0 - y0).powi(2) + (x1 - y1).powi(2)).sqrt()
        } else {
            (y1 - e1).abs()
        }
    } else {
        let (numer, denom) = (e0 * y0, e0 * e0 - e1 * e1);
        if numer < denom {
            let xde = numer / denom;
            let x0 = e0 * xde;
            let x1 = e1 * (1.0 - xde * xde).max(0.0).sqrt();
            ((x0 - y0).powi(2) + x1 * x1).sqrt()
        } else {
            (y0 - e0).abs()
        }
    }
}

/// Distance from `y >= 0` to the ellipsoid with semi-axes `e0 >= e1 >= e2 > 0`.
fn ellipsoid_distance_sorted(e: [f64; 3], y: [f64; 3]) -> f64 {
    let [e0, e1, e2] = e;
    let [y0, y1, y2] = y;
    if y2 > 0.0 {
        if y1 > 0.0 {
            if y0 > 0.0 {
                let z = [y0 / e0, y1 / e1, y2 / e2];
                let g = z.iter().map(|v| v * v).sum::<f64>() - 1.0;
                if g == 0.0 {
                    return 0.0;
                }
                let r = [(e0 / e2).powi(2), (e1 / e2).powi(2), 1.0];
                let s = root(&r, &z, g);
                let x = [r[0] * y0 / (s + r[0]), r[1] * y1 / (s + r[1]), y2 / (s + 1.0)];
                ((x[0] - y0).powi(2) + (x[1] - y1).powi(2) + (x[2] - y2).powi(2)).sqrt()
            } else {
                ellipse_distance(e1, e2, y1, y2)
            }
        } else if y0 > 0.0 {
            ellipse_distance(e0, e2, y0, y2)
        } else {
            (y2 - e2).abs()
        }
    } else {
        let denom = [e0 * e0 - e2 * e2, e1 * e1 - e2 * e2];
        let numer = [e0 * y0, e1 * y1];
        if numer[0] < denom[0] && numer[1] < denom[1] {
            let xde = [numer[0] / denom[0], numer[1] / denom[1]];
            let discr = 1.0 - xde[0] * xde[0] - xde[1] * xde[1];
            if discr > 0.0 {
                let x = [e0 * xde[0], e1 * xde[1], e2 * discr.sqrt()];
                return ((x[0] - y0).powi(2) + (x[1] - y1).powi(2) + x[2] * x[2]).sqrt();
            }
        }
        ellipse_distance(e0, e1, y0, y1)
    }
}

/// Unsigned distance from `p` to the axis-aligned ellipsoid surface.
pub fn ellipsoid_distance(center: Point, radii: [f64; 3], p: Point) -> f64 {
    let y = [0, 1, 2].map(|a| (p[a] - center[a]).abs());
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| radii[b].total_cmp(&radii[a]));
    ellipsoid_distance_sorted(order.map(|a| radii[a]), order.map(|a| y[a]))
}

/// Signed distance (negative inside).
pub fn ellipsoid_signed_distance(center: Point, radii: [f64; 3], p: Point) -> f64 {
    let d = ellipsoid_distance(center, radii, p);
    let q: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
    if q < 1.0 {
        -d
    } else {
        d
    }
}

/// Outward unit normal of the ellipsoid level set through `p`.
pub fn ellipsoid_normal(center: Point, radii: [f64; 3], p: Point) -> Point {
    let g = [0, 1, 2].map(|a| (p[a] - center[a]) / (radii[a] * radii[a]));
    let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    g.map(|v| v / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: Point, a: Point, b: Point, c: Point) -> Point {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [a[0] + v * ab[0], a[1] + v * ab[1], a[2] + v * ab[2]];
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [a[0] + w * ac[0], a[1] + w * ac[1], a[2] + w * ac[2]];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]), b[2] + w * (c[2] - b[2])];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [0, 1, 2].map(|k| a[k] + ab[k] * v + ac[k] * w)
}

impl TriMesh {
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(CoreError::Invalid("mesh has no triangles".into()));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= vertices.len()) {
                return Err(CoreError::Invalid(format!("triangle {t} references a missing vertex")));
            }
            let [a, b, c] = tri.map(|i| vertices[i]);
            let n = cross(sub(b, a), sub(c, a));
            let scale = dot(sub(b, a), sub(b, a)).max(dot(sub(c, a), sub(c, a)));
            if dot(n, n).sqrt() <= 1e-14 * scale {
                return Err(CoreError::Invalid(format!("triangle {t} is degenerate")));
            }
        }
        Ok(Self { vertices, triangles })
    }

    pub fn distance(&self, p: Point) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let q = closest_point_on_triangle(p, self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]);
                dot(sub(p, q), sub(p, q))
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    /// Latitude/longitude triangulation of a parametric closed surface
    /// `f(θ, φ)`, `θ ∈ [0, 2π)`, `φ ∈ [-π/2, π/2]`, with single pole vertices.
    pub fn from_parametric(rings: usize, segments: usize, f: impl Fn(f64, f64) -> Point) -> Result<Self> {
        if rings < 2 || segments < 3 {
            return Err(CoreError::Invalid("parametric mesh needs >= 2 rings and >= 3 segments".into()));
        }
        use std::f64::consts::PI;
        let mut v = vec![f(0.0, -PI / 2.0)];
        for r in 1..rings {
            let phi = -PI / 2.0 + PI * r as f64 / rings as f64;
            for s in 0..segments {
                v.push(f(2.0 * PI * s as f64 / segments as f64, phi));
            }
        }
        v.push(f(0.0, PI / 2.0));
        let top = v.len() - 1;
        let at = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
        let mut t = Vec::new();
        for s in 0..segments {
            t.push([0, at(1, s + 1), at(1, s)]);
            t.push([top, at(rings - 1, s), at(rings - 1, s + 1)]);
        }
        for r in 1..rings - 1 {
            for s in 0..segments {
                t.push([at(r, s), at(r, s + 1), at(r + 1, s + 1)]);
                t.push([at(r, s), at(r + 1, s + 1), at(r + 1, s)]);
            }
        }
        Self::new(v, t)
    }
}

/// A surface that points can be measured against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    Ellipsoid { center: Point, radii: [f64; 3] },
    Mesh(TriMesh),
}

impl Surface {
    pub fn distance(&self, p: Point) -> f64 {
        match self {
            Surface::Ellipsoid { center, radii } => ellipsoid_distance(*center, *radii, p),
            Surface::Mesh(m) => m.distance(p),
        }
    }
}
