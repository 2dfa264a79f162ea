//! Geometric primitives for the urban scene: axis-aligned boxes, ground-plane
//! polygons, reflecting wall faces, and angle helpers shared by the scenario
//! builder and the path tracer.

use nalgebra::Vector3;
use std::f64::consts::PI;

pub type Vec3 = Vector3<f64>;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Segment-box intersection (slab method). The parameter range is shrunk
    /// by `eps` at both ends so that an endpoint resting on a face does not
    /// count as a crossing.
    pub fn intersects_segment(&self, a: &Vec3, b: &Vec3, eps: f64) -> bool {
        let d = b - a;
        let mut t_enter = eps;
        let mut t_exit = 1.0 - eps;
        for k in 0..3 {
            if d[k].abs() < 1e-12 {
                if a[k] < self.min[k] || a[k] > self.max[k] {
                    return false;
                }
            } else {
                let inv = 1.0 / d[k];
                let t0 = (self.min[k] - a[k]) * inv;
                let t1 = (self.max[k] - a[k]) * inv;
                let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
                t_enter = t_enter.max(lo);
                t_exit = t_exit.min(hi);
                if t_enter > t_exit {
                    return false;
                }
            }
        }
        true
    }
}

/// Simple 2-D polygon in the ground plane (no self-intersection assumed).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Self {
        Self { vertices }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Shoelace area.
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let [x0, y0] = self.vertices[i];
            let [x1, y1] = self.vertices[(i + 1) % n];
            acc += x0 * y1 - x1 * y0;
        }
        acc.abs() / 2.0
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let [x0, y0] = self.vertices[i];
            let [x1, y1] = self.vertices[(i + 1) % n];
            if (y0 > p[1]) != (y1 > p[1]) {
                let x_cross = x0 + (p[1] - y0) / (y1 - y0) * (x1 - x0);
                if p[0] < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

/// A rectangular vertical wall segment lying in a constant-x or constant-y
/// plane, with its outward normal direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    /// 0: plane x = coord, 1: plane y = coord.
    pub axis: usize,
    pub coord: f64,
    /// +1.0 or -1.0 along `axis`.
    pub outward: f64,
    /// Bounds in (other horizontal axis, z).
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Face {
    pub fn mirror(&self, p: &Vec3) -> Vec3 {
        let mut q = *p;
        q[self.axis] = 2.0 * self.coord - q[self.axis];
        q
    }

    fn signed_side(&self, p: &Vec3) -> f64 {
        (p[self.axis] - self.coord) * self.outward
    }

    /// Specular bounce point for a transmitter/receiver pair, if the mirror
    /// image construction yields a point inside this wall rectangle with both
    /// endpoints on the outward side of the plane.
    pub fn reflection_point(&self, tx: &Vec3, rx: &Vec3) -> Option<Vec3> {
        const MARGIN: f64 = 1e-9;
        if self.signed_side(tx) <= MARGIN || self.signed_side(rx) <= MARGIN {
            return None;
        }
        let image = self.mirror(tx);
        let d = rx - image;
        if d[self.axis].abs() < 1e-12 {
            return None;
        }
        let t = (self.coord - image[self.axis]) / d[self.axis];
        if !(t > 0.0 && t < 1.0) {
            return None;
        }
        let p = image + d * t;
        let other = if self.axis == 0 { 1 } else { 0 };
        if p[other] < self.lo[0] || p[other] > self.hi[0] || p.z < self.lo[1] || p.z > self.hi[1] {
            return None;
        }
        Some(p)
    }
}

/// Horizontal/vertical angles of a direction vector: phi = atan2(y, x) in
/// [-pi, pi), theta measured from +z in [0, pi].
pub fn spherical_angles(d: &Vec3) -> (f64, f64) {
    let r = d.norm();
    let theta = if r == 0.0 {
        0.0
    } else {
        (d.z / r).clamp(-1.0, 1.0).acos()
    };
    let phi = wrap_phi(d.y.atan2(d.x));
    (phi, theta)
}

/// Wrap an angle into [-pi, pi).
pub fn wrap_phi(phi: f64) -> f64 {
    let mut p = (phi + PI).rem_euclid(2.0 * PI) - PI;
    if p >= PI {
        p -= 2.0 * PI;
    }
    p
}

/// Snap an angle to the given resolution grid (resolution in degrees).
pub fn quantize_angle(rad: f64, resolution_deg: f64) -> f64 {
    if resolution_deg <= 0.0 {
        return rad;
    }
    let deg = rad.to_degrees();
    ((deg / resolution_deg).round() * resolution_deg).to_radians()
}
