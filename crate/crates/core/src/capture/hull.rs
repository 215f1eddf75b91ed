//! 3-D convex hulls in half-space form.
//!
//! Incremental construction: seed with a non-degenerate tetrahedron, then
//! insert points one by one, replacing the faces each point can see with a
//! fan to the horizon. Quadratic in the worst case, which is plenty for the
//! few hundred points an envelope or a net sample carries.

use std::collections::HashSet;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::world::Pose;

/// `{ x : normal · x ≤ offset }` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfSpace {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl HalfSpace {
    #[inline]
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolytope {
    pub halfspaces: Vec<HalfSpace>,
    /// Hull vertices.
    pub vertices: Vec<Vector3<f64>>,
    /// Outward-oriented triangles indexing `vertices`.
    pub faces: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, Copy)]
struct Face {
    v: [usize; 3],
    normal: Vector3<f64>,
    offset: f64,
}

fn make_face(pts: &[Vector3<f64>], a: usize, b: usize, c: usize) -> Face {
    let n = (pts[b] - pts[a]).cross(&(pts[c] - pts[a]));
    let normal = n / n.norm();
    Face {
        v: [a, b, c],
        normal,
        offset: normal.dot(&pts[a]),
    }
}

impl ConvexPolytope {
    /// Convex hull of `points`. Fails when the points do not span 3-D.
    pub fn hull(points: &[Vector3<f64>]) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Degenerate(format!(
                "hull needs at least 4 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("hull input contains non-finite points".into()));
        }

        let (lo, hi) = points.iter().fold(
            (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), p| (lo.inf(p), hi.sup(p)),
        );
        let scale = (hi - lo).norm();
        let eps = 1e-10 * scale.max(1e-300);

        // Initial simplex from extreme points.
        let i0 = (0..points.len())
            .min_by(|&a, &b| points[a].x.total_cmp(&points[b].x))
            .unwrap();
        let i1 = argmax(points, |p| (p - points[i0]).norm());
        let d01 = points[i1] - points[i0];
        if d01.norm() <= eps {
            return Err(Error::Degenerate("all hull points coincide".into()));
        }
        let i2 = argmax(points, |p| d01.cross(&(p - points[i0])).norm() / d01.norm());
        let n012 = d01.cross(&(points[i2] - points[i0]));
        if n012.norm() / d01.norm() <= eps {
            return Err(Error::Degenerate("hull points are collinear".into()));
        }
        let unit012 = n012.normalize();
        let i3 = argmax(points, |p| unit012.dot(&(p - points[i0])).abs());
        if unit012.dot(&(points[i3] - points[i0])).abs() <= eps {
            return Err(Error::Degenerate("hull points are coplanar".into()));
        }

        let centroid = (points[i0] + points[i1] + points[i2] + points[i3]) / 4.0;
        let mut faces: Vec<Face> = Vec::new();
        for [a, b, c] in [[i0, i1, i2], [i0, i1, i3], [i0, i2, i3], [i1, i2, i3]] {
            let mut f = make_face(points, a, b, c);
            if f.normal.dot(&centroid) - f.offset > 0.0 {
                f = make_face(points, a, c, b);
            }
            faces.push(f);
        }

        let seeds = [i0, i1, i2, i3];
        for (k, p) in points.iter().enumerate() {
            if seeds.contains(&k) {
                continue;
            }
            let visible: Vec<bool> = faces
                .iter()
                .map(|f| f.normal.dot(p) - f.offset > eps)
                .collect();
            if !visible.iter().any(|&v| v) {
                continue;
            }
            let mut edges: HashSet<(usize, usize)> = HashSet::new();
            for (f, _) in faces.iter().zip(&visible).filter(|(_, &v)| v) {
                for e in 0..3 {
                    edges.insert((f.v[e], f.v[(e + 1) % 3]));
                }
            }
            let mut horizon: Vec<(usize, usize)> = edges
                .iter()
                .copied()
                .filter(|&(a, b)| !edges.contains(&(b, a)))
                .collect();
            horizon.sort_unstable();

            let mut kept: Vec<Face> = faces
                .iter()
                .zip(&visible)
                .filter(|(_, &v)| !v)
                .map(|(f, _)| *f)
                .collect();
            for (a, b) in horizon {
                kept.push(make_face(points, a, b, k));
            }
            faces = kept;
        }

        // Re-index onto the vertices actually used.
        let mut remap = vec![usize::MAX; points.len()];
        let mut vertices = Vec::new();
        let mut tri = Vec::with_capacity(faces.len());
        for f in &faces {
            let mut out = [0usize; 3];
            for (o, &v) in out.iter_mut().zip(&f.v) {
                if remap[v] == usize::MAX {
                    remap[v] = vertices.len();
                    vertices.push(points[v]);
                }
                *o = remap[v];
            }
            tri.push(out);
        }
        let halfspaces = faces
            .iter()
            .map(|f| HalfSpace {
                normal: f.normal,
                offset: f.offset,
            })
            .collect();
        Ok(Self {
            halfspaces,
            vertices,
            faces: tri,
        })
    }

    /// True when `p` satisfies every half-space within `tol`.
    ///
    /// A polytope with no half-spaces is treated as empty.
    #[inline]
    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        !self.halfspaces.is_empty()
            && self
                .halfspaces
                .iter()
                .all(|h| h.signed_distance(p) <= tol)
    }

    /// Volume from the triangulated boundary.
    pub fn volume(&self) -> f64 {
        let c = self.centroid();
        self.faces
            .iter()
            .map(|[a, b, d]| {
                let (pa, pb, pd) = (self.vertices[*a] - c, self.vertices[*b] - c, self.vertices[*d] - c);
                pa.dot(&pb.cross(&pd)) / 6.0
            })
            .sum()
    }

    /// Mean of the hull vertices (always interior).
    pub fn centroid(&self) -> Vector3<f64> {
        self.vertices.iter().sum::<Vector3<f64>>() / self.vertices.len() as f64
    }

    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.vertices
            .iter()
            .map(|v| (v - c).norm())
            .fold(0.0, f64::max)
    }

    /// Maps the polytope from a local frame into the world through `pose`.
    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            halfspaces: self
                .halfspaces
                .iter()
                .map(|h| {
                    let normal = pose.transform_vector(&h.normal);
                    HalfSpace {
                        normal,
                        offset: h.offset + normal.dot(&pose.position),
                    }
                })
                .collect(),
            vertices: self.vertices.iter().map(|v| pose.transform_point(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Plain-text dump: vertex rows then half-space rows.
    pub fn write_text<W: std::io::Write>(&self, name: &str, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# polytope {name}: {} vertices, {} half-spaces", self.vertices.len(), self.halfspaces.len())?;
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for h in &self.halfspaces {
            writeln!(w, "h {} {} {} {}", h.normal.x, h.normal.y, h.normal.z, h.offset)?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0], f[1], f[2])?;
        }
        Ok(())
    }
}

fn argmax(points: &[Vector3<f64>], key: impl Fn(&Vector3<f64>) -> f64) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let v = key(p);
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube() -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    v.push(Vector3::new(x, y, z));
                }
            }
        }
        v
    }

    #[test]
    fn unit_cube() {
        let mut pts = cube();
        pts.push(Vector3::new(0.5, 0.5, 0.5));
        let h = ConvexPolytope::hull(&pts).unwrap();
        assert_close!(h.volume(), 1.0, 1e-12);
        assert!(h.contains(&Vector3::new(0.5, 0.5, 0.5), 0.0));
        assert!(h.contains(&Vector3::new(1.0, 1.0, 1.0), 1e-9));
        assert!(!h.contains(&Vector3::new(1.1, 0.5, 0.5), 1e-9));
        for hs in &h.halfspaces {
            assert_close!(hs.normal.norm(), 1.0, 1e-12);
        }
        assert_eq!(h.vertices.len(), 8);
    }

    #[test]
    fn degenerate_inputs() {
        let flat: Vec<_> = (0..10)
            .map(|i| Vector3::new(i as f64, (i * i) as f64, 0.0))
            .collect();
        assert!(matches!(ConvexPolytope::hull(&flat), Err(Error::Degenerate(m)) if m.contains("coplanar")));
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(ConvexPolytope::hull(&line), Err(Error::Degenerate(m)) if m.contains("collinear")));
        assert!(ConvexPolytope::hull(&cube()[..3]).is_err());
    }

    #[test]
    fn random_cloud_contains_generators() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..300)
            .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>() * 3.0))
            .collect();
        let h = ConvexPolytope::hull(&pts).unwrap();
        for p in &pts {
            assert!(h.contains(p, 1e-9));
        }
        assert!(h.volume() > 0.0 && h.volume() <= 3.0);
    }

    #[test]
    fn empty_polytope_contains_nothing() {
        let e = ConvexPolytope {
            halfspaces: vec![],
            vertices: vec![],
            faces: vec![],
        };
        assert!(!e.contains(&Vector3::zeros(), 1.0));
    }

    #[test]
    fn rigid_transform_commutes_with_containment() {
        let h = ConvexPolytope::hull(&cube()).unwrap();
        let pose = Pose::new(
            Vector3::new(3.0, -2.0, 1.0),
            nalgebra::Rotation3::from_euler_angles(0.3, 0.2, -1.1),
        );
        let moved = h.transformed(&pose);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let p = Vector3::new(rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5));
            assert_eq!(h.contains(&p, 1e-9), moved.contains(&pose.transform_point(&p), 1e-9));
        }
    }
}
