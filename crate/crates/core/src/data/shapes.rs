//! Procedural surface primitives sampled by area.
//!
//! None of the primitives is rotationally symmetric about any axis, so every
//! rigid transform in the training range is identifiable from the geometry.

use rand::Rng;

type P = [f64; 3];
type Tri = [P; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Box,
    SlottedTube,
    LBracket,
    ConvexHull,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 4] = [Self::Box, Self::SlottedTube, Self::LBracket, Self::ConvexHull];

    pub fn name(self) -> &'static str {
        match self {
            Self::Box => "box",
            Self::SlottedTube => "tube",
            Self::LBracket => "bracket",
            Self::ConvexHull => "hull",
        }
    }
}

fn sub(a: P, b: P) -> P {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: P, b: P) -> P {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: P, b: P) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn area(t: &Tri) -> f64 {
    let c = cross(sub(t[1], t[0]), sub(t[2], t[0]));
    0.5 * dot(c, c).sqrt()
}

/// Axis-aligned box `[lo, hi]` as 12 triangles.
fn box_mesh(lo: P, hi: P) -> Vec<Tri> {
    let v = |i: usize| -> P {
        [
            if i & 1 == 0 { lo[0] } else { hi[0] },
            if i & 2 == 0 { lo[1] } else { hi[1] },
            if i & 4 == 0 { lo[2] } else { hi[2] },
        ]
    };
    let quads = [[0, 1, 3, 2], [4, 5, 7, 6], [0, 1, 5, 4], [2, 3, 7, 6], [0, 2, 6, 4], [1, 3, 7, 5]];
    quads
        .iter()
        .flat_map(|q| [[v(q[0]), v(q[1]), v(q[2])], [v(q[0]), v(q[2]), v(q[3])]])
        .collect()
}

fn inside_box(p: P, lo: P, hi: P) -> bool {
    const EPS: f64 = 1e-9;
    (0..3).all(|k| p[k] > lo[k] + EPS && p[k] < hi[k] - EPS)
}

struct Sampler {
    tris: Vec<Tri>,
    cumulative: Vec<f64>,
}

impl Sampler {
    fn new(tris: Vec<Tri>) -> Self {
        let mut acc = 0.0;
        let cumulative = tris
            .iter()
            .map(|t| {
                acc += area(t);
                acc
            })
            .collect();
        Self { tris, cumulative }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> P {
        let total = *self.cumulative.last().expect("nonempty mesh");
        let u = rng.random_range(0.0..total);
        let i = self.cumulative.partition_point(|c| *c <= u).min(self.tris.len() - 1);
        let [a, b, c] = self.tris[i];
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
        std::array::from_fn(|k| wa * a[k] + wb * b[k] + wc * c[k])
    }
}

fn sample_box<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<P> {
    let h: P = std::array::from_fn(|_| rng.random_range(0.15..0.5));
    let s = Sampler::new(box_mesh([-h[0], -h[1], -h[2]], h));
    (0..n).map(|_| s.sample(rng)).collect()
}

/// Open elliptical tube with a lengthwise slot cut out of its wall.
fn sample_tube<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<P> {
    const SEGMENTS: usize = 48;
    let a = rng.random_range(0.3..0.6);
    let b = rng.random_range(0.15..0.3);
    let h = rng.random_range(0.3..0.8);
    let gap = rng.random_range(40f64..80.0).to_radians();
    let start = gap / 2.0;
    let span = std::f64::consts::TAU - gap;
    let ring = |i: usize, z: f64| -> P {
        let th = start + span * i as f64 / SEGMENTS as f64;
        [a * th.cos(), b * th.sin(), z]
    };
    let mut tris = Vec::with_capacity(2 * SEGMENTS);
    for i in 0..SEGMENTS {
        let (p0, p1) = (ring(i, -h), ring(i + 1, -h));
        let (q0, q1) = (ring(i, h), ring(i + 1, h));
        tris.push([p0, p1, q1]);
        tris.push([p0, q1, q0]);
    }
    let s = Sampler::new(tris);
    (0..n).map(|_| s.sample(rng)).collect()
}

/// Union of two boxes meeting at a right angle, surface only.
fn sample_bracket<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<P> {
    let w = rng.random_range(0.6..1.0);
    let hgt = rng.random_range(0.4..0.8);
    let t = rng.random_range(0.1..0.2);
    let d = rng.random_range(0.3..0.6);
    let (alo, ahi) = ([0.0, 0.0, 0.0], [w, t, d]);
    let (blo, bhi) = ([0.0, 0.0, 0.0], [t, hgt, d]);
    let mut tris = box_mesh(alo, ahi);
    tris.extend(box_mesh(blo, bhi));
    let s = Sampler::new(tris);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = s.sample(rng);
        if !inside_box(p, alo, ahi) && !inside_box(p, blo, bhi) {
            out.push(p);
        }
    }
    out
}

/// Boundary facets of the convex hull of a small point set, by exhaustive
/// search over vertex triples.
fn hull_facets(pts: &[P]) -> Vec<Tri> {
    const EPS: f64 = 1e-12;
    let n = pts.len();
    let mut tris = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let normal = cross(sub(pts[j], pts[i]), sub(pts[k], pts[i]));
                if dot(normal, normal) < EPS {
                    continue;
                }
                let (mut pos, mut neg) = (false, false);
                for (l, p) in pts.iter().enumerate() {
                    if l == i || l == j || l == k {
                        continue;
                    }
                    let s = dot(normal, sub(*p, pts[i]));
                    pos |= s > EPS;
                    neg |= s < -EPS;
                    if pos && neg {
                        break;
                    }
                }
                if !(pos && neg) {
                    tris.push([pts[i], pts[j], pts[k]]);
                }
            }
        }
    }
    tris
}

fn sample_hull<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<P> {
    let scale: P = std::array::from_fn(|_| rng.random_range(0.4..1.0));
    let pts: Vec<P> = (0..20)
        .map(|_| std::array::from_fn(|k| scale[k] * rng.random_range(-1.0..1.0)))
        .collect();
    let s = Sampler::new(hull_facets(&pts));
    (0..n).map(|_| s.sample(rng)).collect()
}

pub fn sample_primitive<R: Rng + ?Sized>(kind: PrimitiveKind, rng: &mut R, n: usize) -> Vec<P> {
    match kind {
        PrimitiveKind::Box => sample_box(rng, n),
        PrimitiveKind::SlottedTube => sample_tube(rng, n),
        PrimitiveKind::LBracket => sample_bracket(rng, n),
        PrimitiveKind::ConvexHull => sample_hull(rng, n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_mesh_area() {
        let total: f64 = box_mesh([0.0; 3], [1.0, 2.0, 3.0]).iter().map(area).sum();
        assert!((total - 22.0).abs() < 1e-12);
    }

    #[test]
    fn hull_of_cube_corners_has_cube_area() {
        let pts: Vec<P> = (0..8)
            .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
            .collect();
        // coplanar corner quadruples contribute all four triangles per face
        let total: f64 = hull_facets(&pts).iter().map(area).sum();
        assert!((total - 12.0).abs() < 1e-12);
    }

    #[test]
    fn bracket_points_avoid_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = sample_bracket(&mut rng, 500);
        assert_eq!(pts.len(), 500);
    }

    #[test]
    fn box_samples_lie_on_faces() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = sample_box(&mut rng, 200);
        let hi: P = std::array::from_fn(|k| pts.iter().map(|p| p[k].abs()).fold(0.0, f64::max));
        for p in pts {
            assert!((0..3).any(|k| (p[k].abs() - hi[k]).abs() < 1e-9));
        }
    }
}
