//! Point-to-point ICP with closed-form SVD alignment.
//!
//! All internal arithmetic runs in `f64`; inputs and outputs use the caller's
//! scalar type.

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Quaternion, RigidTransform, Vec3};
use crate::metrics::isotropic_errors;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the change between consecutive estimates (rotation angle in
    /// radians plus translation norm) falls below this.
    pub convergence_tol: f64,
    /// Correspondences farther apart than this are ignored; unbounded when absent.
    pub max_correspondence_distance: Option<f64>,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_tol: 1e-6,
            max_correspondence_distance: None,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("icp max_iterations must be positive"));
        }
        if self.convergence_tol.is_nan() || self.convergence_tol <= 0.0 {
            return Err(Error::invalid("icp convergence_tol must be positive"));
        }
        if self.max_correspondence_distance.is_some_and(|d| d.is_nan() || d <= 0.0) {
            return Err(Error::invalid("icp max_correspondence_distance must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KabschResult<T> {
    pub transform: RigidTransform<T>,
    /// Cross-covariance rank below two: the rotation is not determined.
    pub degenerate: bool,
}

fn centroid64(points: &[[f64; 3]]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in points {
        c += Vector3::from(*p);
    }
    c / points.len() as f64
}

fn kabsch64(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<KabschResult<f64>> {
    if p.len() != q.len() {
        return Err(Error::shape("kabsch point sets", p.len(), q.len()));
    }
    if p.len() < 3 {
        return Err(Error::invalid(format!("kabsch needs at least 3 matches, got {}", p.len())));
    }
    let cp = centroid64(p);
    let cq = centroid64(q);
    let mut h = Matrix3::<f64>::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (Vector3::from(*a) - cp) * (Vector3::from(*b) - cq).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::invalid("svd failed"))?;
    let v_t = svd.v_t.ok_or_else(|| Error::invalid("svd failed"))?;
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > 1e-12 * smax.max(1e-300))
        .count();
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    let t = cq - r * cp;
    let m: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]));
    let rotation = Quaternion::from_matrix(&m)?;
    Ok(KabschResult {
        transform: RigidTransform {
            rotation,
            translation: [t[0], t[1], t[2]],
        },
        degenerate: rank < 2,
    })
}

fn to64<T: Scalar>(points: &[Vec3<T>]) -> Vec<[f64; 3]> {
    points.iter().map(|p| p.map(|c| c.as_f64())).collect()
}

/// Least-squares rigid transform mapping `p[i]` onto `q[i]`, with the
/// reflection case corrected so the result is a proper rotation.
pub fn kabsch<T: Scalar>(p: &[Vec3<T>], q: &[Vec3<T>]) -> Result<KabschResult<T>> {
    let r = kabsch64(&to64(p), &to64(q))?;
    Ok(KabschResult {
        transform: r.transform.cast(),
        degenerate: r.degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpResult<T> {
    pub transform: RigidTransform<T>,
    pub iterations: usize,
    /// Mean squared nearest-neighbour distance under the returned transform.
    pub final_residual: f64,
    /// Mean squared residual before each update and after the last one.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub degenerate: bool,
}

struct Matches {
    src: Vec<[f64; 3]>,
    dst: Vec<[f64; 3]>,
    mse: f64,
}

fn correspond(
    tree: &ImmutableKdTree<f64, u32, 3, 32>,
    reference: &[[f64; 3]],
    source: &[[f64; 3]],
    t: &RigidTransform<f64>,
    max_sq: f64,
) -> Matches {
    let mut m = Matches {
        src: Vec::with_capacity(source.len()),
        dst: Vec::with_capacity(source.len()),
        mse: 0.0,
    };
    let mut sum = 0.0;
    for p in source {
        let moved = t.apply_point(*p);
        let nn = tree.nearest_one::<SquaredEuclidean>(&moved);
        if nn.distance <= max_sq {
            sum += nn.distance;
            m.src.push(*p);
            m.dst.push(reference[nn.item as usize]);
        }
    }
    if !m.src.is_empty() {
        m.mse = sum / m.src.len() as f64;
    }
    m
}

/// Aligns `source` onto `reference` starting from `init`.
///
/// Each iteration matches every transformed source point to its exact nearest
/// reference point and re-solves the full transform in closed form. When the
/// correspondence set becomes degenerate the best estimate so far is returned
/// with `degenerate` set.
pub fn icp<T: Scalar>(
    source: &PointCloud<T>,
    reference: &PointCloud<T>,
    init: &RigidTransform<T>,
    config: &IcpConfig,
) -> Result<IcpResult<T>> {
    config.validate()?;
    if source.len() < 3 || reference.len() < 3 {
        return Err(Error::invalid("icp needs at least 3 points in each cloud"));
    }
    let src = to64(source.points());
    let dst = to64(reference.points());
    let tree: ImmutableKdTree<f64, u32, 3, 32> = ImmutableKdTree::new_from_slice(&dst);
    let max_sq = config.max_correspondence_distance.map_or(f64::INFINITY, |d| d * d);

    let mut current = init.cast::<f64>();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut degenerate = false;
    let mut matches = correspond(&tree, &dst, &src, &current, max_sq);
    while iterations < config.max_iterations {
        if matches.src.len() < 3 {
            degenerate = true;
            break;
        }
        history.push(matches.mse);
        let step = kabsch64(&matches.src, &matches.dst)?;
        iterations += 1;
        if step.degenerate {
            degenerate = true;
            break;
        }
        let next = step.transform;
        let (angle_deg, dt) = isotropic_errors(&next, &current);
        current = next;
        matches = correspond(&tree, &dst, &src, &current, max_sq);
        if angle_deg.to_radians() + dt < config.convergence_tol {
            converged = true;
            break;
        }
    }
    let final_residual = if matches.src.is_empty() { f64::INFINITY } else { matches.mse };
    history.push(final_residual);
    Ok(IcpResult {
        transform: current.cast(),
        iterations,
        final_residual,
        residual_history: history,
        converged,
        degenerate,
    })
}
