//! Convex cones and Euclidean projections onto them.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConeKind {
    /// `{0}`: equality rows.
    Zero,
    /// Nonnegative orthant.
    Nonnegative,
    /// `{(t, z) : ||z||_2 <= t}`.
    SecondOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cone {
    pub kind: ConeKind,
    pub dim: usize,
}

impl Cone {
    pub fn zero(dim: usize) -> Self {
        Self {
            kind: ConeKind::Zero,
            dim,
        }
    }

    pub fn nonnegative(dim: usize) -> Self {
        Self {
            kind: ConeKind::Nonnegative,
            dim,
        }
    }

    pub fn second_order(dim: usize) -> Self {
        Self {
            kind: ConeKind::SecondOrder,
            dim,
        }
    }
}

/// Projects `v` onto the cone in place.
pub fn project_in_place(kind: ConeKind, v: &mut [f64]) {
    match kind {
        ConeKind::Zero => v.iter_mut().for_each(|x| *x = 0.0),
        ConeKind::Nonnegative => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        ConeKind::SecondOrder => {
            if v.is_empty() {
                return;
            }
            let t = v[0];
            let norm = v[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= t {
                return;
            }
            if norm <= -t {
                v.iter_mut().for_each(|x| *x = 0.0);
                return;
            }
            let scale = 0.5 * (t + norm);
            v[0] = scale;
            let ratio = scale / norm;
            v[1..].iter_mut().for_each(|x| *x *= ratio);
        }
    }
}

pub fn project_cone(v: &[f64], kind: ConeKind, dim: usize) -> Vec<f64> {
    assert_eq!(v.len(), dim, "vector length does not match the cone dimension");
    let mut out = v.to_vec();
    project_in_place(kind, &mut out);
    out
}

/// Projects a stacked vector onto a product of cones.
pub fn project_product(cones: &[Cone], v: &mut [f64]) {
    let mut offset = 0;
    for cone in cones {
        project_in_place(cone.kind, &mut v[offset..offset + cone.dim]);
        offset += cone.dim;
    }
}

/// Distance from `v` to the polar cone `{y : y^T s <= 0 for all s in K}`.
pub fn polar_distance(kind: ConeKind, v: &[f64]) -> f64 {
    // Moreau: v = proj_K(v) + proj_polar(v), so dist(v, polar) = ||proj_K(v)||.
    let mut p = v.to_vec();
    project_in_place(kind, &mut p);
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}
