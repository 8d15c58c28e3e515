//! Queryable density-and-color fields with exact spatial derivatives.

mod analytic;
mod grid;

pub use analytic::{AnalyticScene, Primitive, Shape};
pub use grid::{
    load_checkpoint, save_checkpoint, sigmoid, softplus, TrilinearStencil, VoxelGridField, CHECKPOINT_MAGIC,
};

use serde::{Deserialize, Serialize};

use crate::lie::{Mat3, Vec3};

/// Density, color and their derivatives with respect to the query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub density: f64,
    pub color: Vec3,
    pub d_density: Vec3,
    /// Row `c` is the gradient of color channel `c`.
    pub d_color: Mat3,
}

impl FieldSample {
    pub const EMPTY: FieldSample = FieldSample {
        density: 0.0,
        color: Vec3::new(0.0, 0.0, 0.0),
        d_density: Vec3::new(0.0, 0.0, 0.0),
        d_color: Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    };
}

impl Default for FieldSample {
    fn default() -> Self {
        Self::EMPTY
    }
}

/// A radiance field that can be shared read-only across worker threads.
pub trait RadianceField: Sync {
    fn query(&self, p: &Vec3) -> FieldSample;

    /// Box outside of which the density is zero.
    fn bounds(&self) -> Aabb;
}

impl<F: RadianceField + ?Sized> RadianceField for &F {
    fn query(&self, p: &Vec3) -> FieldSample {
        (**self).query(p)
    }

    fn bounds(&self) -> Aabb {
        (**self).bounds()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self {
            min: min.into(),
            max: max.into(),
        }
    }

    pub fn unit_cube() -> Self {
        Self::new(Vec3::repeat(-1.0), Vec3::repeat(1.0))
    }

    pub fn min(&self) -> Vec3 {
        self.min.into()
    }

    pub fn max(&self) -> Vec3 {
        self.max.into()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Self::new(self.min().inf(&other.min()), self.max().sup(&other.max()))
    }

    pub fn expanded(&self, by: f64) -> Aabb {
        Self::new(self.min() - Vec3::repeat(by), self.max() + Vec3::repeat(by))
    }

    /// Slab test. Returns the entry and exit distances along `dir`, with the
    /// entry clamped to 0 when the origin is inside.
    pub fn intersect_ray(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-300 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = {
                let a = (self.min[i] - origin[i]) * inv;
                let b = (self.max[i] - origin[i]) * inv;
                if a <= b {
                    (a, b)
                } else {
                    (b, a)
                }
            };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }
}
