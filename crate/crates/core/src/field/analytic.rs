//! Ground-truth scenes built from soft-edged spheres and boxes.
//!
//! Each primitive has a solid core at its peak density and a shell of
//! width `falloff` over which the density fades to exactly zero along a
//! quintic smoothstep, so the field is C² and has compact support.
//! Color is the density-weighted mean of primitive colors, attenuated by
//! `color_softening` where the density is low:
//!
//! `c(p) = Σ σ_k(p) c_k / (Σ σ_k(p) + κ)`

use serde::{Deserialize, Serialize};

use super::{Aabb, FieldSample, RadianceField};
use crate::lie::{Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub falloff: f64,
    pub color: [f64; 3],
    pub density: f64,
}

impl Primitive {
    pub fn sphere(center: [f64; 3], radius: f64, falloff: f64, color: [f64; 3], density: f64) -> Self {
        Self {
            shape: Shape::Sphere { radius },
            center,
            falloff,
            color,
            density,
        }
    }

    pub fn cuboid(
        center: [f64; 3],
        half_extents: [f64; 3],
        falloff: f64,
        color: [f64; 3],
        density: f64,
    ) -> Self {
        Self {
            shape: Shape::Box { half_extents },
            center,
            falloff,
            color,
            density,
        }
    }

    pub fn bounds(&self) -> Aabb {
        let c = Vec3::from(self.center);
        let half = match self.shape {
            Shape::Sphere { radius } => Vec3::repeat(radius),
            Shape::Box { half_extents } => Vec3::from(half_extents),
        } + Vec3::repeat(self.falloff);
        Aabb::new(c - half, c + half)
    }

    /// Distance outside the solid core and its gradient (zero inside).
    fn core_distance(&self, p: &Vec3) -> (f64, Vec3) {
        let rel = p - Vec3::from(self.center);
        match self.shape {
            Shape::Sphere { radius } => {
                let r = rel.norm();
                if r <= radius {
                    (0.0, Vec3::zeros())
                } else {
                    (r - radius, rel / r)
                }
            }
            Shape::Box { half_extents } => {
                let q = rel.abs() - Vec3::from(half_extents);
                let outside = q.sup(&Vec3::zeros());
                let dist = outside.norm();
                if dist == 0.0 {
                    (0.0, Vec3::zeros())
                } else {
                    let dir = outside.component_mul(&rel.map(f64::signum)) / dist;
                    (dist, dir)
                }
            }
        }
    }

    /// Cheap test for points certainly outside the support.
    fn outside_support(&self, p: &Vec3) -> bool {
        let rel = [p.x - self.center[0], p.y - self.center[1], p.z - self.center[2]];
        match self.shape {
            Shape::Sphere { radius } => {
                let outer = radius + self.falloff;
                rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2] >= outer * outer
            }
            Shape::Box { half_extents } => {
                (0..3).any(|i| rel[i].abs() - half_extents[i] >= self.falloff)
            }
        }
    }

    /// Density and its spatial gradient.
    pub fn density_at(&self, p: &Vec3) -> (f64, Vec3) {
        if self.outside_support(p) {
            return (0.0, Vec3::zeros());
        }
        let (dist, grad) = self.core_distance(p);
        let u = dist / self.falloff;
        if u >= 1.0 {
            return (0.0, Vec3::zeros());
        }
        // 1 - (6u^5 - 15u^4 + 10u^3)
        let value = 1.0 - u * u * u * (u * (6.0 * u - 15.0) + 10.0);
        let slope = -30.0 * u * u * (1.0 - u) * (1.0 - u);
        (
            self.density * value,
            grad * (self.density * slope / self.falloff),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    #[serde(default = "default_softening")]
    pub color_softening: f64,
}

fn default_softening() -> f64 {
    1.0
}

impl Default for AnalyticScene {
    fn default() -> Self {
        Self::empty()
    }
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Self {
            primitives,
            color_softening: default_softening(),
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    pub fn single_sphere() -> Self {
        Self::new(vec![Primitive::sphere(
            [0.0, 0.0, 0.0],
            0.5,
            0.25,
            [0.9, 0.35, 0.2],
            40.0,
        )])
    }

    /// Asymmetric arrangement of differently colored primitives used by the
    /// benchmark and the acceptance suite.
    pub fn reference() -> Self {
        Self::new(vec![
            Primitive::sphere([0.0, 0.0, 0.0], 0.45, 0.25, [0.9, 0.3, 0.2], 40.0),
            Primitive::cuboid(
                [0.55, -0.35, -0.2],
                [0.25, 0.2, 0.35],
                0.2,
                [0.2, 0.8, 0.3],
                40.0,
            ),
            Primitive::sphere([-0.5, 0.35, 0.3], 0.22, 0.2, [0.2, 0.4, 0.95], 40.0),
            Primitive::sphere([0.15, 0.45, -0.45], 0.18, 0.18, [0.95, 0.85, 0.2], 40.0),
            Primitive::cuboid(
                [-0.3, -0.45, 0.4],
                [0.15, 0.3, 0.12],
                0.15,
                [0.8, 0.3, 0.85],
                40.0,
            ),
        ])
    }
}

impl RadianceField for AnalyticScene {
    fn query(&self, p: &Vec3) -> FieldSample {
        let mut total = 0.0;
        let mut d_total = Vec3::zeros();
        let mut weighted = Vec3::zeros();
        // Σ c_k ∇σ_kᵀ
        let mut d_weighted = Mat3::zeros();
        for prim in &self.primitives {
            let (s, ds) = prim.density_at(p);
            if s == 0.0 && ds == Vec3::zeros() {
                continue;
            }
            let c = Vec3::from(prim.color);
            total += s;
            weighted += c * s;
            if ds != Vec3::zeros() {
                d_total += ds;
                d_weighted += c * ds.transpose();
            }
        }
        if total == 0.0 {
            return FieldSample::EMPTY;
        }
        let denom = total + self.color_softening;
        let color = weighted / denom;
        let d_color = d_weighted / denom - weighted * d_total.transpose() / (denom * denom);
        FieldSample {
            density: total,
            color,
            d_density: d_total,
            d_color,
        }
    }

    fn bounds(&self) -> Aabb {
        self.primitives
            .iter()
            .map(Primitive::bounds)
            .reduce(|a, b| a.union(&b))
            .unwrap_or_else(Aabb::unit_cube)
    }
}
