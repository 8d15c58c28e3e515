//! Dense voxel grid with trilinear interpolation.
//!
//! Raw (pre-activation) values live at voxel centers. A query interpolates
//! the raw values trilinearly and then activates them: softplus for
//! density, sigmoid for color. Within half a voxel of the boundary the
//! nearest layer is held constant.

use std::fs;
use std::path::Path;

use super::{Aabb, FieldSample, RadianceField};
use crate::error::{Error, Result};
use crate::lie::{Mat3, Vec3};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NRFGRID1";
const HEADER_LEN: usize = 8 + 3 * 4 + 6 * 8;

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGridField {
    pub resolution: [u32; 3],
    pub bounds: Aabb,
    /// One value per voxel, x varying fastest.
    pub raw_density: Vec<f32>,
    pub raw_color: Vec<[f32; 3]>,
}

/// Eight voxels surrounding a query point with their interpolation weights
/// and the weights' spatial gradients.
#[derive(Clone, Copy, Debug)]
pub struct TrilinearStencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
    pub d_weight: [Vec3; 8],
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl VoxelGridField {
    /// Grid with every voxel set to the given raw values.
    pub fn filled(resolution: [u32; 3], bounds: Aabb, raw_density: f32, raw_color: [f32; 3]) -> Result<Self> {
        let n = voxel_count(resolution)?;
        Ok(Self {
            resolution,
            bounds,
            raw_density: vec![raw_density; n],
            raw_color: vec![raw_color; n],
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.raw_density.len()
    }

    pub fn cell_size(&self) -> Vec3 {
        (self.bounds.max() - self.bounds.min()).component_div(&Vec3::new(
            self.resolution[0] as f64,
            self.resolution[1] as f64,
            self.resolution[2] as f64,
        ))
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.resolution.map(|v| v as usize);
        x + nx * (y + ny * z)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.bounds.min()
            + Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5).component_mul(&self.cell_size())
    }

    /// `None` outside the bounds.
    pub fn stencil(&self, p: &Vec3) -> Option<TrilinearStencil> {
        if !self.bounds.contains(p) {
            return None;
        }
        let cell = self.cell_size();
        let g = (p - self.bounds.min()).component_div(&cell) - Vec3::repeat(0.5);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        // d frac / d p per axis; zero where the value is held constant.
        let mut dfrac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a] as usize;
            if n == 1 || g[a] <= 0.0 {
                continue;
            }
            if g[a] >= (n - 1) as f64 {
                lo[a] = n - 1;
                hi[a] = n - 1;
                continue;
            }
            let i0 = (g[a].floor() as usize).min(n - 2);
            lo[a] = i0;
            hi[a] = i0 + 1;
            frac[a] = g[a] - i0 as f64;
            dfrac[a] = 1.0 / cell[a];
        }
        let mut st = TrilinearStencil {
            index: [0; 8],
            weight: [0.0; 8],
            d_weight: [Vec3::zeros(); 8],
        };
        for corner in 0..8 {
            let pick = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = [0.0; 3];
            let mut dw = [0.0; 3];
            let mut ix = [0usize; 3];
            for a in 0..3 {
                if pick[a] == 1 {
                    ix[a] = hi[a];
                    w[a] = frac[a];
                    dw[a] = dfrac[a];
                } else {
                    ix[a] = lo[a];
                    w[a] = 1.0 - frac[a];
                    dw[a] = -dfrac[a];
                }
            }
            st.index[corner] = self.index(ix[0], ix[1], ix[2]);
            st.weight[corner] = w[0] * w[1] * w[2];
            st.d_weight[corner] = Vec3::new(dw[0] * w[1] * w[2], w[0] * dw[1] * w[2], w[0] * w[1] * dw[2]);
        }
        Some(st)
    }

    /// Interpolated raw density and color with their spatial gradients.
    pub fn raw_at(&self, st: &TrilinearStencil) -> (f64, Vec3, Vec3, Mat3) {
        let mut rd = 0.0;
        let mut d_rd = Vec3::zeros();
        let mut rc = Vec3::zeros();
        let mut d_rc = Mat3::zeros();
        for k in 0..8 {
            let i = st.index[k];
            let w = st.weight[k];
            let dw = st.d_weight[k];
            let d = self.raw_density[i] as f64;
            let c = Vec3::from(self.raw_color[i].map(f64::from));
            rd += w * d;
            d_rd += dw * d;
            rc += c * w;
            d_rc += c * dw.transpose();
        }
        (rd, d_rd, rc, d_rc)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.voxel_count();
        let mut out = Vec::with_capacity(HEADER_LEN + 16 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for r in self.resolution {
            out.extend_from_slice(&r.to_le_bytes());
        }
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for d in &self.raw_density {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for c in &self.raw_color {
            for ch in c {
                out.extend_from_slice(&ch.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: (HEADER_LEN - 8) as u64,
                found: (bytes.len() - 8) as u64,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let resolution = [u32_at(8), u32_at(12), u32_at(16)];
        let min = [f64_at(20), f64_at(28), f64_at(36)];
        let max = [f64_at(44), f64_at(52), f64_at(60)];
        let n = voxel_count(resolution)?;
        let payload = (n as u64) * 16;
        let found = (bytes.len() - HEADER_LEN) as u64;
        if found < payload {
            return Err(Error::Truncated {
                expected: payload,
                found,
            });
        }
        if found > payload {
            return Err(Error::InvalidConfig(format!(
                "checkpoint has {} trailing bytes",
                found - payload
            )));
        }
        let mut off = HEADER_LEN;
        let mut raw_density = Vec::with_capacity(n);
        for _ in 0..n {
            raw_density.push(f32_at(off));
            off += 4;
        }
        let mut raw_color = Vec::with_capacity(n);
        for _ in 0..n {
            raw_color.push([f32_at(off), f32_at(off + 4), f32_at(off + 8)]);
            off += 12;
        }
        Ok(Self {
            resolution,
            bounds: Aabb { min, max },
            raw_density,
            raw_color,
        })
    }
}

fn voxel_count(resolution: [u32; 3]) -> Result<usize> {
    let [nx, ny, nz] = resolution;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::InvalidConfig(format!(
            "grid resolution {nx}x{ny}x{nz} has an empty axis"
        )));
    }
    // 16 payload bytes per voxel must stay addressable.
    (nx as u64)
        .checked_mul(ny as u64)
        .and_then(|v| v.checked_mul(nz as u64))
        .filter(|v| v.checked_mul(16).is_some_and(|b| b <= isize::MAX as u64))
        .and_then(|v| usize::try_from(v).ok())
        .ok_or(Error::DimensionOverflow { nx, ny, nz })
}

impl RadianceField for VoxelGridField {
    fn query(&self, p: &Vec3) -> FieldSample {
        let Some(st) = self.stencil(p) else {
            return FieldSample::EMPTY;
        };
        let (rd, d_rd, rc, d_rc) = self.raw_at(&st);
        let color = rc.map(sigmoid);
        let slope = color.component_mul(&(Vec3::repeat(1.0) - color));
        let mut d_color = d_rc;
        for c in 0..3 {
            d_color.row_mut(c).scale_mut(slope[c]);
        }
        FieldSample {
            density: softplus(rd),
            color,
            d_density: d_rd * sigmoid(rd),
            d_color,
        }
    }

    fn bounds(&self) -> Aabb {
        self.bounds
    }
}

pub fn save_checkpoint(field: &VoxelGridField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, field.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VoxelGridField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    VoxelGridField::from_bytes(&bytes)
}
