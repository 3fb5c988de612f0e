//! Fovea / near / far periphery weighting and compositing.

use serde::{Deserialize, Serialize};

use super::geometry::{pixel_eccentricity, FieldGeometry};
use super::{ImageBuf, ImagePatch, RangeTag};
use crate::error::{Error, Result};

/// Region boundaries around a gaze point. Ramps of width `blend_band_deg`
/// are centered on each boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    /// `(x, y)` in pixels.
    pub gaze_px: (f64, f64),
    pub near_boundary_deg: f64,
    pub far_boundary_deg: f64,
    pub blend_band_deg: f64,
}

impl RegionPartition {
    pub fn centered(geom: &FieldGeometry) -> Self {
        RegionPartition {
            gaze_px: geom.center(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, f, b) = (self.near_boundary_deg, self.far_boundary_deg, self.blend_band_deg);
        if !(n > 0.0 && n < f) || !f.is_finite() {
            return Err(Error::invalid(format!(
                "region boundaries must satisfy 0 < near < far, got near={n}, far={f}"
            )));
        }
        if !(b >= 0.0) {
            return Err(Error::invalid(format!("blend band must be non-negative, got {b}")));
        }
        if b > n || b > f - n {
            return Err(Error::invalid(format!(
                "blend band {b}° is wider than a region (fovea {n}°, near ring {}°)",
                f - n
            )));
        }
        Ok(())
    }

    /// `(fovea, near, far)` weights at eccentricity `e`.
    pub fn weights_at(&self, e: f64) -> (f64, f64, f64) {
        let ramp = |boundary: f64| -> f64 {
            let b = self.blend_band_deg;
            if b == 0.0 {
                return if e < boundary {
                    0.0
                } else if e > boundary {
                    1.0
                } else {
                    0.5
                };
            }
            ((e - (boundary - b / 2.0)) / b).clamp(0.0, 1.0)
        };
        let outer_near = ramp(self.near_boundary_deg);
        let outer_far = ramp(self.far_boundary_deg);
        let fovea = 1.0 - outer_near;
        let far = outer_far;
        (fovea, outer_near - outer_far, far)
    }
}

impl Default for RegionPartition {
    fn default() -> Self {
        RegionPartition {
            gaze_px: (0.0, 0.0),
            near_boundary_deg: 8.0,
            far_boundary_deg: 14.0,
            blend_band_deg: 1.0,
        }
    }
}

/// Three single-channel `H×W` weight maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionWeights {
    pub fovea: ImageBuf,
    pub near: ImageBuf,
    pub far: ImageBuf,
}

impl PartitionWeights {
    pub fn height(&self) -> usize {
        self.fovea.height()
    }

    pub fn width(&self) -> usize {
        self.fovea.width()
    }

    /// Constant weights everywhere.
    pub fn uniform(height: usize, width: usize, w: (f32, f32, f32)) -> Self {
        PartitionWeights {
            fovea: ImageBuf::filled(1, height, width, w.0),
            near: ImageBuf::filled(1, height, width, w.1),
            far: ImageBuf::filled(1, height, width, w.2),
        }
    }
}

/// Per-pixel region weights for the whole display, evaluated at pixel centers.
pub fn partition_weights(geom: &FieldGeometry, part: &RegionPartition) -> Result<PartitionWeights> {
    geom.validate()?;
    part.validate()?;
    let (w, h) = geom.resolution_px;
    let mut out = PartitionWeights::uniform(h, w, (0.0, 0.0, 0.0));
    for y in 0..h {
        for x in 0..w {
            let e = pixel_eccentricity(geom, part.gaze_px, (x as f64 + 0.5, y as f64 + 0.5));
            let (a, b, c) = part.weights_at(e);
            out.fovea.set(0, y, x, a as f32);
            out.near.set(0, y, x, b as f32);
            out.far.set(0, y, x, c as f32);
        }
    }
    Ok(out)
}

/// Per-pixel convex combination of the three region images.
pub fn composite_foveated(
    full: &ImagePatch,
    near: &ImagePatch,
    far: &ImagePatch,
    weights: &PartitionWeights,
) -> Result<ImagePatch> {
    let (full, near, far) = (full.to_unit()?, near.to_unit()?, far.to_unit()?);
    if !full.same_dims(&near) || !full.same_dims(&far) {
        return Err(Error::shape("composite inputs must share dimensions"));
    }
    let (h, w) = (full.height(), full.width());
    if weights.height() != h || weights.width() != w {
        return Err(Error::shape(format!(
            "weight maps are {}×{}, images are {h}×{w}",
            weights.height(),
            weights.width()
        )));
    }
    let out = ImageBuf::from_fn(3, h, w, |c, y, x| {
        let (a, b, d) = (weights.fovea.get(0, y, x), weights.near.get(0, y, x), weights.far.get(0, y, x));
        a * full.get(c, y, x) + b * near.get(c, y, x) + d * far.get(c, y, x)
    });
    ImagePatch::new(out, RangeTag::Unit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_geom() -> FieldGeometry {
        FieldGeometry::with_reference_pitch(160, 120)
    }

    #[test]
    fn gaze_and_boundary_weights() {
        let p = RegionPartition::default();
        assert_eq!(p.weights_at(0.0), (1.0, 0.0, 0.0));
        assert_eq!(p.weights_at(8.0), (0.5, 0.5, 0.0));
        assert_eq!(p.weights_at(14.0), (0.0, 0.5, 0.5));
        assert_eq!(p.weights_at(30.0), (0.0, 0.0, 1.0));
        assert_eq!(p.weights_at(7.0 - 1e-9).0, 1.0);
    }

    #[test]
    fn maps_sum_to_one() {
        let g = small_geom();
        let part = RegionPartition {
            gaze_px: (40.0, 70.0),
            near_boundary_deg: 0.3,
            far_boundary_deg: 0.8,
            blend_band_deg: 0.2,
        };
        let m = partition_weights(&g, &part).unwrap();
        for i in 0..m.fovea.data().len() {
            let (a, b, c) = (m.fovea.data()[i], m.near.data()[i], m.far.data()[i]);
            assert!(a >= 0.0 && b >= 0.0 && c >= 0.0);
            assert!((a + b + c - 1.0).abs() < 1e-6);
        }
        assert!(m.far.data().iter().any(|&v| v == 1.0));
        assert!(m.fovea.data().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn bad_partitions_rejected() {
        let g = small_geom();
        let mut p = RegionPartition::centered(&g);
        p.blend_band_deg = 7.0;
        assert!(partition_weights(&g, &p).is_err());
        p.blend_band_deg = 1.0;
        p.far_boundary_deg = 6.0;
        assert!(partition_weights(&g, &p).is_err());
        p.far_boundary_deg = 14.0;
        p.near_boundary_deg = 0.0;
        assert!(partition_weights(&g, &p).is_err());
    }

    #[test]
    fn composite_selects_regions() {
        let a = ImagePatch::filled(16, 16, 0.1).unwrap();
        let b = ImagePatch::filled(16, 16, 0.5).unwrap();
        let c = ImagePatch::filled(16, 16, 0.9).unwrap();
        let near_only = PartitionWeights::uniform(16, 16, (0.0, 1.0, 0.0));
        assert_eq!(composite_foveated(&a, &b, &c, &near_only).unwrap(), b);
        let mixed = PartitionWeights::uniform(16, 16, (0.25, 0.5, 0.25));
        assert_eq!(composite_foveated(&a, &a, &a, &mixed).unwrap().buf().max_abs_diff(a.buf()) < 1e-7, true);
        let wrong = PartitionWeights::uniform(8, 16, (1.0, 0.0, 0.0));
        assert!(composite_foveated(&a, &b, &c, &wrong).is_err());
    }
}
