//! Display geometry and visual eccentricity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flat display viewed head-on from its center axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldGeometry {
    /// `(width, height)` in pixels.
    pub resolution_px: (usize, usize),
    pub physical_width_m: f64,
    pub viewing_distance_m: f64,
}

impl FieldGeometry {
    pub fn new(resolution_px: (usize, usize), physical_width_m: f64, viewing_distance_m: f64) -> Result<Self> {
        let g = FieldGeometry {
            resolution_px,
            physical_width_m,
            viewing_distance_m,
        };
        g.validate()?;
        Ok(g)
    }

    /// Display given by its diagonal in inches (square pixels assumed).
    pub fn from_diagonal_inches(diagonal_in: f64, resolution_px: (usize, usize), viewing_distance_m: f64) -> Result<Self> {
        let (w, h) = (resolution_px.0 as f64, resolution_px.1 as f64);
        let width_m = diagonal_in * 0.0254 * w / (w * w + h * h).sqrt();
        FieldGeometry::new(resolution_px, width_m, viewing_distance_m)
    }

    /// 27-inch 3840×2160 monitor at 70 cm.
    pub fn reference_display() -> Self {
        FieldGeometry::from_diagonal_inches(27.0, (3840, 2160), 0.70).expect("valid reference geometry")
    }

    /// Geometry for an image of a given size shown at the reference pixel pitch.
    pub fn with_reference_pitch(width: usize, height: usize) -> Self {
        let r = FieldGeometry::reference_display();
        FieldGeometry {
            resolution_px: (width, height),
            physical_width_m: r.pixel_pitch_m() * width as f64,
            viewing_distance_m: r.viewing_distance_m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.resolution_px;
        if w == 0 || h == 0 {
            return Err(Error::invalid("display resolution must be non-zero"));
        }
        if !(self.physical_width_m > 0.0) || !(self.viewing_distance_m > 0.0) {
            return Err(Error::invalid("display width and viewing distance must be positive"));
        }
        Ok(())
    }

    pub fn pixel_pitch_m(&self) -> f64 {
        self.physical_width_m / self.resolution_px.0 as f64
    }

    /// Visual angle subtended by one pixel at the screen center.
    pub fn degrees_per_pixel(&self) -> f64 {
        (self.pixel_pitch_m() / self.viewing_distance_m).atan().to_degrees()
    }

    /// Screen radius in pixels that subtends `deg` from the gaze point.
    pub fn degrees_to_pixels(&self, deg: f64) -> f64 {
        deg.to_radians().tan() * self.viewing_distance_m / self.pixel_pitch_m()
    }

    pub fn center(&self) -> (f64, f64) {
        (self.resolution_px.0 as f64 / 2.0, self.resolution_px.1 as f64 / 2.0)
    }
}

/// Angular distance of `pixel` from `gaze`, both in pixel coordinates `(x, y)`.
pub fn pixel_eccentricity(geom: &FieldGeometry, gaze_px: (f64, f64), pixel: (f64, f64)) -> f64 {
    let d = (pixel.0 - gaze_px.0).hypot(pixel.1 - gaze_px.1);
    (d * geom.pixel_pitch_m() / geom.viewing_distance_m).atan().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_display_pitch() {
        let g = FieldGeometry::reference_display();
        let dpp = g.degrees_per_pixel();
        assert!((dpp - 0.012).abs() / 0.012 < 0.1, "{dpp}");
        let c = g.center();
        let e = pixel_eccentricity(&g, c, (c.0 + 100.0, c.1));
        assert!((e - 1.2).abs() < 0.1, "{e}");
        assert_eq!(pixel_eccentricity(&g, c, c), 0.0);
    }

    #[test]
    fn small_angle_linearity() {
        let g = FieldGeometry::reference_display();
        let c = g.center();
        let e1 = pixel_eccentricity(&g, c, (c.0 + 30.0, c.1 + 40.0));
        let e2 = pixel_eccentricity(&g, c, (c.0 + 60.0, c.1 + 80.0));
        assert!((e2 / e1 - 2.0).abs() < 0.02);
    }

    #[test]
    fn degree_pixel_conversion_inverts() {
        let g = FieldGeometry::reference_display();
        let c = g.center();
        let r = g.degrees_to_pixels(8.0);
        assert!((pixel_eccentricity(&g, c, (c.0 + r, c.1)) - 8.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_geometry_rejected() {
        assert!(FieldGeometry::new((0, 10), 0.5, 0.7).is_err());
        assert!(FieldGeometry::new((10, 10), -0.5, 0.7).is_err());
        assert!(FieldGeometry::new((10, 10), 0.5, 0.0).is_err());
    }
}
