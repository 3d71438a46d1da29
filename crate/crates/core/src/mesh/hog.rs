//! Histogram of oriented gradients over a sample patch, axial plane only.

use crate::error::{invalid, Result};
use crate::pyramid::{Dims, Pyramid};
use crate::volume::Volume;

pub const HOG_BINS: usize = 36;
pub const HOG_BIN_DEGREES: f64 = 180.0 / HOG_BINS as f64;

/// Azimuth of `(x, y)` in degrees, folded to `[0, 180)`.
pub fn axial_angle(x: f64, y: f64) -> f64 {
    let a = y.atan2(x).to_degrees().rem_euclid(180.0);
    // rem_euclid can round up to exactly 180
    if a >= 180.0 {
        0.0
    } else {
        a
    }
}

/// Bin `i` is centered on `5 i` degrees.
pub fn hog_bin(angle: f64) -> usize {
    ((angle + 0.5 * HOG_BIN_DEGREES) / HOG_BIN_DEGREES).floor() as usize % HOG_BINS
}

/// Gradient-magnitude-weighted orientation histogram of channel `c` over the
/// half-open voxel box `[lo, hi)`, clipped to the volume. Gradients are
/// central differences with replicated borders.
pub fn hog_histogram(vol: &Volume<f32>, c: usize, lo: Dims, hi: Dims) -> [f64; HOG_BINS] {
    let d = vol.dims;
    let mut h = [0.0; HOG_BINS];
    let f = |v: Dims| vol.get(c, v) as f64;
    for z in lo[2]..hi[2].min(d[2]) {
        for y in lo[1]..hi[1].min(d[1]) {
            for x in lo[0]..hi[0].min(d[0]) {
                let gx = 0.5 * (f([(x + 1).min(d[0] - 1), y, z]) - f([x.saturating_sub(1), y, z]));
                let gy = 0.5 * (f([x, (y + 1).min(d[1] - 1), z]) - f([x, y.saturating_sub(1), z]));
                let m = gx.hypot(gy);
                if m > 0.0 {
                    h[hog_bin(axial_angle(gx, gy))] += m;
                }
            }
        }
    }
    h
}

/// Center of the heaviest bin (lowest bin on ties), or `None` when the patch
/// has no in-plane gradient.
pub fn hog_mode(hist: &[f64; HOG_BINS]) -> Option<f64> {
    let mut best: Option<usize> = None;
    for (i, &w) in hist.iter().enumerate() {
        if w > 0.0 && best.is_none_or(|b| w > hist[b]) {
            best = Some(i);
        }
    }
    best.map(|b| b as f64 * HOG_BIN_DEGREES)
}

/// HOG modes of every sample at resolution `r`. At `r = 0` the 3x3x3
/// neighbourhood of the voxel is used instead of the single-voxel patch.
pub fn hog_modes(vol: &Volume<f32>, channel: usize, pyramid: &Pyramid, r: usize) -> Result<Vec<Option<f64>>> {
    if channel >= vol.channels {
        return Err(invalid(format!("channel {channel} out of range ({} channels)", vol.channels)));
    }
    if vol.dims != pyramid.original_dims && vol.dims != pyramid.finest_dims {
        return Err(invalid(format!(
            "volume dims {:?} do not match the pyramid {:?}",
            vol.dims, pyramid.original_dims
        )));
    }
    let layer = pyramid.layer(r)?;
    Ok(crate::par::map_range(layer.len(), |j| {
        let (mut lo, mut hi) = layer.patch_bounds(j);
        if r == 0 {
            lo = lo.map(|v| v.saturating_sub(1));
            hi = hi.map(|v| v + 1);
        }
        hog_mode(&hog_histogram(vol, channel, lo, hi))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::build_pyramid;

    fn volume(dims: Dims, f: impl Fn(f64, f64, f64) -> f64) -> Volume<f32> {
        let mut data = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x as f64, y as f64, z as f64) as f32);
                }
            }
        }
        Volume::new(dims, 1, data).unwrap()
    }

    fn mode(vol: &Volume<f32>) -> Option<f64> {
        hog_mode(&hog_histogram(vol, 0, [0; 3], vol.dims))
    }

    #[test]
    fn ramps() {
        assert_eq!(mode(&volume([6, 6, 3], |x, _, _| x)), Some(0.0));
        assert_eq!(mode(&volume([6, 6, 3], |_, y, _| 2.0 * y)), Some(90.0));
        // a descending ramp folds onto the same axis
        assert_eq!(mode(&volume([6, 6, 3], |x, _, _| -x)), Some(0.0));
        // z gradients have no axial component
        assert_eq!(mode(&volume([6, 6, 6], |_, _, z| z)), None);
    }

    #[test]
    fn grating_at_45_degrees() {
        let k = 2.0 * std::f64::consts::PI / 7.0;
        let v = volume([24, 24, 3], |x, y, _| ((x + y) * k / 2f64.sqrt()).sin());
        assert_eq!(mode(&v), Some(45.0));
        let v = volume([24, 24, 3], |x, y, _| ((x - y) * k / 2f64.sqrt()).sin());
        assert_eq!(mode(&v), Some(135.0));
    }

    #[test]
    fn binning_edges() {
        assert_eq!(hog_bin(0.0), 0);
        assert_eq!(hog_bin(2.49), 0);
        assert_eq!(hog_bin(2.5), 1);
        assert_eq!(hog_bin(177.6), 0);
        assert_eq!(axial_angle(-1.0, 0.0), 0.0);
        assert!((axial_angle(-1.0, -1.0) - 45.0).abs() < 1e-12);
    }

    #[test]
    fn modes_per_sample() {
        let p = build_pyramid([6, 6, 6], 1).unwrap();
        let v = volume([6, 6, 6], |x, _, _| x * x);
        let m0 = hog_modes(&v, 0, &p, 0).unwrap();
        assert_eq!(m0.len(), 216);
        assert!(m0.iter().all(|m| *m == Some(0.0)));
        let m1 = hog_modes(&v, 0, &p, 1).unwrap();
        assert_eq!(m1, vec![Some(0.0); 8]);
        let flat = volume([6, 6, 6], |_, _, _| 3.0);
        assert!(hog_modes(&flat, 0, &p, 1).unwrap().iter().all(Option::is_none));
        assert!(hog_modes(&flat, 1, &p, 1).is_err());
    }
}
