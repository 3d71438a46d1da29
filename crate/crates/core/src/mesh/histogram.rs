//! Curvature-magnitude histogram and the two FWHM populations.

use std::io::Write;

use serde::Serialize;

use crate::error::{invalid, Error, Result};

pub const HISTOGRAM_BINS: usize = 64;
pub const SMOOTHING_WINDOW: usize = 5;
/// Upper histogram edge as a percentile of the input magnitudes.
pub const UPPER_PERCENTILE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvatureHistogram {
    pub upper: f64,
    pub counts: Vec<u64>,
    /// Centered moving average of `counts`, truncated at the ends.
    pub smoothed: Vec<f64>,
    /// Magnitudes above `upper`, counted in the last bin.
    pub overflow: usize,
    /// Largest magnitude seen; the last bin extends to it.
    pub max: f64,
}

impl CurvatureHistogram {
    /// Bins non-negative magnitudes over `[0, p99]`. Values above the
    /// percentile go to the last bin so isolated spikes do not stretch the
    /// range.
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("curvature magnitudes must be finite and non-negative"));
        }
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let upper = if sorted.is_empty() {
            0.0
        } else {
            let rank = ((UPPER_PERCENTILE * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[rank - 1]
        };
        let mut overflow = 0;
        for &v in values {
            if v > upper {
                overflow += 1;
            }
            let b = if upper > 0.0 {
                ((v / upper * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        let smoothed = moving_average(&counts, SMOOTHING_WINDOW);
        let max = sorted.last().copied().unwrap_or(0.0);
        Ok(Self { upper, counts, smoothed, overflow, max })
    }

    pub fn bin_width(&self) -> f64 {
        self.upper / HISTOGRAM_BINS as f64
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        (b as f64 + 0.5) * self.bin_width()
    }

    pub fn pairs(&self) -> Vec<(f64, u64)> {
        self.counts.iter().enumerate().map(|(b, &n)| (self.bin_center(b), n)).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "bin_center,count")?;
        for (c, n) in self.pairs() {
            writeln!(out, "{c},{n}")?;
        }
        Ok(())
    }

    /// Local maxima of the smoothed histogram, first bin of any plateau.
    fn peaks(&self) -> Vec<usize> {
        let s = &self.smoothed;
        (0..s.len())
            .filter(|&i| {
                s[i] > 0.0 && (i == 0 || s[i] > s[i - 1]) && (i + 1 == s.len() || s[i] >= s[i + 1])
            })
            .collect()
    }

    /// Full width at half maximum around peak bin `p`, interpolated linearly
    /// between bin centers. A width that runs off either end extends to 0 or
    /// to the largest magnitude.
    fn fwhm(&self, p: usize) -> Interval {
        let s = &self.smoothed;
        let half = 0.5 * s[p];
        let cross = |a: usize, b: usize| {
            // s[a] >= half > s[b]
            let t = (s[a] - half) / (s[a] - s[b]);
            self.bin_center(a) + t * (self.bin_center(b) - self.bin_center(a))
        };
        let mut lo = 0.0;
        let mut i = p;
        while i > 0 {
            if s[i - 1] < half {
                lo = cross(i, i - 1);
                break;
            }
            i -= 1;
        }
        let mut hi = self.max;
        let mut i = p;
        while i + 1 < s.len() {
            if s[i + 1] < half {
                hi = cross(i, i + 1);
                break;
            }
            i += 1;
        }
        Interval { lo, hi }
    }
}

fn moving_average(counts: &[u64], window: usize) -> Vec<f64> {
    let h = window / 2;
    (0..counts.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(counts.len());
            counts[lo..hi].iter().sum::<u64>() as f64 / (hi - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Myocardium,
    Vessel,
    Untyped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvaturePopulations {
    pub histogram: CurvatureHistogram,
    /// FWHM of the lower peak.
    pub myocardium: Interval,
    /// FWHM of the upper peak.
    pub vessel: Interval,
}

impl CurvaturePopulations {
    pub fn classify(&self, magnitude: f64) -> Population {
        if self.myocardium.contains(magnitude) {
            Population::Myocardium
        } else if self.vessel.contains(magnitude) {
            Population::Vessel
        } else {
            Population::Untyped
        }
    }
}

/// Finds the two highest smoothed peaks and their FWHM intervals.
pub fn detect_populations(magnitudes: &[f64]) -> Result<CurvaturePopulations> {
    let histogram = CurvatureHistogram::new(magnitudes)?;
    let fail = |reason: String, h: &CurvatureHistogram| Error::PopulationDetection {
        reason,
        histogram: h.pairs(),
    };
    let mut peaks = histogram.peaks();
    if peaks.len() < 2 {
        return Err(fail(format!("found {} peak(s), need two", peaks.len()), &histogram));
    }
    // highest first, lower bin wins ties
    peaks.sort_by(|&a, &b| histogram.smoothed[b].total_cmp(&histogram.smoothed[a]).then(a.cmp(&b)));
    let (a, b) = (peaks[0].min(peaks[1]), peaks[0].max(peaks[1]));
    let myocardium = histogram.fwhm(a);
    let vessel = histogram.fwhm(b);
    if myocardium.hi >= vessel.lo {
        return Err(fail(
            format!(
                "FWHM intervals overlap: [{:.4}, {:.4}] and [{:.4}, {:.4}]",
                myocardium.lo, myocardium.hi, vessel.lo, vessel.hi
            ),
            &histogram,
        ));
    }
    Ok(CurvaturePopulations { histogram, myocardium, vessel })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_clusters() -> Vec<f64> {
        let mut v = Vec::new();
        for i in 0..400 {
            v.push(0.25 + 0.02 * ((i % 11) as f64 / 10.0 - 0.5));
        }
        for i in 0..150 {
            v.push(1.0 + 0.04 * ((i % 7) as f64 / 6.0 - 0.5));
        }
        v
    }

    #[test]
    fn histogram_shape_and_csv() {
        let mut v = two_clusters();
        v.extend([4.0, 5.0]);
        let h = CurvatureHistogram::new(&v).unwrap();
        assert_eq!(h.counts.len(), 64);
        assert_eq!(h.counts.iter().sum::<u64>(), 552);
        assert_eq!((h.overflow, h.max), (2, 5.0));
        assert!((h.upper - 1.02).abs() < 1e-12);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 65);
        assert!(text.starts_with("bin_center,count\n"));
    }

    #[test]
    fn moving_average_truncates_at_ends() {
        let m = moving_average(&[5, 0, 0, 0, 0, 0], 5);
        assert_eq!(m[0], 5.0 / 3.0);
        assert_eq!(m[1], 5.0 / 4.0);
        assert_eq!(m[2], 1.0);
        assert_eq!(m[5], 0.0);
    }

    #[test]
    fn two_clusters_give_two_populations() {
        let p = detect_populations(&two_clusters()).unwrap();
        assert!(p.myocardium.contains(0.25), "{:?}", p.myocardium);
        assert!(p.vessel.contains(1.0), "{:?}", p.vessel);
        assert!(p.myocardium.center() < p.vessel.center());
        assert_eq!(p.classify(0.25), Population::Myocardium);
        assert_eq!(p.classify(1.0), Population::Vessel);
        assert_eq!(p.classify(0.6), Population::Untyped);
    }

    #[test]
    fn single_cluster_fails_with_dump() {
        let v: Vec<f64> = (0..300).map(|i| 0.5 + 0.01 * ((i % 5) as f64 - 2.0)).collect();
        match detect_populations(&v) {
            Err(Error::PopulationDetection { histogram, .. }) => assert_eq!(histogram.len(), 64),
            other => panic!("expected population error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_negative() {
        assert!(CurvatureHistogram::new(&[0.1, -0.2]).is_err());
    }
}
