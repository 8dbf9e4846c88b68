use serde::{Deserialize, Serialize};

/// z for a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Sample mean with a normal-approximation 95% interval
/// `mean ± 1.96·s/√n`, `s` the unbiased sample deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub n: usize,
    pub mean: f64,
    /// `None` with fewer than two samples.
    pub half_width: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl MeanCi {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                n,
                mean: f64::NAN,
                half_width: None,
                lo: None,
                hi: None,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let half_width = (n >= 2).then(|| {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            Z95 * var.sqrt() / (n as f64).sqrt()
        });
        Self {
            n,
            mean,
            half_width,
            lo: half_width.map(|h| mean - h),
            hi: half_width.map(|h| mean + h),
        }
    }
}

/// Median; the mean of the middle pair for even counts.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}
