use crate::error::{Error, Result};

pub const OTSU_BINS: usize = 256;
/// Largest image the exact integer comparison supports.
pub const OTSU_MAX_PIXELS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct OtsuResult {
    pub mask: Vec<u8>,
    /// Highest background bin; `None` for a constant image.
    pub bin: Option<usize>,
    /// Intensity at the upper edge of `bin`.
    pub threshold: Option<f64>,
    /// Set when the image is constant and no threshold exists.
    pub degenerate: bool,
}

/// Bins `image` into [`OTSU_BINS`] equal-width bins over `[min, max]`.
/// Returns `None` for a constant image.
pub fn histogram_bins(image: &[f64]) -> Result<Option<(Vec<usize>, f64, f64)>> {
    if image.is_empty() {
        return Err(Error::invalid("otsu_threshold", "empty image"));
    }
    if let Some(p) = image.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid("otsu_threshold", format!("pixel {p} is not finite")));
    }
    let lo = image.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(None);
    }
    let scale = OTSU_BINS as f64 / (hi - lo);
    let bins = image
        .iter()
        .map(|&v| (((v - lo) * scale) as usize).min(OTSU_BINS - 1))
        .collect();
    Ok(Some((bins, lo, hi)))
}

/// Global threshold maximizing between-class variance. Foreground is every
/// pixel whose bin lies above the chosen bin; the first maximizing bin wins
/// ties. The comparison is done exactly in integers:
/// `w0 w1 (mu0 - mu1)^2` is proportional to `(s0 n1 - s1 n0)^2 / (n0 n1)`.
pub fn otsu_threshold(image: &[f64]) -> Result<OtsuResult> {
    if image.len() > OTSU_MAX_PIXELS {
        return Err(Error::invalid(
            "otsu_threshold",
            format!("{} pixels exceeds the supported {OTSU_MAX_PIXELS}", image.len()),
        ));
    }
    let Some((bins, lo, hi)) = histogram_bins(image)? else {
        return Ok(OtsuResult {
            mask: vec![0; image.len()],
            bin: None,
            threshold: None,
            degenerate: true,
        });
    };
    let mut hist = [0u64; OTSU_BINS];
    for &b in &bins {
        hist[b] += 1;
    }
    let n: u64 = image.len() as u64;
    let s: u64 = hist.iter().enumerate().map(|(i, &h)| i as u64 * h).sum();

    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, u128, u128)> = None;
    for (k, &h) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        n0 += h;
        s0 += k as u64 * h;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = s - s0;
        let diff = (s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128).unsigned_abs();
        let num = diff * diff;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    let (k, _, _) = best.expect("a non-constant image has two occupied bins");
    Ok(OtsuResult {
        mask: bins.iter().map(|&b| u8::from(b > k)).collect(),
        bin: Some(k),
        threshold: Some(lo + (k + 1) as f64 * (hi - lo) / OTSU_BINS as f64),
        degenerate: false,
    })
}
