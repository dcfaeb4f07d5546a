//! Fixed-width moving-window Pearson correlations.

/// Pearson correlation of two equal-length slices; 0 when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Start of the window used at scan `t`: centered, shifted inward at the
/// series boundaries so that every window has exactly `window` scans.
pub fn window_start(t: usize, window: usize, len: usize) -> usize {
    let half = window / 2;
    t.saturating_sub(half).min(len.saturating_sub(window))
}

/// Correlation at every scan over a centered window of `window` scans
/// (capped at the series length).
pub fn sliding_correlation(a: &[f64], b: &[f64], window: usize) -> Vec<f64> {
    let len = a.len();
    let w = window.clamp(2, len.max(2)).min(len);
    (0..len)
        .map(|t| {
            let s = window_start(t, w, len);
            pearson(&a[s..s + w], &b[s..s + w])
        })
        .collect()
}
