use ndarray::ArrayView3;

/// (mean, population std, skewness, excess kurtosis) of raw HU. A
/// zero-variance patch reports skewness and kurtosis as 0.
pub fn firstorder_features(voxels: ArrayView3<'_, i16>) -> [f64; 4] {
    let n = voxels.len() as f64;
    if voxels.is_empty() {
        return [0.0; 4];
    }
    let mean = voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in voxels.iter() {
        let d = v as f64 - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 <= 0.0 {
        return [mean, 0.0, 0.0, 0.0];
    }
    [mean, m2.sqrt(), m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0]
}
