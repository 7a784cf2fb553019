//! Slicewise 8-neighbour local binary patterns.

use ndarray::ArrayView3;

pub const LBP_BINS: usize = 8;

/// Neighbour offsets (dy, dx), clockwise from the top-left.
const RING: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// Maps the number of set bits (0..=8) to a bin. Counts 0 and 1 are the
/// rarest in practice and share bin 0, so bin 7 is the all-ones pattern.
pub fn bin_for_ones(ones: u32) -> usize {
    (ones.max(1) - 1) as usize
}

/// 8-bit code of interior pixel (y, x) of axial slice z, bit k set when
/// neighbour k is >= the centre.
pub fn lbp_code(voxels: ArrayView3<'_, i16>, z: usize, y: usize, x: usize) -> u8 {
    let c = voxels[[z, y, x]];
    RING.iter().enumerate().fold(0u8, |code, (k, &(dy, dx))| {
        let n = voxels[[z, (y as isize + dy) as usize, (x as isize + dx) as usize]];
        if n >= c {
            code | (1 << k)
        } else {
            code
        }
    })
}

/// Normalized histogram over the interior pixels of every axial slice.
/// Slices with no interior (side < 3) contribute nothing; if no slice has
/// one, the patch is treated as flat and all mass goes to the all-ones bin.
pub fn lbp_histogram(voxels: ArrayView3<'_, i16>) -> [f64; LBP_BINS] {
    let (d, h, w) = voxels.dim();
    let mut counts = [0u64; LBP_BINS];
    for z in 0..d {
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                counts[bin_for_ones(lbp_code(voxels, z, y, x).count_ones())] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let mut hist = [0.0; LBP_BINS];
    if total == 0 {
        hist[LBP_BINS - 1] = 1.0;
        return hist;
    }
    for (h, c) in hist.iter_mut().zip(counts) {
        *h = c as f64 / total as f64;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn constant_patch_fills_all_ones_bin() {
        let v = Array3::from_elem((4, 5, 6), -800i16);
        let h = lbp_histogram(v.view());
        assert_eq!(h[7], 1.0);
        assert_eq!(h[..7].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn bin_mapping_merges_zero_and_one() {
        assert_eq!(bin_for_ones(0), 0);
        assert_eq!(bin_for_ones(1), 0);
        assert_eq!(bin_for_ones(2), 1);
        assert_eq!(bin_for_ones(8), 7);
    }
}
