//! Heatmap grid helpers: Gaussian target rendering and peak extraction.
//!
//! Coordinates are normalized to [0,1]^2 with x along columns and y along
//! rows; the cell (i, j) of an H x W grid has center ((j + 0.5) / W,
//! (i + 0.5) / H).

use ndarray::ArrayView2;
use thiserror::Error;

use crate::autodiff::Mat;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("point ({0}, {1}) lies outside [0,1]^2 by more than 1e-6")]
    PointOutOfRange(f64, f64),
    #[error("empty heatmap has no peak")]
    EmptyHeatmap,
}

/// Center of the cell holding `point` in an H x W grid, as (x, y).
pub fn cell_center(point: (f64, f64), h: usize, w: usize) -> (f64, f64) {
    let j = ((point.0 * w as f64).floor() as isize).clamp(0, w as isize - 1) as usize;
    let i = ((point.1 * h as f64).floor() as isize).clamp(0, h as isize - 1) as usize;
    ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)
}

/// Render an unnormalized Gaussian bump centered on `point`.
///
/// The map is evaluated at cell centers and rescaled so its maximum, which
/// falls in the cell containing the point, is exactly 1.0. Points outside
/// [0,1]^2 by at most 1e-6 are clamped with a warning; anything farther out
/// is an error. `sigma` is in normalized units.
pub fn render_gaussian(
    point: (f64, f64),
    sigma: f64,
    h: usize,
    w: usize,
) -> Result<Mat, GridError> {
    let (mut px, mut py) = point;
    if !(-1e-6..=1.0 + 1e-6).contains(&px) || !(-1e-6..=1.0 + 1e-6).contains(&py) {
        return Err(GridError::PointOutOfRange(px, py));
    }
    if !(0.0..=1.0).contains(&px) || !(0.0..=1.0).contains(&py) {
        log::warn!("gaze point ({px}, {py}) clamped into [0,1]^2");
        px = px.clamp(0.0, 1.0);
        py = py.clamp(0.0, 1.0);
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut d2 = Mat::zeros((h, w));
    let mut d2_min = f64::INFINITY;
    for i in 0..h {
        let cy = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let cx = (j as f64 + 0.5) / w as f64;
            let v = (cx - px) * (cx - px) + (cy - py) * (cy - py);
            d2[(i, j)] = v;
            if v < d2_min {
                d2_min = v;
            }
        }
    }
    // Rescaling so the nearest cell reads exactly 1.0 happens inside the
    // exponent; a shared exp(-d2_min * inv) factor could underflow to zero
    // for narrow bumps.
    Ok(d2.mapv(|v| (-(v - d2_min) * inv).exp()))
}

/// Normalized center coordinates (x, y) of the maximum cell.
///
/// Ties resolve to the smallest row-major index.
pub fn peak_coords(map: ArrayView2<f64>) -> Result<(f64, f64), GridError> {
    let (h, w) = map.dim();
    if h == 0 || w == 0 {
        return Err(GridError::EmptyHeatmap);
    }
    let mut best = (0usize, 0usize);
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..h {
        for j in 0..w {
            let v = map[(i, j)];
            if v > best_v {
                best_v = v;
                best = (i, j);
            }
        }
    }
    Ok((
        (best.1 as f64 + 0.5) / w as f64,
        (best.0 as f64 + 0.5) / h as f64,
    ))
}

/// Peak coordinates of a row-major flattened H x W map stored as one row.
pub fn peak_coords_flat(row: &[f64], h: usize, w: usize) -> Result<(f64, f64), GridError> {
    let view = ArrayView2::from_shape((h, w), row).expect("flat heatmap shape");
    peak_coords(view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn gaussian_peaks_at_containing_cell_with_value_one() {
        let m = render_gaussian((0.26, 0.74), 0.1, 16, 16).unwrap();
        let mx = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(mx, 1.0);
        let (x, y) = peak_coords(m.view()).unwrap();
        // 0.26 * 16 = 4.16 -> column 4; 0.74 * 16 = 11.84 -> row 11.
        assert_abs_diff_eq!(x, 4.5 / 16.0);
        assert_abs_diff_eq!(y, 11.5 / 16.0);
        assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn tiny_sigma_concentrates_mass_in_one_cell() {
        let m = render_gaussian((0.43, 0.56), 1e-6, 8, 8).unwrap();
        let total: f64 = m.sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        assert_eq!(m[(4, 3)], 1.0);
    }

    #[test]
    fn mirrored_points_give_mirrored_maps() {
        let a = render_gaussian((0.25, 0.25), 0.12, 8, 8).unwrap();
        let b = render_gaussian((0.75, 0.75), 0.12, 8, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_abs_diff_eq!(a[(i, j)], b[(7 - i, 7 - j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn whole_cell_translation_preserves_values() {
        let a = render_gaussian((0.26, 0.26), 0.1, 16, 16).unwrap();
        let b = render_gaussian((0.26 + 2.0 / 16.0, 0.26), 0.1, 16, 16).unwrap();
        // Away from the clipped boundary the pattern shifts by exactly two columns.
        for i in 0..16 {
            for j in 0..10 {
                assert_abs_diff_eq!(a[(i, j)], b[(i, j + 2)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn slightly_out_of_range_point_is_clamped_and_farther_is_error() {
        assert!(render_gaussian((1.0 + 5e-7, 0.5), 0.1, 8, 8).is_ok());
        assert!(matches!(
            render_gaussian((1.1, 0.5), 0.1, 8, 8),
            Err(GridError::PointOutOfRange(..))
        ));
    }

    #[test]
    fn peak_coords_matches_single_delta() {
        let mut m = Array2::zeros((4, 4));
        m[(0, 0)] = 1.0;
        assert_eq!(peak_coords(m.view()).unwrap(), (0.125, 0.125));
    }

    #[test]
    fn peak_ties_break_at_smallest_row_major_index() {
        let mut m = Array2::zeros((4, 4));
        m[(0, 3)] = 1.0;
        m[(2, 1)] = 1.0;
        assert_eq!(peak_coords(m.view()).unwrap(), (0.875, 0.125));
    }

    #[test]
    fn uniform_map_peaks_at_first_cell() {
        let m = Array2::from_elem((4, 4), 0.5);
        assert_eq!(peak_coords(m.view()).unwrap(), (0.125, 0.125));
    }
}
