use super::GrayImage;
use crate::error::{AuditError, Result};

/// Variance of the 4-neighbour Laplacian response
/// `[[0,1,0],[1,-4,1],[0,1,0]]` over every pixel, borders replicated.
/// Population variance; lower means blurrier.
pub fn laplacian_score(g: &GrayImage) -> Result<f64> {
    if g.width() < 3 || g.height() < 3 {
        return Err(AuditError::Domain(format!(
            "Laplacian needs at least 3x3 pixels, got {}x{}",
            g.width(),
            g.height()
        )));
    }
    let response = laplacian_response(g);
    let n = response.len() as f64;
    let mean = response.iter().sum::<f64>() / n;
    Ok(response.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n)
}

pub(crate) fn laplacian_response(g: &GrayImage) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.width() * g.height());
    for y in 0..g.height() as isize {
        for x in 0..g.width() as isize {
            let c = g.get_clamped(x, y);
            out.push(
                g.get_clamped(x - 1, y) + g.get_clamped(x + 1, y) + g.get_clamped(x, y - 1)
                    + g.get_clamped(x, y + 1)
                    - 4.0 * c,
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::gaussian_blur;

    #[test]
    fn constant_image_scores_zero() {
        let g = GrayImage::from_fn(8, 8, |_, _| 100.0).unwrap();
        assert_eq!(laplacian_score(&g).unwrap(), 0.0);
    }

    #[test]
    fn impulse_in_three_by_three() {
        let g = GrayImage::from_fn(3, 3, |x, y| if (x, y) == (1, 1) { 255.0 } else { 0.0 }).unwrap();
        let r = laplacian_response(&g);
        assert_eq!(r[4], -1020.0);
        // Edge-adjacent pixels see the centre once; corners see nothing
        // (their replicated neighbours are zero).
        assert_eq!(r, vec![0.0, 255.0, 0.0, 255.0, -1020.0, 255.0, 0.0, 255.0, 0.0]);
        // mean = 0, variance = (4 * 255^2 + 1020^2) / 9
        let expected = (4.0 * 255.0f64.powi(2) + 1020.0f64.powi(2)) / 9.0;
        assert!((laplacian_score(&g).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn blurred_copy_scores_lower() {
        let g = GrayImage::from_fn(32, 32, |x, y| if (x / 4 + y / 4) % 2 == 0 { 220.0 } else { 30.0 })
            .unwrap();
        let b = gaussian_blur(&g, 2.0);
        assert!(laplacian_score(&b).unwrap() < laplacian_score(&g).unwrap());
    }

    #[test]
    fn too_small_is_rejected() {
        let g = GrayImage::from_fn(2, 5, |_, _| 0.0).unwrap();
        assert!(laplacian_score(&g).is_err());
    }
}
