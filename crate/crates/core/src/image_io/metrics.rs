use super::{ImageGrid, MaskGrid};
use crate::error::{Error, Result};
use crate::tensor::mirror_index;

/// Pixels a metric averages over.
#[derive(Clone, Copy, Debug)]
pub enum Region<'a> {
    Whole,
    /// The inpainting domain of the mask (pixels with `c = 0`).
    Unknown(&'a MaskGrid),
}

impl Region<'_> {
    fn indices(&self, len: usize) -> Vec<usize> {
        match self {
            Region::Whole => (0..len).collect(),
            Region::Unknown(m) => (0..len).filter(|&i| !m.known()[i]).collect(),
        }
    }

    fn check(&self, dims: (usize, usize)) -> Result<()> {
        if let Region::Unknown(m) = self {
            if m.dims() != dims {
                return Err(Error::shape("region", &[m.height(), m.width()], &[dims.0, dims.1]));
            }
        }
        Ok(())
    }
}

fn mean_over(a: &ImageGrid, b: &ImageGrid, region: Region<'_>, f: impl Fn(f64) -> f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "metric",
            &[a.height(), a.width()],
            &[b.height(), b.width()],
        ));
    }
    region.check(a.dims())?;
    let idx = region.indices(a.data().len());
    if idx.is_empty() {
        return Err(Error::InvalidArgument("metric region is empty".into()));
    }
    let total: f64 = idx.iter().map(|&i| f(a.data()[i] - b.data()[i])).sum();
    Ok(total / idx.len() as f64)
}

/// Mean absolute error over `region`.
pub fn mae(a: &ImageGrid, b: &ImageGrid, region: Region<'_>) -> Result<f64> {
    mean_over(a, b, region, f64::abs)
}

/// Mean squared error over `region`.
pub fn mse(a: &ImageGrid, b: &ImageGrid, region: Region<'_>) -> Result<f64> {
    mean_over(a, b, region, |d| d * d)
}

/// Strength of the `(-1)^(i+j)` pattern in `img` over `region`.
///
/// The local mean is removed with the 3x3 binomial filter (mirror boundary),
/// which annihilates the checkerboard exactly and reproduces affine images
/// exactly away from the border. The score is the absolute mean of the
/// residual times `(-1)^(i+j)`: zero for smooth images, `alpha` for a pure
/// `+-alpha` checkerboard.
pub fn checkerboard_score(img: &ImageGrid, region: Region<'_>) -> Result<f64> {
    region.check(img.dims())?;
    let (h, w) = img.dims();
    let idx = region.indices(h * w);
    if idx.is_empty() {
        return Err(Error::InvalidArgument("checkerboard region is empty".into()));
    }
    const WEIGHTS: [f64; 3] = [0.25, 0.5, 0.25];
    let total: f64 = idx
        .iter()
        .map(|&k| {
            let (i, j) = (k / w, k % w);
            let mut smooth = 0.0;
            for (a, wa) in WEIGHTS.iter().enumerate() {
                let ii = mirror_index(i as isize + a as isize - 1, h);
                for (b, wb) in WEIGHTS.iter().enumerate() {
                    let jj = mirror_index(j as isize + b as isize - 1, w);
                    smooth += wa * wb * img.get(ii, jj);
                }
            }
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            sign * (img.get(i, j) - smooth)
        })
        .sum();
    Ok((total / idx.len() as f64).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_and_mse_basics() {
        let a = ImageGrid::constant(4, 4, 0.0);
        let b = ImageGrid::constant(4, 4, 1.0);
        assert_eq!(mae(&a, &a, Region::Whole).unwrap(), 0.0);
        assert_eq!(mae(&a, &b, Region::Whole).unwrap(), 1.0);
        assert_eq!(mse(&a, &b, Region::Whole).unwrap(), 1.0);

        // half the region off by 0.2
        let c = ImageGrid::from_fn(4, 4, |i, _| if i < 2 { 0.2 } else { 0.0 });
        assert!((mae(&a, &c, Region::Whole).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn region_restricts_to_unknown_pixels() {
        let a = ImageGrid::constant(2, 2, 0.0);
        let b = ImageGrid::from_fn(2, 2, |i, j| if (i, j) == (0, 0) { 1.0 } else { 0.0 });
        let m = MaskGrid::from_fn(2, 2, |i, j| (i, j) != (0, 0));
        assert_eq!(mae(&a, &b, Region::Unknown(&m)).unwrap(), 1.0);
        let full = MaskGrid::all_known(2, 2);
        assert!(mae(&a, &b, Region::Unknown(&full)).is_err());
    }

    #[test]
    fn checkerboard_score_cases() {
        let constant = ImageGrid::constant(8, 8, 0.4);
        assert!(checkerboard_score(&constant, Region::Whole).unwrap() < 1e-15);

        let alpha = 0.3;
        let board = ImageGrid::from_fn(8, 10, |i, j| 0.5 + if (i + j) % 2 == 0 { alpha } else { -alpha });
        assert!((checkerboard_score(&board, Region::Whole).unwrap() - alpha).abs() < 1e-12);

        let (h, w) = (16, 24);
        let ramp = ImageGrid::from_fn(h, w, |_, j| j as f64 / (w - 1) as f64);
        let s = checkerboard_score(&ramp, Region::Whole).unwrap();
        assert!(s < 1.0 / h.min(w) as f64, "{s}");
    }
}
