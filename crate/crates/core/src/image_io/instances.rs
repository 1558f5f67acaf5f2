//! Synthetic shape-completion instances.
//!
//! Every instance is a binary image (white shape on black) whose central
//! band of `gap` columns is hidden. Completing it requires continuing
//! straight edges (`BarGap`, `DoubleBar`) or curved ones (`CircleArc`)
//! across the band.

use std::str::FromStr;

use super::{ImageGrid, MaskGrid};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    /// One horizontal bar of thickness `size / 4`.
    BarGap,
    /// Annulus with radii `size / 4` and `3 size / 8`.
    CircleArc,
    /// Two horizontal bars of thickness `size / 4` at a quarter and three
    /// quarters of the height.
    DoubleBar,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::BarGap => "bar-gap",
            ShapeKind::CircleArc => "circle-arc",
            ShapeKind::DoubleBar => "double-bar",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bar-gap" => Ok(ShapeKind::BarGap),
            "circle-arc" => Ok(ShapeKind::CircleArc),
            "double-bar" => Ok(ShapeKind::DoubleBar),
            other => Err(Error::InvalidArgument(format!(
                "unknown shape kind {other:?}; expected bar-gap, circle-arc or double-bar"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    pub ground_truth: ImageGrid,
    pub mask: MaskGrid,
    /// Hidden columns `start..end`.
    pub band: (usize, usize),
    /// Rows `r` such that a horizontal edge lies between rows `r - 1` and `r`.
    pub horizontal_edges: Vec<usize>,
}

/// Straightness and sharpness of the horizontal edges inside the band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeQuality {
    /// Largest distance (pixels) between a 0.5-level crossing and the line
    /// joining the visible edge ends. Infinite if an edge was not found.
    pub max_deviation: f64,
    /// Largest number of pixel steps between the last value `<= 0.2` and the
    /// first value `>= 0.8` across an edge. `usize::MAX` if not found.
    pub max_transition: usize,
}

pub fn make_shape_instance(kind: ShapeKind, size: usize, gap: usize) -> Result<ShapeInstance> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!(
            "shape instances need size >= 16, got {size}"
        )));
    }
    if gap >= size {
        return Err(Error::InvalidArgument(format!(
            "gap {gap} must be smaller than size {size}"
        )));
    }
    let start = (size - gap) / 2;
    let band = (start, start + gap);
    let (ground_truth, horizontal_edges) = match kind {
        ShapeKind::BarGap => {
            let (top, bottom) = (size / 2 - size / 8, size / 2 + size / 8);
            let img = ImageGrid::from_fn(size, size, |i, _| if (top..bottom).contains(&i) { 1.0 } else { 0.0 });
            (img, vec![top, bottom])
        }
        ShapeKind::DoubleBar => {
            let t = size / 4;
            let bars = [
                (size / 4 - t / 2, size / 4 - t / 2 + t),
                (3 * size / 4 - t / 2, 3 * size / 4 - t / 2 + t),
            ];
            let img = ImageGrid::from_fn(size, size, |i, _| {
                if bars.iter().any(|(a, b)| (*a..*b).contains(&i)) {
                    1.0
                } else {
                    0.0
                }
            });
            (img, bars.iter().flat_map(|&(a, b)| [a, b]).collect())
        }
        ShapeKind::CircleArc => {
            let c = (size as f64 - 1.0) / 2.0;
            let (r_in, r_out) = (size as f64 / 4.0, 3.0 * size as f64 / 8.0);
            let img = ImageGrid::from_fn(size, size, |i, j| {
                let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
                if (r_in..r_out).contains(&r) {
                    1.0
                } else {
                    0.0
                }
            });
            (img, Vec::new())
        }
    };
    let mask = MaskGrid::from_fn(size, size, |_, j| !(band.0..band.1).contains(&j));
    Ok(ShapeInstance {
        kind,
        ground_truth,
        mask,
        band,
        horizontal_edges,
    })
}

impl ShapeInstance {
    /// Measures every horizontal edge in every hidden column of `img`.
    pub fn edge_quality(&self, img: &ImageGrid) -> EdgeQuality {
        let h = img.height();
        let mut edges = self.horizontal_edges.clone();
        edges.sort_unstable();
        let spacing = edges
            .windows(2)
            .map(|w| w[1] - w[0])
            .chain(edges.first().map(|&e| 2 * e))
            .chain(edges.last().map(|&e| 2 * (h - e)))
            .min()
            .unwrap_or(h);
        let window = (spacing / 2).max(2) as isize;

        let mut quality = EdgeQuality {
            max_deviation: 0.0,
            max_transition: 0,
        };
        for j in self.band.0..self.band.1 {
            for &r in &edges {
                let expected = r as f64 - 0.5;
                let bright_below = self.ground_truth.get(r, j) > self.ground_truth.get(r - 1, j);
                let value = |i: isize| img.get(i as usize, j);
                let lo = (r as isize - window).max(0);
                let hi = (r as isize + window - 1).min(h as isize - 1);

                let crossing = (lo..hi)
                    .filter_map(|i| {
                        let (a, b) = (value(i) - 0.5, value(i + 1) - 0.5);
                        (a == 0.0 || a.signum() != b.signum()).then(|| i as f64 + a / (a - b))
                    })
                    .min_by(|x, y| (x - expected).abs().total_cmp(&(y - expected).abs()));
                let Some(crossing) = crossing else {
                    quality.max_deviation = f64::INFINITY;
                    quality.max_transition = usize::MAX;
                    continue;
                };
                quality.max_deviation = quality.max_deviation.max((crossing - expected).abs());

                // Walk outward from the crossing to the dark and bright plateaus.
                let (dark_step, bright_step) = if bright_below { (-1, 1) } else { (1, -1) };
                let start_dark = if bright_below {
                    crossing.floor() as isize
                } else {
                    crossing.ceil() as isize
                };
                let start_bright = if bright_below {
                    crossing.ceil() as isize
                } else {
                    crossing.floor() as isize
                };
                let find = |start: isize, step: isize, ok: &dyn Fn(f64) -> bool| {
                    let mut i = start;
                    while i >= lo && i <= hi {
                        if ok(value(i)) {
                            return Some(i);
                        }
                        i += step;
                    }
                    None
                };
                let dark = find(start_dark, dark_step, &|v| v <= 0.2);
                let bright = find(start_bright, bright_step, &|v| v >= 0.8);
                let transition = match (dark, bright) {
                    (Some(d), Some(b)) => (b - d).unsigned_abs(),
                    _ => usize::MAX,
                };
                quality.max_transition = quality.max_transition.max(transition);
            }
        }
        quality
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gap_hides_nothing() {
        let inst = make_shape_instance(ShapeKind::BarGap, 64, 0).unwrap();
        assert_eq!(inst.mask.count_unknown(), 0);
    }

    #[test]
    fn bar_gap_band_is_the_central_columns() {
        let inst = make_shape_instance(ShapeKind::BarGap, 64, 32).unwrap();
        assert_eq!(inst.band, (16, 48));
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(inst.mask.is_known(i, j), !(16..48).contains(&j));
            }
        }
        // the band crosses the bar
        assert_eq!(inst.ground_truth.get(32, 32), 1.0);
        assert_eq!(inst.ground_truth.get(5, 32), 0.0);
        assert_eq!(inst.horizontal_edges, vec![24, 40]);
    }

    #[test]
    fn large_instance_has_a_two_hundred_pixel_gap() {
        let inst = make_shape_instance(ShapeKind::DoubleBar, 400, 200).unwrap();
        assert_eq!(inst.band.1 - inst.band.0, 200);
        assert_eq!(inst.mask.count_unknown(), 400 * 200);
    }

    #[test]
    fn degenerate_geometry_is_rejected() {
        assert!(make_shape_instance(ShapeKind::BarGap, 64, 64).is_err());
        assert!(make_shape_instance(ShapeKind::CircleArc, 8, 2).is_err());
    }

    #[test]
    fn ground_truth_has_perfect_edges() {
        for kind in [ShapeKind::BarGap, ShapeKind::DoubleBar] {
            let inst = make_shape_instance(kind, 128, 48).unwrap();
            let q = inst.edge_quality(&inst.ground_truth);
            assert_eq!(q.max_deviation, 0.0);
            assert_eq!(q.max_transition, 1);
        }
    }

    #[test]
    fn blank_band_has_no_edges() {
        let inst = make_shape_instance(ShapeKind::DoubleBar, 64, 16).unwrap();
        let q = inst.edge_quality(&ImageGrid::constant(64, 64, 0.0));
        assert!(q.max_deviation.is_infinite());
    }

    #[test]
    fn kind_names_parse_back() {
        for kind in [ShapeKind::BarGap, ShapeKind::CircleArc, ShapeKind::DoubleBar] {
            assert_eq!(kind.name().parse::<ShapeKind>().unwrap(), kind);
        }
    }
}
