use serde::{Deserialize, Serialize};

use super::BinaryMask;
use crate::error::{Error, Result};

/// Pixel coordinates `(row, col)` on a region boundary, in row-major order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub points: Vec<(usize, usize)>,
}

impl BoundarySet {
    pub fn new(mut points: Vec<(usize, usize)>) -> Self {
        points.sort_unstable();
        points.dedup();
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, p: (usize, usize)) -> bool {
        self.points.binary_search(&p).is_ok()
    }
}

/// Foreground pixels with at least one background 4-neighbour; pixels
/// beyond the image border count as background.
pub fn boundary_points(mask: &BinaryMask) -> BoundarySet {
    let (h, w) = mask.dims();
    let points = mask
        .foreground()
        .filter(|&(r, c)| {
            r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1)
        })
        .collect();
    BoundarySet { points }
}

fn sq_dist(a: (usize, usize), b: (usize, usize)) -> u64 {
    let dr = a.0.abs_diff(b.0) as u64;
    let dc = a.1.abs_diff(b.1) as u64;
    dr * dr + dc * dc
}

/// `max over x in from of min over y in to of |x - y|`.
pub fn directed_hausdorff(from: &BoundarySet, to: &BoundarySet) -> Result<f64> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::EmptyInput(
            "hausdorff distance is undefined for an empty point set".into(),
        ));
    }
    let worst = from
        .points
        .iter()
        .map(|&x| to.points.iter().map(|&y| sq_dist(x, y)).min().unwrap_or(0))
        .max()
        .unwrap_or(0);
    Ok((worst as f64).sqrt())
}

/// Symmetric Hausdorff distance by exhaustive pairwise search.
pub fn hausdorff(a: &BoundarySet, b: &BoundarySet) -> Result<f64> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

/// Hausdorff distance divided by the image diagonal `sqrt(h² + w²)`.
pub fn normalized_hausdorff(a: &BoundarySet, b: &BoundarySet, h: usize, w: usize) -> Result<f64> {
    if h == 0 || w == 0 {
        return Err(Error::dim("normalized hausdorff needs positive image dims"));
    }
    if let Some(&(r, c)) = a.points.iter().chain(&b.points).find(|&&(r, c)| r >= h || c >= w) {
        return Err(Error::dim(format!(
            "boundary point ({r}, {c}) lies outside a {h}×{w} image"
        )));
    }
    let diag = ((h * h + w * w) as f64).sqrt();
    Ok(hausdorff(a, b)? / diag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[(usize, usize)]) -> BoundarySet {
        BoundarySet::new(points.to_vec())
    }

    #[test]
    fn boundary_examples() {
        let mut single = BinaryMask::empty(5, 5);
        single.set(2, 3, true);
        assert_eq!(boundary_points(&single).points, vec![(2, 3)]);

        let block = BinaryMask::from_fn(5, 5, |r, c| (1..4).contains(&r) && (1..4).contains(&c));
        let b = boundary_points(&block);
        assert_eq!(b.len(), 8);
        assert!(!b.contains((2, 2)));

        assert!(boundary_points(&BinaryMask::empty(4, 4)).is_empty());
    }

    #[test]
    fn border_pixels_are_boundary() {
        let full = BinaryMask::full(3, 3);
        assert_eq!(boundary_points(&full).len(), 8);
    }

    #[test]
    fn hausdorff_examples() {
        let a = set(&[(0, 0), (2, 5)]);
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(hausdorff(&set(&[(0, 0)]), &set(&[(3, 4)])).unwrap(), 5.0);
        assert_eq!(hausdorff(&set(&[(0, 0), (0, 3)]), &set(&[(0, 0)])).unwrap(), 3.0);
        assert!(matches!(
            hausdorff(&a, &BoundarySet::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn normalized_examples() {
        let a = set(&[(0, 0)]);
        assert_eq!(normalized_hausdorff(&a, &a, 10, 10).unwrap(), 0.0);
        let corner = set(&[(0, 0)]);
        let far = set(&[(99, 99)]);
        let d = normalized_hausdorff(&corner, &far, 100, 100).unwrap();
        let expected = (2.0f64 * 99.0 * 99.0).sqrt() / (20000.0f64).sqrt();
        assert!((d - expected).abs() < 1e-15 && d <= 1.0);
        let d = normalized_hausdorff(&set(&[(0, 0)]), &set(&[(3, 4)]), 100, 100).unwrap();
        assert!((d - 5.0 / 20000f64.sqrt()).abs() < 1e-12);
        assert!((d - 0.03536).abs() < 1e-5);
        assert!(normalized_hausdorff(&a, &set(&[(10, 0)]), 10, 10).is_err());
    }
}
