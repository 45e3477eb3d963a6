//! Agreement between related task predictions: segmentation against
//! edges, and depth against surface normals.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Edge probabilities at or above this count as edges.
pub const EDGE_THRESHOLD: f64 = 0.5;

/// 1 where any in-bounds 4-neighbour carries a different label.
pub fn seg_to_edges(labels: &Array2<i64>) -> Array2<u8> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let l = labels[[i, j]];
        let differs = (i > 0 && labels[[i - 1, j]] != l)
            || (i + 1 < h && labels[[i + 1, j]] != l)
            || (j > 0 && labels[[i, j - 1]] != l)
            || (j + 1 < w && labels[[i, j + 1]] != l);
        u8::from(differs)
    })
}

/// Derivative along `axis`: central differences inside, one-sided at the
/// borders, zero when the axis has a single sample.
fn gradient(z: &Array2<f64>, axis: Axis) -> Array2<f64> {
    let len = z.len_of(axis);
    Array2::from_shape_fn(z.raw_dim(), |(i, j)| {
        if len < 2 {
            return 0.0;
        }
        let k = if axis == Axis(0) { i } else { j };
        let at = |k: usize| if axis == Axis(0) { z[[k, j]] } else { z[[i, k]] };
        if k == 0 {
            at(1) - at(0)
        } else if k == len - 1 {
            at(k) - at(k - 1)
        } else {
            (at(k + 1) - at(k - 1)) / 2.0
        }
    })
}

/// Unit normals `(-dz/dx, -dz/dy, 1) / norm` with x along columns and y
/// along rows; the result is `H x W x 3`.
pub fn depth_to_normals(depth: &Array2<f64>) -> Array3<f64> {
    let zx = gradient(depth, Axis(1));
    let zy = gradient(depth, Axis(0));
    let (h, w) = depth.dim();
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let (a, b) = (-zx[[i, j]], -zy[[i, j]]);
            let norm = (a * a + b * b + 1.0).sqrt();
            out[[i, j, 0]] = a / norm;
            out[[i, j, 1]] = b / norm;
            out[[i, j, 2]] = 1.0 / norm;
        }
    }
    out
}

/// Pixel accuracy of the predicted edges against the segmentation's edges.
pub fn semantic_consistency(seg: &Array2<i64>, edge_prob: &Array2<f64>) -> Result<f64> {
    if seg.dim() != edge_prob.dim() {
        return Err(Error::Shape(format!(
            "segmentation {:?} vs edges {:?}",
            seg.dim(),
            edge_prob.dim()
        )));
    }
    if seg.is_empty() {
        return Err(Error::Shape("empty prediction maps".into()));
    }
    let edges = seg_to_edges(seg);
    let matches = edges
        .iter()
        .zip(edge_prob)
        .filter(|(&e, &p)| (e == 1) == (p >= EDGE_THRESHOLD))
        .count();
    Ok(matches as f64 / seg.len() as f64)
}

/// Mean cosine between normals derived from depth and predicted normals.
pub fn geometric_consistency(depth: &Array2<f64>, normals: &Array3<f64>) -> Result<f64> {
    let (h, w) = depth.dim();
    if normals.dim() != (h, w, 3) {
        return Err(Error::Shape(format!(
            "depth {:?} vs normals {:?}",
            depth.dim(),
            normals.dim()
        )));
    }
    if depth.is_empty() {
        return Err(Error::Shape("empty prediction maps".into()));
    }
    let derived = depth_to_normals(depth);
    let mut sum = 0.0;
    for i in 0..h {
        for j in 0..w {
            let p = [normals[[i, j, 0]], normals[[i, j, 1]], normals[[i, j, 2]]];
            let q = [derived[[i, j, 0]], derived[[i, j, 1]], derived[[i, j, 2]]];
            let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if pn == 0.0 || !pn.is_finite() {
                return Err(Error::Degenerate(format!(
                    "normal at pixel ({i}, {j}) has zero length"
                )));
            }
            // derived normals are unit length by construction
            sum += p.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / pn;
        }
    }
    Ok(sum / (h * w) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn edge_oracle(l: &Array2<i64>) -> Array2<u8> {
        let (h, w) = l.dim();
        let mut out = Array2::zeros((h, w));
        for i in 0..h as isize {
            for j in 0..w as isize {
                for (di, dj) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (a, b) = (i + di, j + dj);
                    if a >= 0
                        && b >= 0
                        && a < h as isize
                        && b < w as isize
                        && l[[a as usize, b as usize]] != l[[i as usize, j as usize]]
                    {
                        out[[i as usize, j as usize]] = 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn edges_examples() {
        assert!(seg_to_edges(&Array2::from_elem((5, 4), 3))
            .iter()
            .all(|&v| v == 0));
        let halves = Array2::from_shape_fn((4, 4), |(_, j)| i64::from(j >= 2));
        let e = seg_to_edges(&halves);
        assert_eq!(e.iter().map(|&v| v as usize).sum::<usize>(), 8);
        assert!(e.column(1).iter().chain(e.column(2).iter()).all(|&v| v == 1));
    }

    #[test]
    fn edges_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let l = Array2::from_shape_simple_fn((16, 16), || rng.random_range(0..4i64));
            assert_eq!(seg_to_edges(&l), edge_oracle(&l));
        }
    }

    #[test]
    fn semantic_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = Array2::from_shape_simple_fn((8, 8), || rng.random_range(0..3i64));
        let e = seg_to_edges(&seg).mapv(f64::from);
        assert_eq!(semantic_consistency(&seg, &e).unwrap(), 1.0);
        assert_eq!(semantic_consistency(&seg, &e.mapv(|v| 1.0 - v)).unwrap(), 0.0);
        let probs = Array2::from_shape_simple_fn((8, 8), || rng.random::<f64>());
        let oracle = edge_oracle(&seg);
        let mut hits = 0;
        for i in 0..8 {
            for j in 0..8 {
                if (oracle[[i, j]] == 1) == (probs[[i, j]] >= 0.5) {
                    hits += 1;
                }
            }
        }
        assert_eq!(semantic_consistency(&seg, &probs).unwrap(), hits as f64 / 64.0);
        assert!(matches!(
            semantic_consistency(&seg, &Array2::zeros((8, 7))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn normals_examples() {
        let flat = depth_to_normals(&Array2::from_elem((4, 5), 2.5));
        for p in flat.lanes(Axis(2)) {
            assert_eq!(p.to_vec(), vec![0.0, 0.0, 1.0]);
        }
        let plane = Array2::from_shape_fn((5, 6), |(_, j)| j as f64);
        let n = depth_to_normals(&plane);
        let r = 1.0 / 2f64.sqrt();
        for i in 1..4 {
            for j in 1..5 {
                assert!((n[[i, j, 0]] + r).abs() < 1e-15);
                assert!(n[[i, j, 1]].abs() < 1e-15);
                assert!((n[[i, j, 2]] - r).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn normals_are_unit_and_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, b): (f64, f64) = (rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
            let d = Array2::from_shape_fn((16, 16), |(i, j)| {
                (a * i as f64).sin() + (b * j as f64).cos() * 2.0
            });
            let n = depth_to_normals(&d);
            for p in n.lanes(Axis(2)) {
                assert!((p.dot(&p) - 1.0).abs() < 1e-10);
            }
            assert!((geometric_consistency(&d, &n).unwrap() - 1.0).abs() < 1e-10);
            assert!((geometric_consistency(&d, &n.mapv(|v| -v)).unwrap() + 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn geometric_range_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let d = Array2::from_shape_simple_fn((6, 7), || rng.random_range(-1.0..1.0));
            let n = Array3::from_shape_simple_fn((6, 7, 3), || rng.random_range(-1.0..1.0));
            let g = geometric_consistency(&d, &n).unwrap();
            assert!((-1.0..=1.0).contains(&g));
        }
        let d = Array2::zeros((2, 2));
        let mut n = depth_to_normals(&d);
        n[[1, 0, 2]] = 0.0;
        assert!(matches!(geometric_consistency(&d, &n), Err(Error::Degenerate(_))));
        assert!(matches!(
            geometric_consistency(&d, &Array3::zeros((2, 3, 3))),
            Err(Error::Shape(_))
        ));
    }
}
