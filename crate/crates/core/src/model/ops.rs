//! Prototype-unit primitives: log-ratio similarity, top-k pooling and the
//! adaptive-average upscaling that turns activation maps into PAMs.

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::grid::{ActivationMap, Grid};

/// Similarity between a patch and a prototype at L2 distance `d`.
#[inline]
pub fn similarity(distance: f64, epsilon: f64) -> f64 {
    ((distance + 1.0) / (distance + epsilon)).ln()
}

/// d/dd of [`similarity`]. Always negative for `epsilon < 1`.
#[inline]
pub fn similarity_slope(distance: f64, epsilon: f64) -> f64 {
    1.0 / (distance + 1.0) - 1.0 / (distance + epsilon)
}

#[inline]
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Distances from every patch of `z` to `prototype`, row-major over the grid.
pub fn distance_map(z: &FeatureMap, prototype: &[f64], prototype_id: usize) -> Result<Grid> {
    if prototype.len() != z.depth() {
        return Err(Error::Shape(format!(
            "prototype {prototype_id} has length {} but feature depth is {}",
            prototype.len(),
            z.depth()
        )));
    }
    let values = (0..z.rows() * z.cols())
        .map(|cell| l2_distance(z.patch_at(cell), prototype))
        .collect();
    Ok(Grid::new(z.rows(), z.cols(), values))
}

pub fn similarity_map(
    z: &FeatureMap,
    prototype: &[f64],
    prototype_id: usize,
    epsilon: f64,
) -> Result<ActivationMap> {
    let mut d = distance_map(z, prototype, prototype_id)?;
    for v in d.values_mut() {
        *v = similarity(*v, epsilon);
    }
    Ok(d)
}

/// Indices of the `k` largest values, largest first; lower index wins ties.
pub fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Indices of the `k` smallest values, smallest first; lower index wins ties.
pub fn bottom_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_k(k: usize, len: usize) -> Result<()> {
    if k == 0 || k > len {
        return Err(Error::Config(format!("pooling size k={k} outside 1..={len}")));
    }
    Ok(())
}

/// Mean of the `k` largest entries.
pub fn topk_pool(a: &ActivationMap, k: usize) -> Result<f64> {
    check_k(k, a.len())?;
    let idx = top_indices(a.values(), k);
    Ok(idx.iter().map(|&i| a.values()[i]).sum::<f64>() / k as f64)
}

/// Mean of the `k` smallest entries.
pub fn mink_mean(values: &[f64], k: usize) -> Result<f64> {
    check_k(k, values.len())?;
    let idx = bottom_indices(values, k);
    Ok(idx.iter().map(|&i| values[i]).sum::<f64>() / k as f64)
}

/// Half-open source range averaged into output index `i` when resizing
/// `src` cells onto `dst` cells.
#[inline]
pub fn adaptive_bin(i: usize, src: usize, dst: usize) -> (usize, usize) {
    let start = (i * src) / dst;
    let end = ((i + 1) * src).div_ceil(dst);
    (start, end)
}

/// Adaptive-average resize from latent to input resolution.
pub fn scale_up(a: &ActivationMap, out_rows: usize, out_cols: usize) -> Result<Grid> {
    if out_rows < a.rows() || out_cols < a.cols() {
        return Err(Error::Shape(format!(
            "cannot scale {}x{} up to {out_rows}x{out_cols}",
            a.rows(),
            a.cols()
        )));
    }
    let col_bins: Vec<_> = (0..out_cols).map(|c| adaptive_bin(c, a.cols(), out_cols)).collect();
    let mut values = Vec::with_capacity(out_rows * out_cols);
    for r in 0..out_rows {
        let (r0, r1) = adaptive_bin(r, a.rows(), out_rows);
        for &(c0, c1) in &col_bins {
            let mut sum = 0.0;
            for y in r0..r1 {
                for x in c0..c1 {
                    sum += a.get(y, x);
                }
            }
            values.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    Ok(Grid::new(out_rows, out_cols, values))
}

/// Transpose of [`scale_up`]: maps a gradient on the PAM back to the latent grid.
pub fn scale_up_adjoint(grad: &Grid, rows: usize, cols: usize) -> Grid {
    let mut out = Grid::filled(rows, cols, 0.0);
    for r in 0..grad.rows() {
        let (r0, r1) = adaptive_bin(r, rows, grad.rows());
        for c in 0..grad.cols() {
            let (c0, c1) = adaptive_bin(c, cols, grad.cols());
            let share = grad.get(r, c) / ((r1 - r0) * (c1 - c0)) as f64;
            if share == 0.0 {
                continue;
            }
            for y in r0..r1 {
                for x in c0..c1 {
                    let v = out.get(y, x);
                    out.set(y, x, v + share);
                }
            }
        }
    }
    out
}
