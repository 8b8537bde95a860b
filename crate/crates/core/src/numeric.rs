//! Small numeric helpers shared across modules.

/// Pairwise (cascade) summation; the result depends only on the slice order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Element-wise pairwise sum of equal-length vectors.
pub fn pairwise_vec_sum(vectors: &[&[f64]], dim: usize) -> Vec<f64> {
    match vectors.len() {
        0 => vec![0.0; dim],
        1 => vectors[0].to_vec(),
        n => {
            let (a, b) = vectors.split_at(n / 2);
            let mut left = pairwise_vec_sum(a, dim);
            let right = pairwise_vec_sum(b, dim);
            for (l, r) in left.iter_mut().zip(&right) {
                *l += r;
            }
            left
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Linear-interpolation quantile (the "type 7" rule) of already sorted data.
///
/// `q` is a fraction in `[0, 1]`. Returns `None` for empty input.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Median of arbitrary (unsorted) data; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(pairwise_sum(values) / values.len() as f64)
    }
}

/// Floor-of-log2 frequency bucket used for frequency matching.
pub fn log2_bucket(count: u64) -> u32 {
    if count == 0 {
        0
    } else {
        63 - count.leading_zeros()
    }
}
