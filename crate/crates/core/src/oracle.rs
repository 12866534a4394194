//! Independent reference implementations used by tests and the `selftest`
//! command. These deliberately take the slow, obvious route (full score
//! matrices, exhaustive subset enumeration) and never share code with the
//! implementations they check.

use ndarray::Array2;

/// Naive multi-head softmax attention that materializes the full `[n_q,n_k]`
/// score matrix per head. Returns the attended output `[n_q, c]`.
pub fn naive_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    key_valid: Option<&[bool]>,
) -> Array2<f64> {
    let (n_q, c) = q.dim();
    let n_k = k.nrows();
    assert_eq!(c % heads, 0);
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array2::<f64>::zeros((n_q, c));
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        let mut scores = Array2::<f64>::zeros((n_q, n_k));
        for qi in 0..n_q {
            for ki in 0..n_k {
                let mut s = 0.0;
                for di in cols.clone() {
                    s += q[[qi, di]] * k[[ki, di]];
                }
                scores[[qi, ki]] = s * scale;
            }
        }
        for qi in 0..n_q {
            let weights = softmax_row(&scores, qi, key_valid);
            for ki in 0..n_k {
                if weights[ki] == 0.0 {
                    continue;
                }
                for (off, di) in cols.clone().enumerate() {
                    out[[qi, di]] += weights[ki] * v[[ki, h * d + off]];
                }
            }
        }
    }
    out
}

/// Softmax over one score row, zeroing invalid keys. Also usable to check
/// row-stochasticity of the implied attention weights.
pub fn softmax_row(scores: &Array2<f64>, row: usize, key_valid: Option<&[bool]>) -> Vec<f64> {
    let n_k = scores.ncols();
    let valid = |k: usize| key_valid.map_or(true, |f| f[k]);
    let max = (0..n_k)
        .filter(|&k| valid(k))
        .map(|k| scores[[row, k]])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights = vec![0.0; n_k];
    let mut denom = 0.0;
    for k in 0..n_k {
        if valid(k) {
            let e = (scores[[row, k]] - max).exp();
            weights[k] = e;
            denom += e;
        }
    }
    for w in &mut weights {
        *w /= denom;
    }
    weights
}

/// Exhaustive least-total-cost subset of size `k` (ties broken towards
/// lexicographically smallest index set). Returns sorted indices.
pub fn brute_force_least_cost_subset(costs: &[f64], k: usize) -> Vec<usize> {
    let n = costs.len();
    assert!(k >= 1 && k <= n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        let total: f64 = subset.iter().map(|&i| costs[i]).sum();
        let better = match &best {
            None => true,
            Some((bt, bs)) => total < *bt - 1e-12 || (total < *bt + 1e-12 && subset < *bs),
        };
        if better {
            best = Some((total, subset.clone()));
        }
        // next combination
        let mut i = k;
        loop {
            if i == 0 {
                return best.unwrap().1;
            }
            i -= 1;
            if subset[i] != i + n - k {
                break;
            }
        }
        subset[i] += 1;
        for j in i + 1..k {
            subset[j] = subset[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_small_cases() {
        assert_eq!(brute_force_least_cost_subset(&[3.0, 1.0], 1), vec![1]);
        assert_eq!(
            brute_force_least_cost_subset(&[2.0, 2.0, 2.0, 2.0], 2),
            vec![0, 1]
        );
        assert_eq!(
            brute_force_least_cost_subset(&[5.0, 0.5, 4.0, 0.25], 2),
            vec![1, 3]
        );
    }
}
