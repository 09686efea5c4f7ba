use std::cmp::Ordering;

/// Indices of the `k` highest scores, returned in ascending index order.
///
/// Higher score wins; equal scores go to the lower index. `k >= len`
/// returns every index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    top_k_counted(scores, k, &mut 0)
}

pub(super) fn top_k_counted(scores: &[f64], k: usize, comparisons: &mut u64) -> Vec<usize> {
    let n = scores.len();
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut count = 0u64;
    let mut by_rank = |a: &usize, b: &usize| -> Ordering {
        count += 1;
        scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
    };
    idx.select_nth_unstable_by(k - 1, &mut by_rank);
    idx.truncate(k);
    idx.sort_unstable();
    *comparisons += count;
    idx
}

/// Per-head Top-K over the allowed set; returns absolute positions, ascending.
pub fn select_top_k(z_adj: &[Vec<f64>], allowed: &[usize], k: usize) -> Vec<Vec<usize>> {
    z_adj
        .iter()
        .map(|z| {
            top_k_indices(z, k)
                .into_iter()
                .map(|i| allowed[i])
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_strict_maxima() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5, 0.9], 2), vec![1, 3]);
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        assert_eq!(top_k_indices(&[0.9, 0.5, 0.5], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[1.0; 6], 3), vec![0, 1, 2]);
    }

    #[test]
    fn zero_budget_is_empty() {
        assert!(top_k_indices(&[1.0, 2.0], 0).is_empty());
    }

    #[test]
    fn budget_above_support_returns_all() {
        assert_eq!(top_k_indices(&[3.0, 1.0], 5), vec![0, 1]);
    }

    #[test]
    fn maps_to_absolute_positions() {
        let z = vec![vec![0.1, 0.9, 0.5], vec![0.7, 0.1, 0.6]];
        let sel = select_top_k(&z, &[4, 9, 17], 2);
        assert_eq!(sel, vec![vec![9, 17], vec![4, 17]]);
    }
}
