//! Clustering evaluation: optimally matched accuracy, normalized mutual
//! information, and adjusted Rand index.
//!
//! All three are invariant to relabeling of the predicted clusters. NMI uses
//! the arithmetic-mean normalizer `(H(T) + H(P)) / 2` with natural logs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("labelings must be nonempty and of equal length (got {0} and {1})")]
    BadInput(usize, usize),
    #[error("adjusted Rand index needs at least 2 samples")]
    TooFewSamples,
}

type Result<T> = std::result::Result<T, MetricsError>;

/// Co-occurrence counts of (true label, predicted label), sized by the
/// maximum label on each side.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u64>,
}

impl ContingencyTable {
    pub fn build(truth: &[u32], pred: &[u32]) -> Result<Self> {
        if truth.is_empty() || truth.len() != pred.len() {
            return Err(MetricsError::BadInput(truth.len(), pred.len()));
        }
        let rows = *truth.iter().max().unwrap() as usize + 1;
        let cols = *pred.iter().max().unwrap() as usize + 1;
        let mut counts = vec![0u64; rows * cols];
        for (&t, &p) in truth.iter().zip(pred) {
            counts[t as usize * cols + p as usize] += 1;
        }
        Ok(ContingencyTable { rows, cols, counts })
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.rows).map(|i| (0..self.cols).map(|j| self.get(i, j)).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.cols).map(|j| (0..self.rows).map(|i| self.get(i, j)).sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Minimum-cost assignment on a square cost matrix via the O(n^3)
/// shortest-augmenting-path method. Returns, for each row, its assigned
/// column.
pub fn min_cost_assignment(cost: &[i64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    const INF: i64 = i64::MAX / 4;
    // 1-indexed potentials; p[j] = row matched to column j.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Clustering accuracy: the best fraction of agreeing samples over all
/// one-to-one matchings of predicted clusters to classes. The contingency
/// table is padded square so predicted and true cluster counts may differ.
pub fn accuracy(truth: &[u32], pred: &[u32]) -> Result<f64> {
    let table = ContingencyTable::build(truth, pred)?;
    let n = table.rows.max(table.cols);
    let mut cost = vec![0i64; n * n];
    for i in 0..table.rows {
        for j in 0..table.cols {
            cost[i * n + j] = -(table.get(i, j) as i64);
        }
    }
    let assignment = min_cost_assignment(&cost, n);
    let matched: u64 = assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < table.rows && j < table.cols)
        .map(|(i, &j)| table.get(i, j))
        .sum();
    Ok(matched as f64 / truth.len() as f64)
}

fn entropy(sums: &[u64], total: f64) -> f64 {
    sums.iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with the arithmetic-mean normalizer.
/// Degenerate single-cluster labelings on both sides count as 1.0.
pub fn nmi(truth: &[u32], pred: &[u32]) -> Result<f64> {
    let table = ContingencyTable::build(truth, pred)?;
    let n = table.total() as f64;
    let rs = table.row_sums();
    let cs = table.col_sums();
    let ht = entropy(&rs, n);
    let hp = entropy(&cs, n);
    if ht == 0.0 && hp == 0.0 {
        return Ok(1.0);
    }
    // I(T;P) = H(T) + H(P) - H(T,P). For identical labelings the joint
    // entropy sums the same counts as the marginals, so the ratio is
    // exactly 1.
    let hj = entropy(&table.counts, n);
    let mi = ht + hp - hj;
    Ok((mi / ((ht + hp) / 2.0)).clamp(0.0, 1.0))
}

fn choose2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index via pair counting on the contingency table.
pub fn ari(truth: &[u32], pred: &[u32]) -> Result<f64> {
    let table = ContingencyTable::build(truth, pred)?;
    let n = table.total();
    if n < 2 {
        return Err(MetricsError::TooFewSamples);
    }
    let sum_ij: f64 = table.counts.iter().map(|&c| choose2(c)).sum();
    let sum_a: f64 = table.row_sums().iter().map(|&a| choose2(a)).sum();
    let sum_b: f64 = table.col_sums().iter().map(|&b| choose2(b)).sum();
    // Cleared of the inner divisions, every term below is an exact integer
    // in f64 at this scale, so the single final division is exactly rounded.
    let pairs = choose2(n);
    let num = 2.0 * (sum_ij * pairs - sum_a * sum_b);
    let den = (sum_a + sum_b) * pairs - 2.0 * sum_a * sum_b;
    if den == 0.0 {
        // Both partitions trivial; identical by construction.
        return Ok(1.0);
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(items: &[u32]) -> Vec<Vec<u32>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for (i, &x) in items.iter().enumerate() {
            let mut rest = items.to_vec();
            rest.remove(i);
            for mut tail in permutations(&rest) {
                tail.insert(0, x);
                out.push(tail);
            }
        }
        out
    }

    /// Exhaustive search over cluster-to-class matchings; the accuracy oracle.
    fn accuracy_exhaustive(truth: &[u32], pred: &[u32]) -> f64 {
        let k = truth.iter().chain(pred).copied().max().unwrap() + 1;
        let ids: Vec<u32> = (0..k).collect();
        let mut best = 0usize;
        for perm in permutations(&ids) {
            let matched = truth
                .iter()
                .zip(pred)
                .filter(|&(&t, &p)| t == perm[p as usize])
                .count();
            best = best.max(matched);
        }
        best as f64 / truth.len() as f64
    }

    #[test]
    fn accuracy_identical_is_one() {
        let x = vec![0, 1, 2, 1, 0, 2];
        assert_eq!(accuracy(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_absorbs_relabeling() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let pred = vec![2, 2, 0, 0, 1, 1];
        assert_eq!(accuracy(&truth, &pred).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_hand_example() {
        let truth = vec![0, 0, 1, 1];
        let pred = vec![0, 1, 1, 1];
        assert_eq!(accuracy(&truth, &pred).unwrap(), 0.75);
        assert_eq!(accuracy_exhaustive(&truth, &pred), 0.75);
    }

    #[test]
    fn accuracy_matches_exhaustive_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let k = rng.gen_range(2..=6u32);
            let n = rng.gen_range(4..=30usize);
            let truth: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let fast = accuracy(&truth, &pred).unwrap();
            let slow = accuracy_exhaustive(&truth, &pred);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn accuracy_rejects_empty_and_mismatched() {
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn nmi_identical_is_one() {
        let x = vec![0, 0, 1, 1, 2];
        assert_eq!(nmi(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn nmi_independent_is_zero() {
        let truth = vec![0, 0, 1, 1];
        let pred = vec![0, 1, 0, 1];
        assert!(nmi(&truth, &pred).unwrap().abs() < 1e-12);
    }

    #[test]
    fn nmi_invariant_under_relabeling() {
        let truth = vec![0, 0, 1, 1, 2, 2, 0, 1];
        let pred = vec![1, 1, 0, 2, 2, 2, 1, 0];
        let relabeled: Vec<u32> = pred.iter().map(|&p| (p + 1) % 3).collect();
        let a = nmi(&truth, &pred).unwrap();
        let b = nmi(&truth, &relabeled).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn nmi_degenerate_both_sides() {
        assert_eq!(nmi(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn ari_identical_is_one() {
        let x = vec![0, 1, 2, 2, 1, 0];
        assert_eq!(ari(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ari_constructed_example() {
        let truth = vec![0, 0, 1, 1];
        let pred = vec![0, 1, 0, 1];
        assert_eq!(ari(&truth, &pred).unwrap(), -0.5);
    }

    #[test]
    fn ari_random_predictions_near_zero_on_average() {
        let truth: Vec<u32> = (0..200).map(|i| (i % 4) as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = 0.0;
        for _ in 0..100 {
            let pred: Vec<u32> = (0..200).map(|_| rng.gen_range(0..4u32)).collect();
            acc += ari(&truth, &pred).unwrap().abs();
        }
        assert!(acc / 100.0 < 0.05);
    }

    #[test]
    fn ari_rejects_tiny_input() {
        assert!(matches!(ari(&[0], &[0]), Err(MetricsError::TooFewSamples)));
    }

    #[test]
    fn assignment_solves_classic_matrix() {
        // Classic 3x3 instance with optimum 5 (1-indexed rows/cols picking 2,1,2... verified by hand).
        let cost = vec![1, 2, 3, 2, 4, 6, 3, 6, 9];
        let assign = min_cost_assignment(&cost, 3);
        let total: i64 = assign.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 10);
        // Brute force over the 6 permutations gives 10 as the minimum.
    }
}
