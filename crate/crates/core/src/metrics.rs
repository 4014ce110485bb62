//! Partition agreement scores: adjusted Rand index and Hungarian-matched IoU.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::label::LabelMap;

/// Pixel counts `n_ij` between ground-truth class `i` and predicted class `j`,
/// restricted to classes that occur.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    gt_labels: Vec<u32>,
    pred_labels: Vec<u32>,
    counts: Vec<u64>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    total: u64,
}

impl ContingencyTable {
    pub fn new(gt: &LabelMap, pred: &LabelMap) -> Result<Self> {
        gt.same_shape(pred)?;
        let gt_labels = gt.labels();
        let pred_labels = pred.labels();
        let index = |labels: &[u32]| labels.iter().enumerate().map(|(i, &l)| (l, i)).collect::<BTreeMap<_, _>>();
        let (gi, pi) = (index(&gt_labels), index(&pred_labels));
        let cols = pred_labels.len();
        let mut counts = vec![0u64; gt_labels.len() * cols];
        let mut row_sums = vec![0u64; gt_labels.len()];
        let mut col_sums = vec![0u64; cols];
        for (g, p) in gt.as_slice().iter().zip(pred.as_slice()) {
            let (i, j) = (gi[g], pi[p]);
            counts[i * cols + j] += 1;
            row_sums[i] += 1;
            col_sums[j] += 1;
        }
        let total = gt.len() as u64;
        Ok(Self { gt_labels, pred_labels, counts, row_sums, col_sums, total })
    }

    pub fn gt_labels(&self) -> &[u32] {
        &self.gt_labels
    }

    pub fn pred_labels(&self) -> &[u32] {
        &self.pred_labels
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.pred_labels.len() + j]
    }

    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// IoU of ground-truth class `i` against predicted class `j`.
    pub fn iou(&self, i: usize, j: usize) -> f64 {
        let inter = self.count(i, j);
        let union = self.row_sums[i] + self.col_sums[j] - inter;
        inter as f64 / union as f64
    }
}

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Adjusted Rand index. Two single-cluster partitions score 1.
pub fn ari(gt: &LabelMap, pred: &LabelMap) -> Result<f64> {
    let table = ContingencyTable::new(gt, pred)?;
    if table.total < 2 {
        return Err(Error::InvalidArgument(format!("ARI needs at least 2 pixels, got {}", table.total)));
    }
    let index: u128 = table.counts.iter().map(|&c| pairs(c)).sum();
    let rows: u128 = table.row_sums.iter().map(|&c| pairs(c)).sum();
    let cols: u128 = table.col_sums.iter().map(|&c| pairs(c)).sum();
    let all = pairs(table.total);
    // Scaled by 2 C(n,2) so numerator and denominator stay integral.
    let num = 2 * (index * all) as i128 - 2 * (rows * cols) as i128;
    let den = ((rows + cols) * all) as i128 - 2 * (rows * cols) as i128;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub gt: u32,
    pub pred: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_gt: Vec<u32>,
    pub unmatched_pred: Vec<u32>,
    /// Mean IoU over all ground-truth classes, unmatched ones scoring 0.
    pub mean_iou: f64,
}

pub fn hungarian_iou(gt: &LabelMap, pred: &LabelMap) -> Result<MatchResult> {
    let table = ContingencyTable::new(gt, pred)?;
    if table.gt_labels.is_empty() {
        return Err(Error::Empty("ground truth classes"));
    }
    let (rows, cols) = (table.gt_labels.len(), table.pred_labels.len());
    let mut weights = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            weights.push(table.iou(i, j));
        }
    }
    let assignment = solve_assignment(&weights, rows, cols)?;
    let mut pairs = Vec::new();
    let mut unmatched_gt = Vec::new();
    let mut used = vec![false; cols];
    for (i, a) in assignment.iter().enumerate() {
        match a {
            Some(j) => {
                used[*j] = true;
                pairs.push(MatchedPair { gt: table.gt_labels[i], pred: table.pred_labels[*j], iou: weights[i * cols + j] });
            }
            None => unmatched_gt.push(table.gt_labels[i]),
        }
    }
    let unmatched_pred = (0..cols).filter(|&j| !used[j]).map(|j| table.pred_labels[j]).collect();
    let mean_iou = pairs.iter().map(|p| p.iou).sum::<f64>() / rows as f64;
    Ok(MatchResult { pairs, unmatched_gt, unmatched_pred, mean_iou })
}

/// Maximum-weight one-to-one assignment on a row-major `rows x cols` matrix.
/// Returns, per row, the matched column; rows beyond `cols` stay unmatched.
pub fn solve_assignment(weights: &[f64], rows: usize, cols: usize) -> Result<Vec<Option<usize>>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("assignment matrix"));
    }
    if weights.len() != rows * cols {
        return Err(Error::InvalidArgument(format!("{} weights for a {rows}x{cols} matrix", weights.len())));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("non-finite assignment weight".into()));
    }
    // Shortest augmenting paths with potentials; needs n <= m, so transpose
    // tall matrices.
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let cost = |i: usize, j: usize| if transpose { -weights[j * cols + i] } else { -weights[i * cols + j] };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=m {
        if owner[j] != 0 {
            let (r, c) = if transpose { (j - 1, owner[j] - 1) } else { (owner[j] - 1, j - 1) };
            out[r] = Some(c);
        }
    }
    Ok(out)
}

/// Highest ARI among `samples` and its index, lowest index on ties.
pub fn best_of_n(gt: &LabelMap, samples: &[LabelMap]) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, s) in samples.iter().enumerate() {
        let score = ari(gt, s)?;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, i));
        }
    }
    best.ok_or(Error::Empty("samples"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, v: &[u32]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, k: u32) -> LabelMap {
        map(h, w, &(0..h * w).map(|_| rng.random_range(0..k)).collect::<Vec<_>>())
    }

    /// Rand index counted over every pixel pair, then chance-adjusted with
    /// the expectation taken by brute force over the same pair sets.
    fn ari_oracle(a: &LabelMap, b: &LabelMap) -> f64 {
        let (a, b) = (a.as_slice(), b.as_slice());
        let (mut both, mut in_a, mut in_b, mut total) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let (sa, sb) = (a[i] == a[j], b[i] == b[j]);
                both += (sa && sb) as u64;
                in_a += sa as u64;
                in_b += sb as u64;
                total += 1;
            }
        }
        let expected = in_a as f64 * in_b as f64 / total as f64;
        let max = 0.5 * (in_a + in_b) as f64;
        if max == expected {
            return 1.0;
        }
        (both as f64 - expected) / (max - expected)
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..n {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Best total over all injective maps from the smaller side.
    fn brute_best(w: &[f64], rows: usize, cols: usize) -> f64 {
        let (n, m) = (rows.min(cols), rows.max(cols));
        let at = |a: usize, b: usize| if rows <= cols { w[a * cols + b] } else { w[b * cols + a] };
        permutations(m).iter().map(|p| (0..n).map(|a| at(a, p[a])).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max)
    }

    fn total(w: &[f64], cols: usize, a: &[Option<usize>]) -> f64 {
        a.iter().enumerate().filter_map(|(i, j)| j.map(|j| w[i * cols + j])).sum()
    }

    #[test]
    fn ari_examples() {
        let gt = map(2, 2, &[0, 0, 1, 1]);
        assert_eq!(ari(&gt, &gt).unwrap(), 1.0);
        assert!((ari(&gt, &map(2, 2, &[0, 1, 0, 1])).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(ari(&gt, &map(2, 2, &[7, 7, 3, 3])).unwrap(), 1.0);
        assert_eq!(ari(&gt, &map(2, 2, &[5; 4])).unwrap(), 0.0);
        assert_eq!(ari(&map(2, 2, &[1; 4]), &map(2, 2, &[4; 4])).unwrap(), 1.0);
        assert!(ari(&map(1, 1, &[0]), &map(1, 1, &[0])).is_err());
        assert!(ari(&gt, &map(1, 4, &[0, 0, 1, 1])).is_err());
    }

    #[test]
    fn ari_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let k = rng.random_range(1..=5);
            let a = random_map(&mut rng, 8, 8, k);
            let k = rng.random_range(1..=5);
            let b = random_map(&mut rng, 8, 8, k);
            let got = ari(&a, &b).unwrap();
            assert!((got - ari_oracle(&a, &b)).abs() <= 1e-12);
            assert!((got - ari(&b, &a).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn ari_pair_counts_stay_exact_at_128() {
        let a = map(128, 128, &(0..128 * 128).map(|i| (i % 3) as u32).collect::<Vec<_>>());
        let b = map(128, 128, &(0..128 * 128).map(|i| (i / 5000) as u32).collect::<Vec<_>>());
        let got = ari(&a, &b).unwrap();
        assert!(got.is_finite() && got.abs() < 0.01);
        assert_eq!(ari(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_examples() {
        let gt = map(2, 2, &[0, 1, 0, 1]);
        assert_eq!(hungarian_iou(&gt, &gt).unwrap().mean_iou, 1.0);
        let one = hungarian_iou(&gt, &map(2, 2, &[3; 4])).unwrap();
        assert_eq!(one.mean_iou, 0.25);
        assert_eq!(one.pairs.len(), 1);
        assert_eq!(one.unmatched_gt.len(), 1);
        assert_eq!(hungarian_iou(&gt, &map(2, 2, &[9, 2, 9, 2])).unwrap().mean_iou, 1.0);
        let split = hungarian_iou(&map(1, 4, &[0; 4]), &map(1, 4, &[0, 1, 2, 2])).unwrap();
        assert_eq!(split.mean_iou, 0.5);
        assert_eq!(split.unmatched_pred, vec![0, 1]);
    }

    #[test]
    fn assignment_examples() {
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let a = solve_assignment(&id, 3, 3).unwrap();
        assert_eq!(a, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(total(&id, 3, &a), 3.0);
        assert_eq!(solve_assignment(&[0.9, 0.8, 0.85, 0.1], 2, 2).unwrap(), vec![Some(1), Some(0)]);
        assert_eq!(solve_assignment(&[0.2, 0.7, 0.4], 3, 1).unwrap(), vec![None, Some(0), None]);
        assert_eq!(solve_assignment(&[0.2, 0.7, 0.4], 1, 3).unwrap(), vec![Some(1)]);
        assert!(solve_assignment(&[], 0, 3).is_err());
        assert!(solve_assignment(&[f64::NAN], 1, 1).is_err());
    }

    #[test]
    fn assignment_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let (rows, cols) = if trial < 20 { (6, 6) } else { (rng.random_range(1..=7), rng.random_range(1..=7)) };
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
            let a = solve_assignment(&w, rows, cols).unwrap();
            let mut seen = vec![false; cols];
            for j in a.iter().flatten() {
                assert!(!core::mem::replace(&mut seen[*j], true));
            }
            assert_eq!(a.iter().flatten().count(), rows.min(cols));
            assert!((total(&w, cols, &a) - brute_best(&w, rows, cols)).abs() < 1e-12);
        }
    }

    #[test]
    fn best_of_n_examples() {
        let gt = map(2, 2, &[0, 0, 1, 1]);
        let worse = map(2, 2, &[0, 1, 0, 1]);
        assert_eq!(best_of_n(&gt, &[worse.clone(), gt.clone(), gt.clone()]).unwrap(), (1.0, 1));
        assert_eq!(best_of_n(&gt, core::slice::from_ref(&worse)).unwrap(), (ari(&gt, &worse).unwrap(), 0));
        assert!(best_of_n(&gt, &[]).is_err());
    }

    fn arb_pair() -> impl Strategy<Value = (LabelMap, LabelMap, Vec<u32>)> {
        (1usize..6, 2usize..6, 1u32..6).prop_flat_map(|(h, w, k)| {
            (
                proptest::collection::vec(0..k, h * w),
                proptest::collection::vec(0..k, h * w),
                Just((0..k).map(|i| (i * 7 + 3) % 11 + 20).collect::<Vec<u32>>()),
            )
                .prop_map(move |(a, b, perm)| (map(h, w, &a), map(h, w, &b), perm))
        })
    }

    proptest! {
        #[test]
        fn relabelling_changes_nothing((a, b, perm) in arb_pair()) {
            let relabel = |m: &LabelMap| map(m.height(), m.width(), &m.as_slice().iter().map(|&v| perm[v as usize]).collect::<Vec<_>>());
            let base = ari(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&base));
            prop_assert!((ari(&relabel(&a), &b).unwrap() - base).abs() < 1e-12);
            prop_assert!((ari(&a, &relabel(&b)).unwrap() - base).abs() < 1e-12);
            prop_assert!((ari(&b, &a).unwrap() - base).abs() < 1e-12);
            let iou = hungarian_iou(&a, &b).unwrap().mean_iou;
            prop_assert!((0.0..=1.0).contains(&iou));
            prop_assert!((hungarian_iou(&a, &relabel(&b)).unwrap().mean_iou - iou).abs() < 1e-12);
            prop_assert_eq!(hungarian_iou(&a, &relabel(&a)).unwrap().mean_iou, 1.0);
        }

        #[test]
        fn best_of_prefix_is_monotone(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_map(&mut rng, 4, 4, 3);
            let samples: Vec<_> = (0..6).map(|_| random_map(&mut rng, 4, 4, 3)).collect();
            let mut prev = f64::NEG_INFINITY;
            for n in 1..=samples.len() {
                let (best, idx) = best_of_n(&gt, &samples[..n]).unwrap();
                prop_assert!(best >= prev && idx < n);
                prev = best;
            }
        }
    }
}
