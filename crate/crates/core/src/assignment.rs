//! Label-mapping machinery for the low-entropy attack: a moving-average
//! probability confusion matrix and two solvers that turn it into a
//! derangement (a bijective label map with no fixed points).
//!
//! The greedy solver reproduces the released procedure step by step:
//! zero the diagonal, then repeatedly L1-normalize the remaining rows,
//! commit the row with the largest maximum to its argmax column, and zero
//! that row and column. The exact solver maximizes the same linear
//! objective over all derangements with a Hungarian assignment.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingSolver {
    Greedy,
    Exact,
}

/// Moving-average class-probability confusion and its derived label map.
#[derive(Clone, Debug)]
pub struct ConfusionState {
    classes: usize,
    confusion: Vec<f64>, // row k = EMA posterior profile of ground-truth class k
    beta: f64,
    solver: MappingSolver,
    mapping: Vec<usize>,
}

impl ConfusionState {
    pub fn new(classes: usize, beta: f64, solver: MappingSolver) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Contract(format!(
                "label mapping needs at least 2 classes, got {classes}"
            )));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Contract(format!("confusion momentum {beta} outside [0, 1]")));
        }
        let confusion = vec![1.0 / classes as f64; classes * classes];
        let mapping = solve(&confusion, classes, solver)?;
        Ok(ConfusionState {
            classes,
            confusion,
            beta,
            solver,
            mapping,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn confusion(&self) -> &[f64] {
        &self.confusion
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    /// EMA update of the rows named by `labels` with the per-class mean
    /// posterior (scatter-mean); absent classes keep their rows.
    pub fn update(&mut self, posteriors: &[f64], labels: &[usize]) -> Result<()> {
        let k = self.classes;
        if labels.is_empty() || posteriors.len() != labels.len() * k {
            return Err(Error::Contract(format!(
                "confusion update with {} posterior values for {} labels of {k} classes",
                posteriors.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let mut sums = vec![0.0; k * k];
        let mut counts = vec![0usize; k];
        for (i, &label) in labels.iter().enumerate() {
            counts[label] += 1;
            for c in 0..k {
                sums[label * k + c] += posteriors[i * k + c];
            }
        }
        for class in 0..k {
            if counts[class] == 0 {
                continue;
            }
            let inv = 1.0 / counts[class] as f64;
            for c in 0..k {
                let mean = sums[class * k + c] * inv;
                let cell = &mut self.confusion[class * k + c];
                *cell = self.beta * *cell + (1.0 - self.beta) * mean;
            }
        }
        Ok(())
    }

    /// Recompute the label map from the current confusion.
    pub fn refresh_mapping(&mut self) -> Result<()> {
        self.mapping = solve(&self.confusion, self.classes, self.solver)?;
        Ok(())
    }
}

fn solve(c: &[f64], k: usize, solver: MappingSolver) -> Result<Vec<usize>> {
    match solver {
        MappingSolver::Greedy => greedy_mapping(c, k),
        MappingSolver::Exact => exact_mapping(c, k),
    }
}

/// Sum of the confusion mass a mapping collects.
pub fn mapping_objective(c: &[f64], k: usize, mapping: &[usize]) -> f64 {
    mapping.iter().enumerate().map(|(row, &col)| c[row * k + col]).sum()
}

fn require_mappable(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Contract(format!(
            "no derangement exists over {k} classes"
        )));
    }
    Ok(())
}

/// Greedy constrained mapping, faithful to the released procedure.
pub fn greedy_mapping(c: &[f64], k: usize) -> Result<Vec<usize>> {
    require_mappable(k)?;
    if c.len() != k * k {
        return Err(Error::Contract(format!(
            "confusion of length {} is not {k}x{k}",
            c.len()
        )));
    }
    let mut work = c.to_vec();
    for i in 0..k {
        work[i * k + i] = 0.0;
    }
    let mut mapping = vec![usize::MAX; k];
    let mut row_open = vec![true; k];
    let mut col_open = vec![true; k];
    for _ in 0..k {
        // L1-normalize remaining rows, find each row's max column
        let mut best_row = usize::MAX;
        let mut best_prob = -1.0;
        let mut best_col = vec![0usize; k];
        for r in 0..k {
            if !row_open[r] {
                continue;
            }
            let row = &work[r * k..(r + 1) * k];
            let norm: f64 = row.iter().map(|v| v.abs()).sum::<f64>().max(1e-12);
            let mut col = 0;
            let mut prob = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                let p = v / norm;
                if p > prob {
                    prob = p;
                    col = j;
                }
            }
            best_col[r] = col;
            if prob > best_prob {
                best_prob = prob;
                best_row = r;
            }
        }
        let row = best_row;
        let mut col = best_col[row];
        if work[row * k + col] <= 0.0 {
            // degenerate all-zero row: fall back to the lowest open
            // non-diagonal column so the result stays a derangement
            col = (0..k)
                .find(|&j| col_open[j] && j != row)
                .ok_or_else(|| Error::Contract("greedy mapping ran out of columns".into()))?;
        }
        mapping[row] = col;
        row_open[row] = false;
        col_open[col] = false;
        for j in 0..k {
            work[row * k + j] = 0.0;
        }
        for r in 0..k {
            work[r * k + col] = 0.0;
        }
    }
    debug_assert!(is_derangement(&mapping));
    Ok(mapping)
}

/// Exact solver: maximizes the collected confusion mass over all
/// derangements (diagonal excluded via a dominating penalty).
pub fn exact_mapping(c: &[f64], k: usize) -> Result<Vec<usize>> {
    require_mappable(k)?;
    if c.len() != k * k {
        return Err(Error::Contract(format!(
            "confusion of length {} is not {k}x{k}",
            c.len()
        )));
    }
    let max_abs = c.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let forbidden = (max_abs + 1.0) * (k as f64 + 1.0) * 4.0;
    let mut cost = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            cost[i * k + j] = if i == j { forbidden } else { -c[i * k + j] };
        }
    }
    let mapping = min_cost_assignment(&cost, k);
    debug_assert!(is_derangement(&mapping));
    Ok(mapping)
}

pub fn is_derangement(mapping: &[usize]) -> bool {
    let k = mapping.len();
    let mut seen = vec![false; k];
    for (i, &m) in mapping.iter().enumerate() {
        if m >= k || m == i || seen[m] {
            return false;
        }
        seen[m] = true;
    }
    true
}

/// Minimum-cost perfect matching on a square matrix, O(n^3) shortest
/// augmenting paths with potentials.
fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1]; // matched[j] = row assigned to column j (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
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
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched[j] > 0 {
            assignment[matched[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_confusion(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        (0..k * k).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    /// Exhaustive maximum over all derangements.
    pub(crate) fn brute_force_best(c: &[f64], k: usize) -> f64 {
        fn permute(k: usize, current: &mut Vec<usize>, used: &mut Vec<bool>, best: &mut f64, c: &[f64]) {
            let row = current.len();
            if row == k {
                let obj = mapping_objective(c, k, current);
                if obj > *best {
                    *best = obj;
                }
                return;
            }
            for col in 0..k {
                if !used[col] && col != row {
                    used[col] = true;
                    current.push(col);
                    permute(k, current, used, best, c);
                    current.pop();
                    used[col] = false;
                }
            }
        }
        let mut best = f64::NEG_INFINITY;
        permute(k, &mut Vec::new(), &mut vec![false; k], &mut best, c);
        best
    }

    #[test]
    fn update_frozen_momentum_keeps_confusion() {
        let mut state = ConfusionState::new(3, 1.0, MappingSolver::Greedy).unwrap();
        let before = state.confusion().to_vec();
        let posteriors = [0.7, 0.2, 0.1, 0.1, 0.8, 0.1];
        state.update(&posteriors, &[0, 1]).unwrap();
        assert_eq!(state.confusion(), &before[..]);
    }

    #[test]
    fn update_full_replacement_takes_sample_posterior() {
        let mut state = ConfusionState::new(3, 0.0, MappingSolver::Greedy).unwrap();
        let posteriors = [0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4];
        state.update(&posteriors, &[0, 1, 2]).unwrap();
        for (got, want) in state.confusion().iter().zip(posteriors.iter()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn update_unrolls_as_geometric_series() {
        let beta = 0.9;
        let mut state = ConfusionState::new(2, beta, MappingSolver::Greedy).unwrap();
        let c0 = state.confusion().to_vec();
        let p = [0.8, 0.2, 0.3, 0.7];
        state.update(&p, &[0, 1]).unwrap();
        state.update(&p, &[0, 1]).unwrap();
        for i in 0..4 {
            let want = (1.0 - beta * beta) * p[i] + beta * beta * c0[i];
            assert!((state.confusion()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn update_ignores_absent_classes() {
        let mut state = ConfusionState::new(3, 0.5, MappingSolver::Greedy).unwrap();
        let row2_before = state.confusion()[2 * 3..].to_vec();
        state.update(&[0.9, 0.05, 0.05], &[0]).unwrap();
        assert_eq!(&state.confusion()[2 * 3..], &row2_before[..]);
    }

    #[test]
    fn update_keeps_entries_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state = ConfusionState::new(4, 0.9, MappingSolver::Greedy).unwrap();
        for _ in 0..50 {
            let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..4)).collect();
            let mut posteriors = Vec::new();
            for _ in 0..8 {
                let mut row: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                posteriors.extend(row);
            }
            state.update(&posteriors, &labels).unwrap();
            assert!(state.confusion().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn greedy_two_classes_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c = random_confusion(&mut rng, 2);
            assert_eq!(greedy_mapping(&c, 2).unwrap(), vec![1, 0]);
        }
    }

    #[test]
    fn greedy_reproduces_hand_traced_fixture() {
        // Hand trace: normalized row 0 peaks at 0.9/0.95 -> commit 0->1;
        // row 2 then holds probability 1.0 on column 0 -> commit 2->0;
        // row 1 takes the remaining column 2.
        let c = [
            0.0, 0.9, 0.05, //
            0.2, 0.0, 0.6, //
            0.5, 0.3, 0.0,
        ];
        assert_eq!(greedy_mapping(&c, 3).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn greedy_always_returns_derangements() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let k = rng.random_range(2..=10);
            let c = random_confusion(&mut rng, k);
            let m = greedy_mapping(&c, k).unwrap();
            assert!(is_derangement(&m), "k = {k}, mapping {m:?}");
        }
    }

    #[test]
    fn single_class_is_contract_error() {
        assert!(matches!(greedy_mapping(&[1.0], 1), Err(Error::Contract(_))));
        assert!(matches!(exact_mapping(&[1.0], 1), Err(Error::Contract(_))));
        assert!(ConfusionState::new(1, 0.9, MappingSolver::Greedy).is_err());
    }

    #[test]
    fn exact_matches_brute_force_up_to_seven() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let k = rng.random_range(2..=7);
            let c = random_confusion(&mut rng, k);
            let m = exact_mapping(&c, k).unwrap();
            assert!(is_derangement(&m));
            let got = mapping_objective(&c, k, &m);
            let best = brute_force_best(&c, k);
            assert!((got - best).abs() < 1e-9, "k = {k}: {got} vs brute {best}");
        }
    }

    #[test]
    fn exact_on_uniform_off_diagonal() {
        let k = 5;
        let c_val = 1.0;
        let v = c_val / (k as f64 - 1.0);
        let mut c = vec![v; k * k];
        for i in 0..k {
            c[i * k + i] = 0.0;
        }
        let m = exact_mapping(&c, k).unwrap();
        assert!(is_derangement(&m));
        let obj = mapping_objective(&c, k, &m);
        assert!((obj - k as f64 * v * c_val).abs() < 1e-12);
    }

    #[test]
    fn exact_dominates_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let k = rng.random_range(2..=9);
            let c = random_confusion(&mut rng, k);
            let ge = mapping_objective(&c, k, &greedy_mapping(&c, k).unwrap());
            let ex = mapping_objective(&c, k, &exact_mapping(&c, k).unwrap());
            assert!(ex + 1e-9 >= ge, "k = {k}: exact {ex} < greedy {ge}");
        }
    }

    #[test]
    fn refresh_mapping_follows_confusion() {
        let mut state = ConfusionState::new(3, 0.0, MappingSolver::Greedy).unwrap();
        // drive class 0 posteriors hard toward class 2
        let posteriors = [0.05, 0.05, 0.9, 0.9, 0.05, 0.05, 0.05, 0.9, 0.05];
        state.update(&posteriors, &[0, 1, 2]).unwrap();
        state.refresh_mapping().unwrap();
        assert_eq!(state.mapping(), &[2, 0, 1]);
    }
}
