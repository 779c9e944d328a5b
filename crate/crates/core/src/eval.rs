//! Clustering accuracy and the linear-readout style probe.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Cluster-by-class counts. Rows are clusters, columns classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<usize>>,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::InvalidInput(format!(
                "need equal, non-empty label lists (got {} and {})",
                pred.len(),
                truth.len()
            )));
        }
        let k = pred.iter().max().expect("non-empty") + 1;
        let c = truth.iter().max().expect("non-empty") + 1;
        let mut counts = vec![vec![0; c]; k];
        for (&p, &t) in pred.iter().zip(truth) {
            counts[p][t] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Rows and columns that are actually used.
    fn occupied(&self) -> (Vec<usize>, Vec<usize>) {
        let rows = (0..self.counts.len())
            .filter(|&r| self.counts[r].iter().any(|&v| v > 0))
            .collect();
        let cols = (0..self.counts.first().map_or(0, Vec::len))
            .filter(|&c| self.counts.iter().any(|r| r[c] > 0))
            .collect();
        (rows, cols)
    }
}

/// Maximum-weight perfect matching on a square matrix, by the
/// shortest-augmenting-path form of the Hungarian algorithm (`O(n^3)`).
/// Returns `assign[row] = column`.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    // minimise cost = -weight with 1-based potentials
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = -weights[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Best total over all permutations; for small matrices only.
pub fn exhaustive_assignment(weights: &[Vec<usize>]) -> usize {
    fn go(w: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
        if row == w.len() {
            return 0;
        }
        let mut best = 0;
        for c in 0..w.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(w[row][c] + go(w, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(weights, 0, &mut vec![false; weights.len()])
}

/// Accuracy under the best one-to-one cluster-to-class mapping.
///
/// Requires as many distinct clusters as classes; use
/// [`majority_accuracy`] otherwise.
pub fn hungarian_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let (rows, cols) = table.occupied();
    if rows.len() != cols.len() {
        return Err(Error::InvalidInput(format!(
            "{} clusters vs {} classes: one-to-one mapping undefined, use majority_accuracy",
            rows.len(),
            cols.len()
        )));
    }
    let square: Vec<Vec<usize>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| table.counts[r][c]).collect())
        .collect();
    let matched = if square.len() <= 8 {
        exhaustive_assignment(&square)
    } else {
        let w: Vec<Vec<f64>> = square
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        max_weight_assignment(&w)
            .iter()
            .enumerate()
            .map(|(r, &c)| square[r][c])
            .sum()
    };
    Ok(matched as f64 / table.total() as f64)
}

/// Accuracy when every cluster is mapped to its most frequent class.
pub fn majority_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let hits: usize = table
        .counts
        .iter()
        .map(|r| r.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(hits as f64 / table.total() as f64)
}

/// Settings for the MLP probe.
#[derive(Clone, Copy, Debug)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

fn standardise(train: &Tensor, test: &Tensor) -> (Tensor, Tensor) {
    let d = train.last_dim();
    let n = train.rows() as f64;
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for i in 0..train.rows() {
        for (m, x) in mean.iter_mut().zip(train.row(i)) {
            *m += x / n;
        }
    }
    for i in 0..train.rows() {
        for ((s, x), m) in sd.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (x - m).powi(2) / n;
        }
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - mean[k % d]) / sd[k % d];
        }
        out
    };
    (apply(train), apply(test))
}

/// Trains a one-hidden-layer ReLU classifier on `(x_train, y_train)` with
/// softmax cross-entropy and Adam, and returns test accuracy. Inputs are
/// standardised with training statistics.
pub fn probe_accuracy(
    x_train: &Tensor,
    y_train: &[usize],
    x_test: &Tensor,
    y_test: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if x_train.rank() != 2 || x_test.rank() != 2 || x_train.last_dim() != x_test.last_dim() {
        return Err(Error::InvalidInput(
            "probe inputs must be matrices of equal width".into(),
        ));
    }
    if x_train.rows() != y_train.len() || x_test.rows() != y_test.len() || y_test.is_empty() {
        return Err(Error::InvalidInput(
            "probe labels do not match inputs".into(),
        ));
    }
    let classes = y_train.iter().chain(y_test).max().map_or(0, |m| m + 1);
    let first = y_train.first().copied();
    if classes < 2 || y_train.iter().all(|y| Some(*y) == first) {
        return Err(Error::InvalidInput(
            "probe needs at least two classes in the training labels".into(),
        ));
    }
    let (x_train, x_test) = standardise(x_train, x_test);
    let d = x_train.last_dim();
    let h = cfg.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut glorot = |fan_in: usize, fan_out: usize| {
        let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::matrix(
            fan_in,
            fan_out,
            (0..fan_in * fan_out)
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    };
    let mut params = vec![
        glorot(d, h),
        Tensor::zeros(&[h]),
        glorot(h, classes),
        Tensor::zeros(&[classes]),
    ];
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..x_train.rows()).collect();
    let mut tape = Tape::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            tape.reset();
            let vars = params
                .iter()
                .map(|p| tape.param(p.clone()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let xb = tape.constant(x_train.select_rows(chunk))?;
            let mut onehot = Tensor::zeros(&[chunk.len(), classes]);
            for (r, &i) in chunk.iter().enumerate() {
                onehot.data_mut()[r * classes + y_train[i]] = 1.0;
            }
            let yb = tape.constant(onehot)?;
            let logits = xb
                .matmul(vars[0])?
                .add(vars[1])?
                .relu()?
                .matmul(vars[2])?
                .add(vars[3])?;
            let loss = logits.log_softmax()?.mul(yb)?.sum_last()?.mean()?.neg()?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
            adam.step(&mut params.iter_mut().collect::<Vec<_>>(), &g)?;
        }
    }
    let tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let logits = tape
        .constant(x_test)?
        .matmul(vars[0])?
        .add(vars[1])?
        .relu()?
        .matmul(vars[2])?
        .add(vars[3])?
        .value();
    let pred = crate::model::argmax_rows(&logits);
    Ok(pred.iter().zip(y_test).filter(|(p, t)| p == t).count() as f64 / y_test.len() as f64)
}

/// Probe accuracy for each embedding (e.g. `z_1`, `z_2` and their
/// concatenation) against one label column.
pub fn probe_disentanglement(
    train_embeddings: &[Tensor],
    y_train: &[usize],
    test_embeddings: &[Tensor],
    y_test: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<f64>> {
    if train_embeddings.len() != test_embeddings.len() {
        return Err(Error::InvalidInput(
            "train and test embedding lists differ in length".into(),
        ));
    }
    train_embeddings
        .iter()
        .zip(test_embeddings)
        .map(|(a, b)| probe_accuracy(a, y_train, b, y_test, cfg))
        .collect()
}

/// Concatenates matrices with equal row counts along columns.
pub fn concat_columns(parts: &[Tensor]) -> Result<Tensor> {
    let n = parts.first().map_or(0, Tensor::rows);
    if parts.iter().any(|p| p.rank() != 2 || p.rows() != n) {
        return Err(Error::InvalidInput(
            "concatenated parts need equal row counts".into(),
        ));
    }
    let width: usize = parts.iter().map(Tensor::last_dim).sum();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::matrix(n, width, data))
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_table(t: &[[usize; 3]]) -> (Vec<usize>, Vec<usize>) {
        let (mut p, mut y) = (Vec::new(), Vec::new());
        for (r, row) in t.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                p.extend(std::iter::repeat_n(r, n));
                y.extend(std::iter::repeat_n(c, n));
            }
        }
        (p, y)
    }

    #[test]
    fn hungarian_examples() {
        let truth = vec![0, 1, 2, 2, 1, 0];
        assert_eq!(hungarian_accuracy(&truth, &truth).unwrap(), 1.0);
        let relabeled: Vec<usize> = truth.iter().map(|t| (t + 1) % 3).collect();
        assert_eq!(hungarian_accuracy(&relabeled, &truth).unwrap(), 1.0);
        let (p, y) = from_table(&[[5, 1, 0], [0, 4, 2], [1, 0, 7]]);
        assert!((hungarian_accuracy(&p, &y).unwrap() - 0.8).abs() < 1e-15);
        assert!(hungarian_accuracy(&[0, 1, 2], &[0, 0, 1]).is_err());
    }

    #[test]
    fn large_assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=7 {
            let w: Vec<Vec<usize>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(0..20)).collect())
                .collect();
            let wf: Vec<Vec<f64>> = w
                .iter()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect();
            let a = max_weight_assignment(&wf);
            let total: usize = a.iter().enumerate().map(|(r, &c)| w[r][c]).sum();
            assert_eq!(total, exhaustive_assignment(&w));
        }
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_accuracy(&[0, 1, 2], &[2, 0, 1]).unwrap(), 1.0);
        let truth: Vec<usize> = (0..10).map(|i| usize::from(i >= 6)).collect();
        assert!((majority_accuracy(&[0; 10], &truth).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn probe_reads_separable_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 200;
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Tensor::matrix(
            n,
            2,
            y.iter()
                .flat_map(|&c| [c as f64 * 3.0 + rng.random::<f64>(), rng.random::<f64>()])
                .collect(),
        );
        let cfg = ProbeConfig {
            epochs: 10,
            ..Default::default()
        };
        let acc = probe_accuracy(&x, &y, &x, &y, &cfg).unwrap();
        assert!(acc > 0.95, "{acc}");
        assert!(probe_accuracy(&x, &vec![1; n], &x, &y, &cfg).is_err());
    }

    #[test]
    fn mean_std_basics() {
        assert_eq!(mean_std(&[0.5, 0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
