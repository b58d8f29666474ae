//! Spectral measures of the per-sample gradient Gram matrix: the truncated
//! condition number `c_k`, the weighted energy `l_k`, and their cumulative
//! per-epoch series `C̄_K` and `L_K`.

use serde::Serialize;

use crate::error::{usage, Error, Result};
use crate::linalg::{eig_sym, gram_from_jacobian, Matrix, DEFAULT_EIG_TOL, DEFAULT_MAX_SWEEPS};
use crate::model::JacobianBatch;

/// Default relative threshold separating non-zero eigenvalues from numerical zeros.
pub const DEFAULT_NONZERO_REL_TOL: f64 = 1e-10;

/// Eigenvalues `λ > rel_tol · λ_max` and `λ > 0`, in input (descending) order.
pub fn nonzero_eigs(eigenvalues: &[f64], rel_tol: f64) -> Vec<f64> {
    let max = match eigenvalues.first() {
        Some(&m) if m > 0.0 => m,
        _ => return Vec::new(),
    };
    let cut = rel_tol * max;
    eigenvalues.iter().copied().filter(|&l| l > 0.0 && l > cut).collect()
}

/// `sqrt(max(E) / min(E))`, or `None` for an empty set.
pub fn condition_sample(nonzero: &[f64]) -> Option<f64> {
    if nonzero.is_empty() {
        return None;
    }
    let mut max = nonzero[0];
    let mut min = nonzero[0];
    for &v in nonzero {
        max = max.max(v);
        min = min.min(v);
    }
    Some((max / min).sqrt())
}

/// `(α / |B|) · sqrt(max(trace, 0))`.
pub fn energy_sample(trace_value: f64, alpha: f64, batch_size: usize) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return usage(format!("learning rate must be positive, got {alpha}"));
    }
    if batch_size == 0 {
        return usage("batch size must be >= 1");
    }
    if !trace_value.is_finite() {
        return usage(format!("trace must be finite, got {trace_value}"));
    }
    Ok(alpha / batch_size as f64 * trace_value.max(0.0).sqrt())
}

/// Sum over layer blocks of the per-layer Gram matrices.
pub fn layer_blocked_gram(j: &JacobianBatch) -> Result<Matrix> {
    let spans = j.layers.as_ref().ok_or_else(|| Error::Usage("jacobian carries no layer partition".into()))?;
    let n = j.batch_size();
    if n == 0 || j.param_count() == 0 {
        return usage("gram of an empty jacobian");
    }
    let mut total = Matrix::zeros(n, n);
    for span in spans {
        let block = j.matrix.column_block(span.start, span.len)?;
        let g = gram_from_jacobian(&block)?;
        for (t, v) in total.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *t += v;
        }
    }
    Ok(total)
}

/// Knobs for turning a Jacobian into a [`SpectralSample`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralOptions {
    pub nonzero_rel_tol: f64,
    pub eig_tol: f64,
    pub max_sweeps: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self { nonzero_rel_tol: DEFAULT_NONZERO_REL_TOL, eig_tol: DEFAULT_EIG_TOL, max_sweeps: DEFAULT_MAX_SWEEPS }
    }
}

/// One spectral measurement taken at a sampled iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralSample {
    pub epoch: usize,
    /// Global 1-based iteration index.
    pub iteration: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Gram eigenvalues, descending. Empty if the eigensolve failed.
    pub eigenvalues: Vec<f64>,
    pub nonzero_count: usize,
    pub trace: f64,
    pub c_k: Option<f64>,
    pub l_k: f64,
}

impl SpectralSample {
    /// Builds a sample from a Jacobian. The energy uses the Gram trace
    /// directly; eigenvalues only feed `c_k`. An eigensolver failure is
    /// returned alongside the sample (with `c_k` absent) rather than
    /// aborting.
    pub fn from_jacobian(
        j: &JacobianBatch,
        epoch: usize,
        iteration: usize,
        learning_rate: f64,
        opts: &SpectralOptions,
    ) -> Result<(Self, Option<Error>)> {
        let gram = gram_from_jacobian(&j.matrix)?;
        Self::from_gram(&gram, epoch, iteration, learning_rate, opts)
    }

    pub fn from_gram(
        gram: &Matrix,
        epoch: usize,
        iteration: usize,
        learning_rate: f64,
        opts: &SpectralOptions,
    ) -> Result<(Self, Option<Error>)> {
        let batch_size = gram.rows();
        let trace = crate::linalg::trace(gram)?;
        let l_k = energy_sample(trace, learning_rate, batch_size)?;
        let (eigenvalues, warning) = match eig_sym(gram, opts.max_sweeps, opts.eig_tol) {
            Ok(r) => (r.eigenvalues, None),
            Err(e @ Error::Numerical { .. }) => (Vec::new(), Some(e)),
            Err(e) => return Err(e),
        };
        let nonzero = nonzero_eigs(&eigenvalues, opts.nonzero_rel_tol);
        let c_k = condition_sample(&nonzero);
        let sample = Self {
            epoch,
            iteration,
            batch_size,
            learning_rate,
            nonzero_count: nonzero.len(),
            eigenvalues,
            trace,
            c_k,
            l_k,
        };
        Ok((sample, warning))
    }
}

/// Cumulative measures at the end of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMeasure {
    pub epoch: usize,
    /// Running mean of `c_k` over all defined samples so far; `None` until
    /// the first defined sample.
    pub c_bar: Option<f64>,
    pub l_cum: f64,
    pub samples_seen: usize,
}

/// Running `C̄_K` / `L_K` state for one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MeasureSeries {
    pub records: Vec<EpochMeasure>,
    sum_c: f64,
    count_c: usize,
    sum_l: f64,
    samples_seen: usize,
    degenerate: usize,
    current_epoch: usize,
}

impl MeasureSeries {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds one sample into the running sums.
    pub fn update(&mut self, sample: &SpectralSample) -> Result<()> {
        let last_closed = self.records.last().map_or(0, |r| r.epoch);
        if sample.epoch < self.current_epoch || sample.epoch <= last_closed {
            return usage(format!(
                "sample from epoch {} arrived after epoch {}",
                sample.epoch,
                self.current_epoch.max(last_closed)
            ));
        }
        self.current_epoch = sample.epoch;
        self.sum_l += sample.l_k;
        match sample.c_k {
            Some(c) => {
                self.sum_c += c;
                self.count_c += 1;
            }
            None => self.degenerate += 1,
        }
        self.samples_seen += 1;
        Ok(())
    }

    /// Closes `epoch` and emits its `(C̄_K, L_K)` record.
    pub fn finish_epoch(&mut self, epoch: usize) -> Result<EpochMeasure> {
        let last_closed = self.records.last().map_or(0, |r| r.epoch);
        if epoch <= last_closed || epoch < self.current_epoch {
            return usage(format!("epoch {epoch} closed out of order"));
        }
        self.current_epoch = epoch;
        let rec = EpochMeasure { epoch, c_bar: self.c_bar(), l_cum: self.sum_l, samples_seen: self.samples_seen };
        self.records.push(rec);
        Ok(rec)
    }

    pub fn c_bar(&self) -> Option<f64> {
        (self.count_c > 0).then(|| self.sum_c / self.count_c as f64)
    }

    pub fn l_cum(&self) -> f64 {
        self.sum_l
    }

    /// Samples recorded without a condition number (empty non-zero set or
    /// failed eigensolve).
    pub fn degenerate_count(&self) -> usize {
        self.degenerate
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(epoch: usize, c: Option<f64>, l: f64) -> SpectralSample {
        SpectralSample {
            epoch,
            iteration: 0,
            batch_size: 1,
            learning_rate: 0.1,
            eigenvalues: vec![],
            nonzero_count: 0,
            trace: 0.0,
            c_k: c,
            l_k: l,
        }
    }

    fn jacobian(rows: &[Vec<f64>]) -> JacobianBatch {
        JacobianBatch::new(Matrix::from_rows(rows).unwrap(), None).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn nonzero_filter() {
        assert_eq!(nonzero_eigs(&[4.0, 1.0, 1e-18], 1e-10), vec![4.0, 1.0]);
        assert!(nonzero_eigs(&[0.0, 0.0], 1e-10).is_empty());
        assert!(nonzero_eigs(&[], 1e-10).is_empty());
        assert!(nonzero_eigs(&[-1.0, -2.0], 1e-10).is_empty());
    }

    #[test]
    fn rank_deficient_jacobian_has_rank_many_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for r in 1..5 {
            let mut rows = random_rows(&mut rng, r, 12);
            // Duplicates add rows without adding rank.
            for i in 0..3 {
                rows.push(rows[i % r].clone());
            }
            let (s, w) =
                SpectralSample::from_jacobian(&jacobian(&rows), 1, 1, 0.1, &SpectralOptions::default()).unwrap();
            assert!(w.is_none());
            assert_eq!(s.batch_size, r + 3);
            assert_eq!(s.nonzero_count, r);
        }
    }

    #[test]
    fn condition_values() {
        assert_eq!(condition_sample(&[4.0, 1.0]), Some(2.0));
        assert_eq!(condition_sample(&[9.0]), Some(1.0));
        assert_eq!(condition_sample(&[]), None);
    }

    #[test]
    fn condition_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = random_rows(&mut rng, 5, 30);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * 10.0).collect()).collect();
        let opts = SpectralOptions::default();
        let (a, _) = SpectralSample::from_jacobian(&jacobian(&rows), 1, 1, 0.1, &opts).unwrap();
        let (b, _) = SpectralSample::from_jacobian(&jacobian(&scaled), 1, 1, 0.1, &opts).unwrap();
        let (ca, cb) = (a.c_k.unwrap(), b.c_k.unwrap());
        assert!((ca - cb).abs() / ca < 1e-10);
        assert!(ca >= 1.0);
    }

    #[test]
    fn energy_values() {
        assert!((energy_sample(16.0, 0.1, 4).unwrap() - 0.1).abs() < 1e-16);
        assert_eq!(energy_sample(0.0, 0.1, 4).unwrap(), 0.0);
        assert_eq!(energy_sample(-1e-14, 0.1, 4).unwrap(), 0.0);
        assert!(energy_sample(1.0, 0.0, 4).is_err());
        assert!(energy_sample(1.0, -0.1, 4).is_err());
        assert!(energy_sample(1.0, 0.1, 0).is_err());
    }

    #[test]
    fn energy_doubles_with_learning_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let j = jacobian(&random_rows(&mut rng, 6, 20));
        let opts = SpectralOptions::default();
        let (a, _) = SpectralSample::from_jacobian(&j, 1, 1, 0.05, &opts).unwrap();
        let (b, _) = SpectralSample::from_jacobian(&j, 1, 1, 0.1, &opts).unwrap();
        assert_eq!(b.l_k, 2.0 * a.l_k);
    }

    #[test]
    fn trace_and_eigen_energy_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let j = jacobian(&random_rows(&mut rng, 8, 40));
        let (s, _) = SpectralSample::from_jacobian(&j, 1, 1, 0.1, &SpectralOptions::default()).unwrap();
        let eig_sum: f64 = s.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let via_eigs = energy_sample(eig_sum, 0.1, 8).unwrap();
        assert!((via_eigs - s.l_k).abs() / s.l_k < 1e-8);
    }

    #[test]
    fn one_epoch_arithmetic() {
        let mut m = MeasureSeries::new();
        m.update(&sample(1, Some(2.0), 0.1)).unwrap();
        m.update(&sample(1, Some(4.0), 0.3)).unwrap();
        let r = m.finish_epoch(1).unwrap();
        assert_eq!(r.c_bar, Some(3.0));
        assert!((r.l_cum - 0.4).abs() < 1e-15);
    }

    #[test]
    fn empty_epoch_carries_values() {
        let mut m = MeasureSeries::new();
        m.update(&sample(1, Some(2.0), 0.5)).unwrap();
        let first = m.finish_epoch(1).unwrap();
        let second = m.finish_epoch(2).unwrap();
        assert_eq!(first.c_bar, second.c_bar);
        assert_eq!(first.l_cum, second.l_cum);
        assert_eq!(second.samples_seen, 1);
    }

    #[test]
    fn degenerate_samples_are_counted_not_averaged() {
        let mut m = MeasureSeries::new();
        m.update(&sample(1, None, 0.0)).unwrap();
        assert_eq!(m.finish_epoch(1).unwrap().c_bar, None);
        m.update(&sample(2, Some(5.0), 0.1)).unwrap();
        assert_eq!(m.finish_epoch(2).unwrap().c_bar, Some(5.0));
        assert_eq!(m.degenerate_count(), 1);
    }

    #[test]
    fn out_of_order_epochs_rejected() {
        let mut m = MeasureSeries::new();
        m.update(&sample(2, Some(1.0), 0.1)).unwrap();
        assert!(m.update(&sample(1, Some(1.0), 0.1)).is_err());
        m.finish_epoch(2).unwrap();
        assert!(m.update(&sample(2, Some(1.0), 0.1)).is_err());
        assert!(m.finish_epoch(2).is_err());
    }

    #[test]
    fn blocked_gram_matches_full() {
        use crate::model::LayerSpan;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = random_rows(&mut rng, 5, 17);
        let m = Matrix::from_rows(&rows).unwrap();
        let full = gram_from_jacobian(&m).unwrap();

        let single = vec![LayerSpan { start: 0, len: 17, fan_in: 16, fan_out: 1 }];
        let j = JacobianBatch::new(m.clone(), Some(single)).unwrap();
        assert_eq!(layer_blocked_gram(&j).unwrap(), full);

        let split = vec![
            LayerSpan { start: 0, len: 10, fan_in: 3, fan_out: 2 },
            LayerSpan { start: 10, len: 7, fan_in: 6, fan_out: 1 },
        ];
        let j = JacobianBatch::new(m.clone(), Some(split.clone())).unwrap();
        let blocked = layer_blocked_gram(&j).unwrap();
        for (a, b) in blocked.as_slice().iter().zip(full.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Zero the first layer: blocked sum equals the Gram of the rest.
        let mut zeroed = m.clone();
        for r in 0..5 {
            zeroed.row_mut(r)[..10].fill(0.0);
        }
        let j = JacobianBatch::new(zeroed.clone(), Some(split)).unwrap();
        let rest = gram_from_jacobian(&m.column_block(10, 7).unwrap()).unwrap();
        assert_eq!(layer_blocked_gram(&j).unwrap(), rest);

        assert!(layer_blocked_gram(&JacobianBatch::new(m, None).unwrap()).is_err());
    }
}
