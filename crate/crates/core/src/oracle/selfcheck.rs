//! Quick oracle suite behind the `selfcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{finite_difference_gradient, flat_measures, full_fisher_spectrum, relative_diff};
use crate::error::Result;
use crate::fisher::{layer_blocked_gram, nonzero_eigs, MeasureSeries, SpectralSample, DEFAULT_NONZERO_REL_TOL};
use crate::linalg::{eig_sym_default, frobenius_norm_sq, gram_from_jacobian, trace, Matrix};
use crate::model::{init_params, per_sample_gradients, JacobianBatch, LabeledBatch, LayerSpan, MlpSpec};
use crate::schedule::{expand_shorthand, LrSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, outcome: std::result::Result<String, String>) -> Self {
        match outcome {
            Ok(detail) => Self { name, passed: true, detail },
            Err(detail) => Self { name, passed: false, detail },
        }
    }
}

/// Gram builder under test; swappable so a faulty one can be injected.
pub type GramFn = fn(&Matrix) -> Result<Matrix>;

fn gaussian_jacobian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> JacobianBatch {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    JacobianBatch::new(Matrix::new(rows, cols, data).expect("shape"), None).expect("no partition")
}

/// Non-zero Gram spectrum vs. the `P × P` outer-product spectrum for
/// `count` Gaussian Jacobians with `|B| ∈ [1, 10]`, `P ∈ [|B|, 64]`.
pub fn spectrum_equivalence(gram: GramFn, count: usize, seed: u64, rel_tol: f64) -> CheckResult {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for case in 0..count {
            let b = rng.random_range(1..=10);
            let p = rng.random_range(b..=64);
            let j = gaussian_jacobian(&mut rng, b, p);
            let g = gram(&j.matrix).map_err(|e| format!("case {case}: {e}"))?;
            if g.rows() != b || g.cols() != b {
                return Err(format!("case {case}: gram is {}x{}, expected {b}x{b}", g.rows(), g.cols()));
            }
            let fast = eig_sym_default(&g).map_err(|e| format!("case {case}: {e}"))?.eigenvalues;
            let fast = nonzero_eigs(&fast, DEFAULT_NONZERO_REL_TOL);
            let slow = full_fisher_spectrum(&j).map_err(|e| format!("case {case}: {e}"))?;
            let slow = nonzero_eigs(&slow, DEFAULT_NONZERO_REL_TOL);
            if fast.len() != slow.len() {
                return Err(format!("case {case} ({b}x{p}): {} vs {} non-zero eigenvalues", fast.len(), slow.len()));
            }
            for (x, y) in fast.iter().zip(&slow) {
                let r = relative_diff(*x, *y);
                worst = worst.max(r);
                if r > rel_tol {
                    return Err(format!("case {case} ({b}x{p}): {x} vs {y} (rel {r:e})"));
                }
            }
        }
        Ok(format!("{count} jacobians, worst relative gap {worst:.2e}"))
    })();
    CheckResult::new("spectrum equivalence", outcome)
}

/// Random point for a gradient check: He weights plus random biases.
pub fn random_point(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize) {
    let mut params = init_params(spec);
    for span in &params.layers {
        for b in &mut params.theta[span.biases()] {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let x = (0..spec.input_width()).map(|_| rng.random_range(0.0..1.0)).collect();
    let y = rng.random_range(0..spec.class_count());
    (params.theta, x, y)
}

/// Backprop rows vs. central differences on `pairs` random points, taking
/// `per_pair` smooth coordinates with `|g| > 1e-6` from each.
pub fn gradient_check(pairs: usize, per_pair: usize, h: f64, rel_tol: f64, seed: u64) -> CheckResult {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for pair in 0..pairs {
            let spec = MlpSpec::new(vec![6, 5, 4, 3], rng.random()).map_err(|e| e.to_string())?;
            let (theta, x, y) = random_point(&spec, &mut rng);
            let mut params = init_params(&spec);
            params.theta = theta.clone();
            let batch = LabeledBatch::new(Matrix::new(1, 6, x.clone()).unwrap(), vec![y]).unwrap();
            let jac = per_sample_gradients(&spec, &params, &batch).map_err(|e| e.to_string())?;
            let row = jac.matrix.row(0);
            let mut taken = 0;
            let mut attempts = 0;
            while taken < per_pair && attempts < 50 * per_pair {
                attempts += 1;
                let i = rng.random_range(0..theta.len());
                let fd = finite_difference_gradient(&spec, &theta, &x, y, h, &[i]).map_err(|e| e.to_string())?[0];
                if !fd.smooth || row[i].abs() <= 1e-6 {
                    continue;
                }
                let r = relative_diff(row[i], fd.value);
                worst = worst.max(r);
                if r > rel_tol {
                    return Err(format!("pair {pair} coord {i}: backprop {} vs fd {} (rel {r:e})", row[i], fd.value));
                }
                taken += 1;
                checked += 1;
            }
            if taken < per_pair {
                return Err(format!("pair {pair}: only {taken} smooth coordinates found"));
            }
        }
        Ok(format!("{checked} coordinates, worst relative gap {worst:.2e}"))
    })();
    CheckResult::new("gradient check", outcome)
}

/// `trace(Gram) = ‖J‖_F²` and layer-blocked Gram = full Gram.
pub fn trace_identities(count: usize, seed: u64) -> CheckResult {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_trace: f64 = 0.0;
        let mut worst_block: f64 = 0.0;
        for case in 0..count {
            let b = rng.random_range(1..=16);
            let p = rng.random_range(2..=200);
            let j = gaussian_jacobian(&mut rng, b, p);
            let g = gram_from_jacobian(&j.matrix).map_err(|e| e.to_string())?;
            let r = relative_diff(trace(&g).unwrap(), frobenius_norm_sq(&j.matrix));
            worst_trace = worst_trace.max(r);
            if r > 1e-10 {
                return Err(format!("case {case}: trace identity off by {r:e}"));
            }
            let cut = rng.random_range(1..p);
            let spans = vec![
                LayerSpan { start: 0, len: cut, fan_in: cut, fan_out: 1 },
                LayerSpan { start: cut, len: p - cut, fan_in: p - cut, fan_out: 1 },
            ];
            let jb = JacobianBatch::new(j.matrix.clone(), Some(spans)).unwrap();
            let blocked = layer_blocked_gram(&jb).map_err(|e| e.to_string())?;
            for (x, y) in blocked.as_slice().iter().zip(g.as_slice()) {
                worst_block = worst_block.max((x - y).abs());
            }
            if worst_block > 1e-12 {
                return Err(format!("case {case}: blocked gram off by {worst_block:e}"));
            }
        }
        Ok(format!("{count} jacobians, trace rel {worst_trace:.2e}, block abs {worst_block:.2e}"))
    })();
    CheckResult::new("trace identities", outcome)
}

/// Running measures vs. flat re-summation on a synthetic sample stream.
pub fn measure_arithmetic(epochs: usize, seed: u64) -> CheckResult {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut series = MeasureSeries::new();
        let mut log = Vec::new();
        let mut iteration = 0;
        for epoch in 1..=epochs {
            for _ in 0..rng.random_range(0..5) {
                iteration += 1;
                let b = rng.random_range(1..=6);
                let p = rng.random_range(b..=20);
                let j = gaussian_jacobian(&mut rng, b, p);
                let lr = rng.random_range(0.001..0.5);
                let (s, _) = SpectralSample::from_jacobian(&j, epoch, iteration, lr, &Default::default())
                    .map_err(|e| e.to_string())?;
                if let Some(c) = s.c_k {
                    if c < 1.0 {
                        return Err(format!("c_k = {c} < 1"));
                    }
                }
                let scaled = JacobianBatch::new(
                    Matrix::new(b, p, j.matrix.as_slice().iter().map(|v| 10.0 * v).collect()).expect("shape"),
                    None,
                )
                .expect("no partition");
                let (s10, _) = SpectralSample::from_jacobian(&scaled, epoch, iteration, lr, &Default::default())
                    .map_err(|e| e.to_string())?;
                match (s.c_k, s10.c_k) {
                    (Some(a), Some(c)) if relative_diff(a, c) <= 1e-10 => {}
                    (None, None) => {}
                    other => return Err(format!("c_k not scale invariant: {other:?}")),
                }
                let (s2, _) = SpectralSample::from_jacobian(&j, epoch, iteration, 2.0 * lr, &Default::default())
                    .map_err(|e| e.to_string())?;
                if s2.l_k != 2.0 * s.l_k {
                    return Err(format!("l_k {} does not double to {}", s.l_k, s2.l_k));
                }
                series.update(&s).map_err(|e| e.to_string())?;
                log.push(s);
            }
            series.finish_epoch(epoch).map_err(|e| e.to_string())?;
        }
        let flat = flat_measures(&log, epochs);
        let mut prev_l = 0.0;
        for (rec, (c, l)) in series.records.iter().zip(flat) {
            if rec.l_cum < prev_l {
                return Err(format!("L decreased at epoch {}", rec.epoch));
            }
            prev_l = rec.l_cum;
            if (rec.l_cum - l).abs() > 1e-12 {
                return Err(format!("epoch {}: L {} vs {}", rec.epoch, rec.l_cum, l));
            }
            match (rec.c_bar, c) {
                (None, None) => {}
                (Some(a), Some(b)) if (a - b).abs() <= 1e-12 * b.abs().max(1.0) => {}
                other => return Err(format!("epoch {}: C̄ {other:?}", rec.epoch)),
            }
        }
        Ok(format!("{} samples over {epochs} epochs, scale and step-size checks exact", log.len()))
    })();
    CheckResult::new("measure arithmetic", outcome)
}

/// Decay epochs and shorthand sequences against literal tables.
pub fn schedule_tables() -> CheckResult {
    let outcome = (|| {
        let expect_decay = [(320usize, [161usize, 241]), (40, [21, 31])];
        for (total, [d1, d2]) in expect_decay {
            let lr = LrSchedule::multi_step(0.1, total).map_err(|e| e.to_string())?;
            let at = |e| lr.lr_at(e).unwrap();
            if !(at(d1 - 1) == 0.1 && at(d1) < at(d1 - 1) && at(d2 - 1) == at(d1) && at(d2) < at(d2 - 1)) {
                return Err(format!("{total} epochs: decays not at {d1}/{d2}"));
            }
        }
        let tables: [(&str, [usize; 5]); 3] = [
            ("s32-to-512", [32, 64, 128, 256, 512]),
            ("s512-to-32", [512, 256, 128, 64, 32]),
            ("s16-to-64", [16, 16, 32, 32, 64]),
        ];
        for (name, want) in tables {
            let got = expand_shorthand(name, 40).map_err(|e| e.to_string())?.sizes;
            if got != want {
                return Err(format!("{name}: {got:?}"));
            }
        }
        Ok("decay epochs 161/241 and 21/31; 3 shorthand sequences".into())
    })();
    CheckResult::new("schedule tables", outcome)
}

/// The full suite with the library's own Gram builder.
pub fn run_all() -> Vec<CheckResult> {
    run_with_gram(gram_from_jacobian)
}

pub fn run_with_gram(gram: GramFn) -> Vec<CheckResult> {
    vec![
        spectrum_equivalence(gram, 100, 11, 1e-8),
        gradient_check(20, 10, 1e-5, 1e-4, 12),
        trace_identities(100, 13),
        measure_arithmetic(8, 14),
        schedule_tables(),
    ]
}
