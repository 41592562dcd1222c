//! Fast invariant suite: channel calibration, loss analytics, gradient
//! checks, the variational-bound property and the mutual-information
//! estimator oracle.
//!
//! The loss functions under test are taken from a [`LossHooks`] table so a
//! deliberately broken implementation can be swapped in to confirm the
//! suite catches it.

use std::fmt;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::channel::{awgn_transmit, measured_snr_db, normalize_power, ChannelSpec};
use crate::error::{Error, Result};
use crate::objectives::{self, estimate_mutual_information, EstimatorConfig};
use crate::rng;

type Binary = fn(&Tensor, &Tensor) -> Result<Tensor>;
type Unary = fn(&Tensor) -> Result<Tensor>;
type Labelled = fn(&Tensor, &[u32]) -> Result<Tensor>;

/// The loss implementations exercised by [`run_selftest`].
#[derive(Clone, Copy)]
pub struct LossHooks {
    pub discriminator_loss: Binary,
    pub mi_ts_estimate: Unary,
    pub discriminator_loss_logits: Binary,
    pub mi_ts_estimate_logits: Unary,
    pub variational_bound: Labelled,
    pub reconstruction_loss: Binary,
}

impl Default for LossHooks {
    fn default() -> Self {
        LossHooks {
            discriminator_loss: objectives::discriminator_loss,
            mi_ts_estimate: objectives::mi_ts_estimate,
            discriminator_loss_logits: objectives::discriminator_loss_logits,
            mi_ts_estimate_logits: objectives::mi_ts_estimate_logits,
            variational_bound: objectives::variational_bound,
            reconstruction_loss: objectives::reconstruction_loss,
        }
    }
}

/// One named check with what was measured and what was expected.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub expected: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    fn push(&mut self, name: impl Into<String>, measured: f64, expected: impl Into<String>, passed: bool) {
        self.checks.push(Check {
            name: name.into(),
            measured,
            expected: expected.into(),
            passed: passed && measured.is_finite(),
        });
    }

    /// Records `|measured - target| <= tol`.
    fn near(&mut self, name: impl Into<String>, measured: f64, target: f64, tol: f64) {
        let ok = (measured - target).abs() <= tol;
        self.push(name, measured, format!("{target:.6} ± {tol:e}"), ok);
    }

    /// Records `measured < bound`.
    fn below(&mut self, name: impl Into<String>, measured: f64, bound: f64) {
        self.push(name, measured, format!("< {bound:e}"), measured < bound);
    }

    /// Records a check that failed to run at all.
    fn errored(&mut self, name: impl Into<String>, err: &Error) {
        self.push(name, f64::NAN, format!("no error (got: {err})"), false);
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<48} measured {:>14.6e}  expected {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.expected
            )?;
        }
        let failed = self.failures().len();
        write!(f, "{} checks, {failed} failed", self.checks.len())
    }
}

// ---------------------------------------------------------------------------
// Gradient utilities

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Autograd gradients of a scalar `f` with respect to each input.
pub fn autograd(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let vars: Vec<Var> = inputs.iter().map(Var::from_tensor).collect::<candle_core::Result<_>>()?;
    let tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tensors)?.backward()?;
    vars.iter()
        .map(|v| match grads.get(v.as_tensor()) {
            Some(g) => Ok(g.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?),
            None => Ok(vec![0.0; v.elem_count()]),
        })
        .collect()
}

/// Central finite differences of `f` (evaluated in the inputs' dtype) with
/// step `h`.
pub fn finite_differences(
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let base: Vec<f64> = input.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let mut grad = Vec::with_capacity(base.len());
        for j in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                let t = Tensor::from_vec(v, input.dims(), input.device())?.to_dtype(input.dtype())?;
                let mut args = inputs.to_vec();
                args[i] = t;
                scalar(&f(&args)?)
            };
            grad.push((eval(h)? - eval(-h)?) / (2.0 * h));
        }
        out.push(grad);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)` over all inputs.
pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}

/// Largest relative error between autograd and central differences over
/// the given instances.
pub fn gradient_check(
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    instances: &[Vec<Tensor>],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for inputs in instances {
        let a = autograd(f, inputs)?;
        let n = finite_differences(f, inputs, 1e-6)?;
        worst = worst.max(relative_error(&a, &n));
    }
    Ok(worst)
}

/// `f64` tensor with entries uniform in `[lo, hi)`.
pub fn uniform_tensor(dims: &[usize], lo: f64, hi: f64, rng: &mut rng::Rng) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, dims, &Device::Cpu)?)
}

// ---------------------------------------------------------------------------
// Oracles

/// Mutual information in nats of a joint distribution given as integer
/// counts `counts[y][s]`.
pub fn discrete_mutual_information(counts: &[Vec<u32>]) -> f64 {
    let total: f64 = counts.iter().flatten().map(|&c| c as f64).sum();
    let py: Vec<f64> = counts.iter().map(|r| r.iter().sum::<u32>() as f64 / total).collect();
    let width = counts.first().map_or(0, Vec::len);
    let ps: Vec<f64> = (0..width)
        .map(|s| counts.iter().map(|r| r[s] as f64).sum::<f64>() / total)
        .collect();
    let mut mi = 0.0;
    for (y, row) in counts.iter().enumerate() {
        for (s, &c) in row.iter().enumerate() {
            if c > 0 {
                let p = c as f64 / total;
                mi += p * (p / (py[y] * ps[s])).ln();
            }
        }
    }
    mi
}

/// Entropy in nats of the `s` marginal of `counts[y][s]`.
pub fn label_entropy(counts: &[Vec<u32>]) -> f64 {
    let total: f64 = counts.iter().flatten().map(|&c| c as f64).sum();
    let width = counts.first().map_or(0, Vec::len);
    (0..width)
        .map(|s| counts.iter().map(|r| r[s] as f64).sum::<f64>() / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Expands `counts[y][s]` into one batch row per sample: the row holds
/// `log_q[y]`, the label is `s`. The batch mean of the variational bound
/// over this batch is then the exact expectation under the counts.
pub fn enumerate_toy(counts: &[Vec<u32>], log_q: &[Vec<f64>]) -> Result<(Tensor, Vec<u32>)> {
    let width = log_q.first().map_or(0, Vec::len);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (y, row) in counts.iter().enumerate() {
        for (s, &c) in row.iter().enumerate() {
            for _ in 0..c {
                rows.extend_from_slice(&log_q[y]);
                labels.push(s as u32);
            }
        }
    }
    let n = labels.len();
    Ok((Tensor::from_vec(rows, (n, width), &Device::Cpu)?, labels))
}

/// The true posterior `ln p(s | y)` of the counts (with `ln 0` replaced by
/// a large negative number).
pub fn true_log_posterior(counts: &[Vec<u32>]) -> Vec<Vec<f64>> {
    counts
        .iter()
        .map(|row| {
            let total: u32 = row.iter().sum();
            row.iter()
                .map(|&c| if c == 0 { -1e3 } else { (c as f64 / total as f64).ln() })
                .collect()
        })
        .collect()
}

/// A random joint table of `ys × ss` counts; every `y` row is non-empty.
pub fn random_counts(ys: usize, ss: usize, rng: &mut rng::Rng) -> Vec<Vec<u32>> {
    (0..ys)
        .map(|_| {
            let mut row: Vec<u32> = (0..ss).map(|_| rng.random_range(0..6)).collect();
            if row.iter().all(|&c| c == 0) {
                row[0] = 1;
            }
            row
        })
        .collect()
}

/// `n` samples of a standard bivariate Gaussian with correlation `rho`, as
/// two `(n, 1)` tensors.
pub fn correlated_gaussians(n: usize, rho: f64, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut r = rng::seeded(seed);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let c = (1.0 - rho * rho).sqrt();
    for _ in 0..n {
        let u: f64 = StandardNormal.sample(&mut r);
        let v: f64 = StandardNormal.sample(&mut r);
        a.push(u as f32);
        b.push((rho * u + c * v) as f32);
    }
    Ok((
        Tensor::from_vec(a, (n, 1), &Device::Cpu)?,
        Tensor::from_vec(b, (n, 1), &Device::Cpu)?,
    ))
}

/// Estimator settings used by the Gaussian oracle.
pub fn oracle_estimator() -> EstimatorConfig {
    EstimatorConfig {
        hidden: 64,
        epochs: 20,
        batch_size: 256,
        learning_rate: 3e-3,
        floor: 1e-6,
    }
}

/// Density-ratio estimate of I(a; b) for a bivariate Gaussian with
/// correlation `rho`, averaged over `repeats` seeds.
pub fn gaussian_mi_estimate(rho: f64, samples: usize, repeats: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..repeats {
        let s = rng::derive(seed, &format!("gaussian/{rho}/{k}"));
        let (a, b) = correlated_gaussians(samples, rho, s)?;
        total += estimate_mutual_information(&a, &b, &oracle_estimator(), s)?;
    }
    Ok(total / repeats as f64)
}

// ---------------------------------------------------------------------------
// The suite

/// Channel calibration at −5, 0 and 10 dB over 10⁶ symbols, and the
/// bit-exact noiseless path.
pub fn channel_checks(report: &mut SelftestReport) -> Result<()> {
    let n = 1_000_000;
    let mut r = rng::seeded(rng::derive(17, "selftest-channel"));
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    let y = normalize_power(&Tensor::from_vec(v, (1000, n / 1000), &Device::Cpu)?)?;
    for snr in [-5.0, 0.0, 10.0] {
        let heard = awgn_transmit(&y, &ChannelSpec::new(snr, 3)?)?;
        report.near(format!("channel: empirical SNR at {snr} dB"), measured_snr_db(&y, &heard)?, snr, 0.2);
    }
    let heard = awgn_transmit(&y, &ChannelSpec::noiseless(3))?;
    let same = heard.eq(&y)?.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?;
    report.near("channel: noiseless path is bit-exact", same, 1.0, 0.0);
    Ok(())
}

/// Closed-form values of every loss on hand-computed inputs.
pub fn analytic_checks(report: &mut SelftestReport, hooks: &LossHooks) -> Result<()> {
    let dev = Device::Cpu;
    let (j, p) = (0.8f64, 0.3f64);
    let joint = Tensor::full(j, 5, &dev)?;
    let perm = Tensor::full(p, 5, &dev)?;
    report.near(
        "analytic: discriminator loss at constant scores",
        scalar(&(hooks.discriminator_loss)(&joint, &perm)?)?,
        -j.ln() - (1.0 - p).ln(),
        1e-12,
    );
    report.near(
        "analytic: MI estimate at constant scores",
        scalar(&(hooks.mi_ts_estimate)(&joint)?)?,
        (j / (1.0 - j)).ln(),
        1e-12,
    );
    let (lj, lp) = (1.5f64, -0.5f64);
    report.near(
        "analytic: discriminator loss on constant logits",
        scalar(&(hooks.discriminator_loss_logits)(
            &Tensor::full(lj, 5, &dev)?,
            &Tensor::full(lp, 5, &dev)?,
        )?)?,
        (1.0 + (-lj).exp()).ln() + (1.0 + lp.exp()).ln(),
        1e-12,
    );
    report.near(
        "analytic: MI estimate on constant logits",
        scalar(&(hooks.mi_ts_estimate_logits)(&Tensor::full(lj, 5, &dev)?)?)?,
        lj,
        1e-12,
    );
    let log_probs = Tensor::from_vec(
        vec![0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln(), 0.1f64.ln(), 0.2f64.ln(), 0.7f64.ln()],
        (2, 3),
        &dev,
    )?;
    report.near(
        "analytic: variational bound on a 2x3 table",
        scalar(&(hooks.variational_bound)(&log_probs, &[0, 2])?)?,
        (0.5f64.ln() + 0.7f64.ln()) / 2.0,
        1e-12,
    );
    let x = Tensor::from_vec(vec![0.0f64, 1.0, 0.5, 0.25], (1, 4), &dev)?;
    let x_hat = Tensor::from_vec(vec![0.5f64, 1.0, 0.0, 0.25], (1, 4), &dev)?;
    report.near(
        "analytic: reconstruction MSE",
        scalar(&(hooks.reconstruction_loss)(&x, &x_hat)?)?,
        0.125,
        1e-12,
    );
    Ok(())
}

/// Autograd against central finite differences and against the closed-form
/// gradient, on ten random instances of every differentiable loss.
pub fn gradient_checks(report: &mut SelftestReport, hooks: &LossHooks) -> Result<()> {
    let mut r = rng::seeded(rng::derive(23, "selftest-gradients"));
    let h = *hooks;
    let mut worst_fd = [0.0f64; 6];
    let mut worst_analytic = [0.0f64; 6];
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    for _ in 0..10 {
        let n = r.random_range(2..7);
        let joint = uniform_tensor(&[n], 0.05, 0.95, &mut r)?;
        let perm = uniform_tensor(&[n], 0.05, 0.95, &mut r)?;
        let jv: Vec<f64> = joint.to_vec1()?;
        let pv: Vec<f64> = perm.to_vec1()?;
        let nf = n as f64;

        let disc = move |t: &[Tensor]| (h.discriminator_loss)(&t[0], &t[1]);
        let inputs = vec![joint.clone(), perm.clone()];
        worst_fd[0] = worst_fd[0].max(gradient_check(&disc, std::slice::from_ref(&inputs))?);
        let expected = vec![
            jv.iter().map(|j| -1.0 / (nf * j)).collect(),
            pv.iter().map(|p| 1.0 / (nf * (1.0 - p))).collect(),
        ];
        worst_analytic[0] = worst_analytic[0].max(relative_error(&autograd(&disc, &inputs)?, &expected));

        let mi = move |t: &[Tensor]| (h.mi_ts_estimate)(&t[0]);
        let inputs = vec![joint.clone()];
        worst_fd[1] = worst_fd[1].max(gradient_check(&mi, std::slice::from_ref(&inputs))?);
        let expected = vec![jv.iter().map(|j| 1.0 / (nf * j * (1.0 - j))).collect()];
        worst_analytic[1] = worst_analytic[1].max(relative_error(&autograd(&mi, &inputs)?, &expected));

        let classes = r.random_range(2..6);
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..classes as u32)).collect();
        let logits = uniform_tensor(&[n, classes], -2.0, 2.0, &mut r)?;
        let l2 = labels.clone();
        let bound = move |t: &[Tensor]| -> Result<Tensor> {
            (h.variational_bound)(&candle_nn::ops::log_softmax(&t[0], D::Minus1)?, &l2)
        };
        let inputs = vec![logits.clone()];
        worst_fd[2] = worst_fd[2].max(gradient_check(&bound, std::slice::from_ref(&inputs))?);
        let probs: Vec<Vec<f64>> = candle_nn::ops::softmax(&logits, D::Minus1)?.to_vec2()?;
        let expected = vec![probs
            .iter()
            .zip(&labels)
            .flat_map(|(row, &s)| {
                row.iter()
                    .enumerate()
                    .map(move |(c, p)| ((c == s as usize) as u8 as f64 - p) / nf)
            })
            .collect()];
        worst_analytic[2] = worst_analytic[2].max(relative_error(&autograd(&bound, &inputs)?, &expected));

        let x = uniform_tensor(&[n, 3], 0.0, 1.0, &mut r)?;
        let x_hat = uniform_tensor(&[n, 3], 0.0, 1.0, &mut r)?;
        let mse = move |t: &[Tensor]| (h.reconstruction_loss)(&t[0], &t[1]);
        let inputs = vec![x.clone(), x_hat.clone()];
        worst_fd[3] = worst_fd[3].max(gradient_check(&mse, std::slice::from_ref(&inputs))?);
        let diff: Vec<f64> = (&x_hat - &x)?.flatten_all()?.to_vec1()?;
        let count = diff.len() as f64;
        let expected = vec![
            diff.iter().map(|d| -2.0 * d / count).collect(),
            diff.iter().map(|d| 2.0 * d / count).collect(),
        ];
        worst_analytic[3] = worst_analytic[3].max(relative_error(&autograd(&mse, &inputs)?, &expected));

        let joint = uniform_tensor(&[n], -3.0, 3.0, &mut r)?;
        let perm = uniform_tensor(&[n], -3.0, 3.0, &mut r)?;
        let jv: Vec<f64> = joint.to_vec1()?;
        let pv: Vec<f64> = perm.to_vec1()?;
        let disc = move |t: &[Tensor]| (h.discriminator_loss_logits)(&t[0], &t[1]);
        let inputs = vec![joint.clone(), perm.clone()];
        worst_fd[4] = worst_fd[4].max(gradient_check(&disc, std::slice::from_ref(&inputs))?);
        let expected = vec![
            jv.iter().map(|&j| -sigmoid(-j) / nf).collect(),
            pv.iter().map(|&p| sigmoid(p) / nf).collect(),
        ];
        worst_analytic[4] = worst_analytic[4].max(relative_error(&autograd(&disc, &inputs)?, &expected));

        let mi = move |t: &[Tensor]| (h.mi_ts_estimate_logits)(&t[0]);
        let inputs = vec![joint.clone()];
        worst_fd[5] = worst_fd[5].max(gradient_check(&mi, std::slice::from_ref(&inputs))?);
        let expected = vec![vec![1.0 / nf; n]];
        worst_analytic[5] = worst_analytic[5].max(relative_error(&autograd(&mi, &inputs)?, &expected));
    }
    let names = [
        "discriminator loss",
        "MI estimate",
        "variational bound",
        "reconstruction MSE",
        "discriminator loss (logits)",
        "MI estimate (logits)",
    ];
    for (i, name) in names.iter().enumerate() {
        report.below(format!("gradient: {name} vs finite differences"), worst_fd[i], 1e-4);
        report.below(format!("gradient: {name} vs closed form"), worst_analytic[i], 1e-9);
    }
    Ok(())
}

/// The variational bound against brute-force mutual information on
/// enumerable discrete toys, including equality at the true posterior.
pub fn bound_checks(report: &mut SelftestReport, hooks: &LossHooks) -> Result<()> {
    let mut r = rng::seeded(rng::derive(29, "selftest-bound"));
    let mut worst_slack = f64::NEG_INFINITY;
    let mut worst_equality: f64 = 0.0;
    for _ in 0..10 {
        let ys = r.random_range(2..17);
        let ss = r.random_range(2..6);
        let counts = random_counts(ys, ss, &mut r);
        let mi = discrete_mutual_information(&counts);
        let h_s = label_entropy(&counts);
        let logits: Vec<Vec<f64>> = (0..ys)
            .map(|_| (0..ss).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let log_q: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| {
                let z = row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
                row.iter().map(|v| v - z).collect()
            })
            .collect();
        let (table, labels) = enumerate_toy(&counts, &log_q)?;
        let bound = scalar(&(hooks.variational_bound)(&table, &labels)?)? + h_s;
        worst_slack = worst_slack.max(bound - mi);
        let (table, labels) = enumerate_toy(&counts, &true_log_posterior(&counts))?;
        let tight = scalar(&(hooks.variational_bound)(&table, &labels)?)? + h_s;
        worst_equality = worst_equality.max((tight - mi).abs());
    }
    report.below("bound: bound + H(s) - I(y_s; s), worst case", worst_slack, 1e-9);
    report.below("bound: equality at the true posterior", worst_equality, 1e-9);
    Ok(())
}

/// The density-ratio estimator on correlated Gaussians (ρ = 0.8 and 0).
pub fn estimator_checks(report: &mut SelftestReport) -> Result<()> {
    let target = -0.5 * (1.0f64 - 0.64).ln();
    report.near("estimator: Gaussian rho = 0.8", gaussian_mi_estimate(0.8, 20_000, 1, 5)?, target, 0.1);
    report.near("estimator: Gaussian rho = 0", gaussian_mi_estimate(0.0, 20_000, 1, 5)?, 0.0, 0.05);
    Ok(())
}

/// Runs every check; errors inside a group are recorded as failures.
pub fn run_selftest(hooks: &LossHooks) -> SelftestReport {
    let mut report = SelftestReport::default();
    let groups: [(&str, &dyn Fn(&mut SelftestReport) -> Result<()>); 5] = [
        ("channel", &channel_checks),
        ("analytic", &|r| analytic_checks(r, hooks)),
        ("gradient", &|r| gradient_checks(r, hooks)),
        ("bound", &|r| bound_checks(r, hooks)),
        ("estimator", &estimator_checks),
    ];
    for (name, group) in groups {
        if let Err(e) = group(&mut report) {
            report.errored(format!("{name}: group aborted"), &e);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discrete_oracles_on_known_tables() {
        // independent table: I = 0, H = ln 2
        let counts = vec![vec![1, 1], vec![2, 2]];
        assert!(discrete_mutual_information(&counts).abs() < 1e-15);
        assert!((label_entropy(&counts) - 2f64.ln()).abs() < 1e-15);
        // deterministic table: I = H(s) = ln 2
        let counts = vec![vec![3, 0], vec![0, 3]];
        assert!((discrete_mutual_information(&counts) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn finite_differences_of_a_square() {
        let f = |t: &[Tensor]| -> Result<Tensor> { Ok(t[0].sqr()?.sum_all()?) };
        let x = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let g = finite_differences(&f, &[x.clone()], 1e-6).unwrap();
        assert!(relative_error(&g, &[vec![2.0, -4.0, 1.0]]) < 1e-8);
        assert!(relative_error(&autograd(&f, &[x]).unwrap(), &g) < 1e-8);
    }

    fn flipped_discriminator_loss(j: &Tensor, p: &Tensor) -> Result<Tensor> {
        Ok(objectives::discriminator_loss(j, p)?.neg()?)
    }

    #[test]
    fn fast_groups_pass_and_catch_a_sign_flip() {
        let mut good = SelftestReport::default();
        analytic_checks(&mut good, &LossHooks::default()).unwrap();
        gradient_checks(&mut good, &LossHooks::default()).unwrap();
        bound_checks(&mut good, &LossHooks::default()).unwrap();
        assert!(good.passed(), "{good}");

        let hooks = LossHooks {
            discriminator_loss: flipped_discriminator_loss,
            ..LossHooks::default()
        };
        let mut bad = SelftestReport::default();
        analytic_checks(&mut bad, &hooks).unwrap();
        gradient_checks(&mut bad, &hooks).unwrap();
        let failed: Vec<&str> = bad.failures().iter().map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"analytic: discriminator loss at constant scores"));
        assert!(failed.contains(&"gradient: discriminator loss vs closed form"));
        assert_eq!(failed.len(), 2, "{bad}");
    }

    #[test]
    fn report_lists_measured_and_expected() {
        let mut r = SelftestReport::default();
        r.near("a", 1.0, 1.0, 0.1);
        r.below("b", 2.0, 1.0);
        let text = r.to_string();
        assert!(text.contains("PASS a"));
        assert!(text.contains("FAIL b"));
        assert!(text.ends_with("2 checks, 1 failed"));
    }
}
