//! Losses and estimators of the disentangled information-bottleneck
//! objective.
//!
//! Every function returns a scalar [`Tensor`] that stays on the autograd
//! graph, works in both `f32` and `f64`, and uses natural logarithms.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::epoch_batches;
use crate::error::{Error, Result};
use crate::nn::{Mlp, ModelBundle, ParamBuilder, ParamStore};
use crate::rng;

/// Mean squared error over batch and pixels.
pub fn reconstruction_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Input(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    if x.elem_count() == 0 {
        return Err(Error::Input("empty reconstruction batch".into()));
    }
    Ok((x - x_hat)?.sqr()?.mean_all()?)
}

fn label_index(labels: &[u32], classes: usize, rows: usize, device: &Device) -> Result<Tensor> {
    if labels.len() != rows || rows == 0 {
        return Err(Error::Input(format!(
            "expected {rows} labels, got {}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Input(format!(
            "private label {bad} out of range for {classes} categories"
        )));
    }
    Ok(Tensor::from_vec(labels.to_vec(), (rows, 1), device)?)
}

/// Batch mean of `log_probs[i, labels[i]]` for a `(B, S)` matrix of log
/// posteriors: the classifier-based lower bound on I(y_s; s) up to the
/// constant H(s). Always ≤ 0 for normalised inputs.
pub fn variational_bound(log_probs: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (rows, classes) = log_probs.dims2()?;
    let idx = label_index(labels, classes, rows, log_probs.device())?;
    Ok(log_probs.gather(&idx, 1)?.mean_all()?)
}

/// E[log C_γ(f_φs(x))[s]] over a batch of images.
///
/// Maximising this is the first training step; it equals minus the
/// cross-entropy of the private classifier.
pub fn private_info_bound(x: &Tensor, s: &[u32], model: &ModelBundle) -> Result<Tensor> {
    let y_s = model.private_encode(x)?;
    let logits = model.classify_private_logits(&y_s)?;
    variational_bound(&candle_nn::ops::log_softmax(&logits, D::Minus1)?, s)
}

fn permutation(n: usize, rng: &mut rng::Rng) -> Vec<u32> {
    let mut p: Vec<u32> = (0..n as u32).collect();
    p.shuffle(rng);
    p
}

/// Shuffles the rows of `y_t` and of `y_s` with two independent, distinct
/// permutations so that the returned pairs are draws from the product of
/// the marginals.
pub fn permute_marginals(y_t: &Tensor, y_s: &Tensor, seed: u64) -> Result<(Tensor, Tensor)> {
    let n = y_t.dim(0)?;
    if n < 2 || y_s.dim(0)? != n {
        return Err(Error::Input(format!(
            "permutation needs matching batches of at least 2 rows, got {n} and {}",
            y_s.dim(0)?
        )));
    }
    let mut r = rng::seeded(rng::derive(seed, "permute-marginals"));
    let first = permutation(n, &mut r);
    let mut second = permutation(n, &mut r);
    while second == first {
        second = permutation(n, &mut r);
    }
    let device = y_t.device();
    let pt = Tensor::from_vec(first, n, device)?;
    let ps = Tensor::from_vec(second, n, device)?;
    Ok((y_t.index_select(&pt, 0)?, y_s.index_select(&ps, 0)?))
}

fn check_scores(scores: &Tensor, what: &str) -> Result<()> {
    if scores.elem_count() == 0 {
        return Err(Error::Input(format!("{what}: empty score batch")));
    }
    let v = scores.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(bad) = v.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Numeric(format!(
            "{what}: score {bad} outside (0, 1); clamp upstream"
        )));
    }
    Ok(())
}

/// Binary cross-entropy of the dependence discriminator:
/// `mean[-ln joint] + mean[-ln(1 - perm)]`.
///
/// Minimising it drives scores towards 1 on joint pairs and towards 0 on
/// permuted pairs.
pub fn discriminator_loss(joint_scores: &Tensor, perm_scores: &Tensor) -> Result<Tensor> {
    check_scores(joint_scores, "joint scores")?;
    check_scores(perm_scores, "permuted scores")?;
    let joint = joint_scores.log()?.mean_all()?.neg()?;
    let perm = perm_scores.affine(-1.0, 1.0)?.log()?.mean_all()?.neg()?;
    Ok((joint + perm)?)
}

/// Density-ratio estimate of I(y_t; y_s): batch mean of
/// `ln(D / (1 - D))` over joint-pair scores.
pub fn mi_ts_estimate(joint_scores: &Tensor) -> Result<Tensor> {
    check_scores(joint_scores, "joint scores")?;
    let odds = (joint_scores.log()? - joint_scores.affine(-1.0, 1.0)?.log()?)?;
    Ok(odds.mean_all()?)
}

/// `ln(1 + e^x)`, computed without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// [`discriminator_loss`] on log-odds instead of probabilities:
/// `mean[softplus(-joint)] + mean[softplus(perm)]`.
///
/// Identical in value for unclamped scores, but its gradient never
/// vanishes when the discriminator saturates, which is what the training
/// loop needs.
pub fn discriminator_loss_logits(joint_logits: &Tensor, perm_logits: &Tensor) -> Result<Tensor> {
    if joint_logits.elem_count() == 0 || perm_logits.elem_count() == 0 {
        return Err(Error::Input("empty logit batch".into()));
    }
    let joint = softplus(&joint_logits.neg()?)?.mean_all()?;
    let perm = softplus(perm_logits)?.mean_all()?;
    Ok((joint + perm)?)
}

/// [`mi_ts_estimate`] on log-odds: the batch mean of the logits.
pub fn mi_ts_estimate_logits(joint_logits: &Tensor) -> Result<Tensor> {
    if joint_logits.elem_count() == 0 {
        return Err(Error::Input("empty logit batch".into()));
    }
    Ok(joint_logits.mean_all()?)
}

/// Per-step loss values. `total = mse + alpha · mi_ts_estimate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub alpha: f64,
    /// Keys: `mse`, `mi_ts_estimate`, `private_bound`, `discriminator_bce`,
    /// and `permuted_log_odds` for the centred objective.
    pub components: BTreeMap<String, f64>,
    pub batch_size: usize,
}

impl LossReport {
    pub fn component(&self, key: &str) -> Option<f64> {
        self.components.get(key).copied()
    }

    /// `mse + alpha · (mi_ts_estimate - permuted_log_odds)` recomputed from
    /// the components; a missing `permuted_log_odds` counts as zero.
    pub fn recombined(&self) -> Option<f64> {
        let centre = self.component("permuted_log_odds").unwrap_or(0.0);
        Some(self.component("mse")? + self.alpha * (self.component("mi_ts_estimate")? - centre))
    }
}

/// The second-step objective: reconstruction MSE plus `alpha` times the
/// density-ratio estimate of I(y_t; y_s).
///
/// Returns the differentiable total and a report. The report's
/// `private_bound` and `discriminator_bce` entries are left for the caller
/// to fill in from the frozen step-one quantities and the discriminator
/// update.
pub fn step2_objective(
    x: &Tensor,
    x_hat: &Tensor,
    joint_scores: &Tensor,
    alpha: f64,
) -> Result<(Tensor, LossReport)> {
    combine_step2(x, x_hat, mi_ts_estimate(joint_scores)?, None, alpha)
}

/// [`step2_objective`] with the estimate taken from discriminator log-odds
/// ([`mi_ts_estimate_logits`]).
pub fn step2_objective_logits(
    x: &Tensor,
    x_hat: &Tensor,
    joint_logits: &Tensor,
    alpha: f64,
) -> Result<(Tensor, LossReport)> {
    combine_step2(x, x_hat, mi_ts_estimate_logits(joint_logits)?, None, alpha)
}

/// [`step2_objective_logits`] with the penalty centred on permuted pairs:
/// `mse + alpha · (mean joint log-odds - mean permuted log-odds)`.
///
/// With gradients flowing through both terms, moving every codeword into a
/// region the discriminator scores low no longer pays: only changes that
/// separate the joint from the product distribution move the penalty. For
/// a Bayes-optimal discriminator the joint term is I(y_t; y_s) and the
/// permuted term is minus the reverse divergence, so the penalty is the
/// symmetrised divergence between joint and product: never below the
/// mutual information and zero exactly under independence.
pub fn step2_objective_centred(
    x: &Tensor,
    x_hat: &Tensor,
    joint_logits: &Tensor,
    perm_logits: &Tensor,
    alpha: f64,
) -> Result<(Tensor, LossReport)> {
    let centre = mi_ts_estimate_logits(perm_logits)?;
    combine_step2(x, x_hat, mi_ts_estimate_logits(joint_logits)?, Some(centre), alpha)
}

fn combine_step2(
    x: &Tensor,
    x_hat: &Tensor,
    mi: Tensor,
    centre: Option<Tensor>,
    alpha: f64,
) -> Result<(Tensor, LossReport)> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let mse = reconstruction_loss(x, x_hat)?;
    let penalty = match &centre {
        Some(c) => (&mi - c)?,
        None => mi.clone(),
    };
    let total = if alpha == 0.0 {
        mse.clone()
    } else {
        (&mse + (&penalty * alpha)?)?
    };
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let report = LossReport {
        total: scalar(&total)?,
        alpha,
        components: BTreeMap::from([
            ("mse".to_string(), scalar(&mse)?),
            ("mi_ts_estimate".to_string(), scalar(&mi)?),
        ]),
        batch_size: x.dim(0)?,
    };
    let mut report = report;
    if let Some(c) = &centre {
        report.components.insert("permuted_log_odds".to_string(), scalar(c)?);
    }
    Ok((total, report))
}

/// Settings for [`estimate_mutual_information`].
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub floor: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            hidden: 64,
            epochs: 4,
            batch_size: 256,
            learning_rate: 2e-3,
            floor: 1e-6,
        }
    }
}

/// A trained stand-alone dependence discriminator over `(a, b)` pairs.
pub struct DependenceDiscriminator {
    net: Mlp,
    params: ParamStore,
    floor: f64,
}

impl DependenceDiscriminator {
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Clamped probability that each `(a_i, b_i)` row is a joint draw.
    pub fn scores(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let joint = Tensor::cat(&[a, b], 1)?;
        let p = candle_nn::ops::sigmoid(&self.net.forward(&joint)?)?.squeeze(1)?;
        Ok(p.clamp(self.floor, 1.0 - self.floor)?)
    }
}

/// Trains a discriminator to tell joint `(a_i, b_i)` rows from
/// batch-permuted ones with [`discriminator_loss`].
pub fn train_dependence_discriminator(
    a: &Tensor,
    b: &Tensor,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<DependenceDiscriminator> {
    let (n, da) = a.dims2()?;
    let (nb, db) = b.dims2()?;
    if n != nb || n < cfg.batch_size.max(2) {
        return Err(Error::Input(format!(
            "need matching sample sets of at least one batch, got {n} and {nb}"
        )));
    }
    let device = Device::Cpu;
    let mut params = ParamStore::default();
    let mut init = rng::seeded(rng::derive(seed, "mi-discriminator-init"));
    let net = Mlp::new(
        &mut ParamBuilder::new(&mut params, &mut init, &device),
        da + db,
        cfg.hidden,
        1,
    )?;
    let disc = DependenceDiscriminator {
        net,
        params,
        floor: cfg.floor,
    };
    let mut opt = AdamW::new(
        disc.params.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let a = a.to_dtype(DType::F32)?;
    let b = b.to_dtype(DType::F32)?;
    let mut order = rng::seeded(rng::derive(seed, "mi-batches"));
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(n, cfg.batch_size, &mut order) {
            let idx = Tensor::from_vec(
                batch.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                batch.len(),
                &device,
            )?;
            let (ba, bb) = (a.index_select(&idx, 0)?, b.index_select(&idx, 0)?);
            let (pa, pb) = permute_marginals(&ba, &bb, rng::derive(seed, &format!("perm-{step}")))?;
            let loss = discriminator_loss(&disc.scores(&ba, &bb)?, &disc.scores(&pa, &pb)?)?;
            let v = loss.to_scalar::<f32>()?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("discriminator loss diverged: {v}")));
            }
            opt.backward_step(&loss)?;
            step += 1;
        }
    }
    Ok(disc)
}

/// Estimates I(a; b) in nats: trains a dependence discriminator on the
/// first half of the rows and averages its log-odds over the joint pairs
/// of the second half.
pub fn estimate_mutual_information(
    a: &Tensor,
    b: &Tensor,
    cfg: &EstimatorConfig,
    seed: u64,
) -> Result<f64> {
    let n = a.dim(0)?;
    let half = n / 2;
    let disc = train_dependence_discriminator(
        &a.narrow(0, 0, half)?,
        &b.narrow(0, 0, half)?,
        cfg,
        seed,
    )?;
    let scores = disc.scores(
        &a.narrow(0, half, n - half)?.to_dtype(DType::F32)?,
        &b.narrow(0, half, n - half)?.to_dtype(DType::F32)?,
    )?;
    Ok(mi_ts_estimate(&scores)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::Rng as _;

    fn rand_tensor(dims: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut r = rng::seeded(seed);
        let n: usize = dims.iter().product();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn reconstruction_examples() {
        let x = rand_tensor(&[3, 3, 4, 4], 1, 0.0, 1.0);
        assert_eq!(scalar(&reconstruction_loss(&x, &x).unwrap()), 0.0);
        let zeros = x.zeros_like().unwrap();
        let ones = x.ones_like().unwrap();
        assert_eq!(scalar(&reconstruction_loss(&zeros, &ones).unwrap()), 1.0);
        let y = rand_tensor(&[3, 3, 4, 4], 2, 0.0, 1.0);
        let a: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        let oracle = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
        assert!((scalar(&reconstruction_loss(&x, &y).unwrap()) - oracle).abs() < 1e-10);
        assert!(reconstruction_loss(&x, &y.narrow(0, 0, 2).unwrap()).is_err());
    }

    #[test]
    fn bound_examples() {
        let uniform = Tensor::full((10f64).recip().ln(), (5, 10), &Device::Cpu).unwrap();
        let b = scalar(&variational_bound(&uniform, &[0, 3, 9, 2, 2]).unwrap());
        assert!((b - (-2.302585)).abs() < 1e-6);
        let one_hot = Tensor::from_vec(vec![0.0f64, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0], (2, 2), &Device::Cpu).unwrap();
        assert_eq!(scalar(&variational_bound(&one_hot, &[0, 1]).unwrap()), 0.0);
        assert!(matches!(variational_bound(&uniform, &[0, 1, 2, 3, 10]), Err(Error::Input(_))));
    }

    #[test]
    fn discriminator_loss_examples() {
        let half = Tensor::full(0.5f64, 8, &Device::Cpu).unwrap();
        let l = scalar(&discriminator_loss(&half, &half).unwrap());
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        let hi = Tensor::full(1.0 - 1e-6, 8, &Device::Cpu).unwrap();
        let lo = Tensor::full(1e-6, 8, &Device::Cpu).unwrap();
        assert!(scalar(&discriminator_loss(&hi, &lo).unwrap()) < 1e-5);
        let bad = Tensor::new(&[0.5f64, 1.0], &Device::Cpu).unwrap();
        assert!(matches!(discriminator_loss(&bad, &half), Err(Error::Numeric(_))));
    }

    #[test]
    fn constant_strategy_minimised_at_half() {
        let loss = |p: f64| {
            let s = Tensor::full(p, 4, &Device::Cpu).unwrap();
            scalar(&discriminator_loss(&s, &s).unwrap())
        };
        assert!(loss(0.5) < loss(0.3));
        assert!(loss(0.5) < loss(0.7));
        assert!(loss(0.3) + loss(0.7) > 2.0 * loss(0.5));
    }

    #[test]
    fn log_odds_examples() {
        let s = |p: f64| scalar(&mi_ts_estimate(&Tensor::full(p, 6, &Device::Cpu).unwrap()).unwrap());
        assert_eq!(s(0.5), 0.0);
        assert!((s(0.9) - 9f64.ln()).abs() < 1e-12);
        let v = rand_tensor(&[32], 4, 0.01, 0.99);
        let rev = v.flip(&[0]).unwrap();
        assert!((scalar(&mi_ts_estimate(&v).unwrap()) - scalar(&mi_ts_estimate(&rev).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn permutation_properties() {
        let y_t = rand_tensor(&[256, 3], 5, -1.0, 1.0);
        let y_s = rand_tensor(&[256, 2], 6, -1.0, 1.0);
        let (pt, ps) = permute_marginals(&y_t, &y_s, 11).unwrap();
        let sorted = |t: &Tensor| {
            let mut rows: Vec<Vec<f64>> = t.to_vec2().unwrap();
            rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rows
        };
        assert_eq!(sorted(&pt), sorted(&y_t));
        assert_eq!(sorted(&ps), sorted(&y_s));
        let (again, _) = permute_marginals(&y_t, &y_s, 11).unwrap();
        assert_eq!(again.to_vec2::<f64>().unwrap(), pt.to_vec2::<f64>().unwrap());

        // Rows that keep their original partner: about 1/256 per batch.
        let mut kept = 0usize;
        let trials = 50;
        let original: Vec<Vec<f64>> = Tensor::cat(&[&y_t, &y_s], 1).unwrap().to_vec2().unwrap();
        for seed in 0..trials {
            let (pt, ps) = permute_marginals(&y_t, &y_s, seed).unwrap();
            let pairs: Vec<Vec<f64>> = Tensor::cat(&[&pt, &ps], 1).unwrap().to_vec2().unwrap();
            kept += pairs.iter().filter(|p| original.contains(p)).count();
        }
        assert!((kept as f64 / (trials as f64 * 256.0)) < 0.02);
        assert!(permute_marginals(&y_t.narrow(0, 0, 1).unwrap(), &y_s.narrow(0, 0, 1).unwrap(), 0).is_err());
    }

    #[test]
    fn centred_penalty_ignores_uniform_logit_shifts() {
        let x = rand_tensor(&[4, 3, 2, 2], 7, 0.0, 1.0);
        let x_hat = rand_tensor(&[4, 3, 2, 2], 8, 0.0, 1.0);
        let joint = rand_tensor(&[4], 10, -2.0, 2.0);
        let perm = rand_tensor(&[4], 11, -2.0, 2.0);
        let (total, report) = step2_objective_centred(&x, &x_hat, &joint, &perm, 0.5).unwrap();
        let joint_mean = joint.to_vec1::<f64>().unwrap().iter().sum::<f64>() / 4.0;
        let perm_mean = perm.to_vec1::<f64>().unwrap().iter().sum::<f64>() / 4.0;
        let manual = scalar(&reconstruction_loss(&x, &x_hat).unwrap()) + 0.5 * (joint_mean - perm_mean);
        assert!((scalar(&total) - manual).abs() < 1e-12);
        assert!((report.recombined().unwrap() - report.total).abs() < 1e-12);

        let (shifted, _) =
            step2_objective_centred(&x, &x_hat, &(&joint + 3.0).unwrap(), &(&perm + 3.0).unwrap(), 0.5).unwrap();
        assert!((scalar(&shifted) - scalar(&total)).abs() < 1e-12);
    }

    #[test]
    fn step2_report_recombines() {
        let x = rand_tensor(&[4, 3, 2, 2], 7, 0.0, 1.0);
        let x_hat = rand_tensor(&[4, 3, 2, 2], 8, 0.0, 1.0);
        let scores = rand_tensor(&[4], 9, 0.05, 0.95);
        let (total, report) = step2_objective(&x, &x_hat, &scores, 0.7).unwrap();
        let manual = scalar(&reconstruction_loss(&x, &x_hat).unwrap())
            + 0.7 * scalar(&mi_ts_estimate(&scores).unwrap());
        assert!((scalar(&total) - manual).abs() < 1e-9);
        assert!((report.recombined().unwrap() - report.total).abs() < 1e-9);
        let (t0, _) = step2_objective(&x, &x_hat, &scores, 0.0).unwrap();
        assert_eq!(scalar(&t0), scalar(&reconstruction_loss(&x, &x_hat).unwrap()));
        let half = Tensor::full(0.5f64, 4, &Device::Cpu).unwrap();
        let (t, _) = step2_objective(&x, &x_hat, &half, 3.0).unwrap();
        assert_eq!(scalar(&t), scalar(&reconstruction_loss(&x, &x_hat).unwrap()));
        assert!(step2_objective(&x, &x_hat, &scores, -1.0).is_err());
    }

    #[test]
    fn loss_gradients_flow() {
        let v = Var::from_tensor(&rand_tensor(&[6], 10, 0.1, 0.9)).unwrap();
        let grads = mi_ts_estimate(v.as_tensor()).unwrap().backward().unwrap();
        let g: Vec<f64> = grads.get(v.as_tensor()).unwrap().to_vec1().unwrap();
        let p: Vec<f64> = v.as_tensor().to_vec1().unwrap();
        for (gi, pi) in g.iter().zip(&p) {
            let analytic = 1.0 / (6.0 * pi * (1.0 - pi));
            assert!((gi - analytic).abs() < 1e-9);
        }
    }

    #[test]
    fn estimator_sees_independence() {
        let a = rand_tensor(&[8000, 1], 12, -1.0, 1.0);
        let b = rand_tensor(&[8000, 1], 13, -1.0, 1.0);
        let cfg = EstimatorConfig {
            epochs: 2,
            ..Default::default()
        };
        let mi = estimate_mutual_information(&a, &b, &cfg, 1).unwrap();
        assert!(mi.abs() < 0.1, "estimate {mi}");
    }
}
