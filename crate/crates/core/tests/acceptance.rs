//! Acceptance suite: the desk-scale colored MNIST pipeline plus the
//! invariant checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`):
//!
//! ```text
//! cargo test -p privjscc --test acceptance
//! ```
//!
//! The run directory lives under the cargo target directory unless
//! `PRIVJSCC_OUTPUT_ROOT` points elsewhere. The process exits non-zero if
//! any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use candle_core::Device;

use privjscc::attack::{probe_disentanglement, TransmitModel};
use privjscc::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use privjscc::experiment::{self, baseline_model_id, Experiment, StageSelector, DIB_MODEL_ID};
use privjscc::nn::{ParamGroup, Stage};
use privjscc::rng;
use privjscc::selftest::{self, LossHooks, SelftestReport};
use privjscc::Error;

const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

const DIB_BUDGET: Duration = Duration::from_secs(45 * 60);
const BASELINE_BUDGET: Duration = Duration::from_secs(30 * 60);
const PROBE_BUDGET: Duration = Duration::from_secs(5 * 60);
const ESTIMATOR_BUDGET: Duration = Duration::from_secs(3 * 60);
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);

struct Verdict {
    id: u8,
    title: &'static str,
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(id: u8, title: &'static str, passed: bool, detail: String) -> Self {
        Verdict {
            id,
            title,
            passed,
            detail,
        }
    }

    fn print(&self) {
        println!(
            "{} criterion {}: {} — {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail
        );
    }
}

/// Runs one self-test group and returns its report and wall time.
fn timed_group(group: impl FnOnce(&mut SelftestReport) -> privjscc::Result<()>) -> (SelftestReport, Duration) {
    let start = Instant::now();
    let mut report = SelftestReport::default();
    if let Err(e) = group(&mut report) {
        report.checks.push(selftest::Check {
            name: "group aborted".into(),
            measured: f64::NAN,
            expected: format!("no error (got: {e})"),
            passed: false,
        });
    }
    (report, start.elapsed())
}

fn describe(report: &SelftestReport) -> String {
    report
        .checks
        .iter()
        .map(|c| format!("{} = {:.4e} (expected {})", c.name, c.measured, c.expected))
        .collect::<Vec<_>>()
        .join("; ")
}

fn invariant_criteria() -> Vec<Verdict> {
    let hooks = LossHooks::default();
    let mut verdicts = Vec::new();

    let (report, elapsed) = timed_group(selftest::estimator_checks);
    verdicts.push(Verdict::new(
        5,
        "MI estimator oracle",
        report.passed() && elapsed <= ESTIMATOR_BUDGET,
        format!("{}; {:.0}s", describe(&report), elapsed.as_secs_f64()),
    ));

    let (report, _) = timed_group(|r| selftest::bound_checks(r, &hooks));
    verdicts.push(Verdict::new(6, "variational bound property", report.passed(), describe(&report)));

    let (report, _) = timed_group(selftest::channel_checks);
    verdicts.push(Verdict::new(7, "channel calibration", report.passed(), describe(&report)));

    let (report, elapsed) = timed_group(|r| selftest::gradient_checks(r, &hooks));
    verdicts.push(Verdict::new(
        8,
        "gradient suite",
        report.passed() && elapsed <= GRADIENT_BUDGET,
        format!(
            "{} checks, worst finite-difference error {:.2e}; {:.1}s",
            report.checks.len(),
            report
                .checks
                .iter()
                .filter(|c| c.name.contains("finite differences"))
                .map(|c| c.measured)
                .fold(0.0, f64::max),
            elapsed.as_secs_f64()
        ),
    ));
    verdicts
}

fn run_root() -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root),
        None => PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"),
    }
}

fn pipeline_criteria() -> privjscc::Result<Vec<Verdict>> {
    let config = ExperimentConfig::from_toml(DESK_CONFIG)?;
    let exp = Experiment::at(config.clone(), run_root().join(&config.name))?;
    println!("run directory: {}", exp.paths.root.display());
    experiment::make_data(&exp, true)?;

    let start = Instant::now();
    for stage in [StageSelector::Stage1, StageSelector::Stage2, StageSelector::Finetune] {
        experiment::train(&exp, stage)?;
        println!("trained {stage} after {:.1} min", start.elapsed().as_secs_f64() / 60.0);
    }
    let dib_training = start.elapsed();
    let start = Instant::now();
    experiment::train(&exp, StageSelector::Baseline)?;
    let baseline_training = start.elapsed();

    let baseline_id = baseline_model_id(-5.0);
    let start = Instant::now();
    let dib_summary = experiment::evaluate(&exp, Some(&[DIB_MODEL_ID.to_string()]))?;
    let dib_evaluation = start.elapsed();
    let start = Instant::now();
    let full = experiment::evaluate(&exp, None)?;
    let full_evaluation = start.elapsed();

    let dib = dib_summary.model(DIB_MODEL_ID).expect("dib evaluated");
    let adv = full
        .model(&baseline_id)
        .ok_or_else(|| Error::Config(format!("the desk config must train {baseline_id}")))?;
    let mut verdicts = Vec::new();

    // 1: privacy at chance over the whole grid
    let accuracies: Vec<f64> = dib.record.attacks.iter().map(|a| a.eavesdrop_accuracy).collect();
    let max = accuracies.iter().cloned().fold(f64::MIN, f64::max);
    let min = accuracies.iter().cloned().fold(f64::MAX, f64::min);
    let dib_time = dib_training + dib_evaluation;
    let grid: Vec<String> = dib
        .record
        .attacks
        .iter()
        .map(|a| format!("{}dB:{:.3}", a.snr_ae_db, a.eavesdrop_accuracy))
        .collect();
    verdicts.push(Verdict::new(
        1,
        "privacy at chance",
        max <= 0.15 && max - min <= 0.05 && dib_time <= DIB_BUDGET,
        format!(
            "eavesdropping {}; max {max:.3} (≤ 0.15), spread {:.3} (≤ 0.05); noise control {:.3}–{:.3}; {:.1} min",
            grid.join(" "),
            max - min,
            full.noise_control.iter().map(|a| a.eavesdrop_accuracy).fold(f64::MAX, f64::min),
            full.noise_control.iter().map(|a| a.eavesdrop_accuracy).fold(f64::MIN, f64::max),
            dib_time.as_secs_f64() / 60.0
        ),
    ));

    // 2: the baseline trained at -5 dB leaks at 15 dB
    let at = |m: &experiment::ModelEvaluation, snr: f64| {
        m.record.attacks.iter().find(|a| a.snr_ae_db == snr).map(|a| a.eavesdrop_accuracy)
    };
    let full_dib = full.model(DIB_MODEL_ID).expect("dib evaluated");
    let (adv15, dib15) = (at(adv, 15.0).unwrap_or(f64::NAN), at(full_dib, 15.0).unwrap_or(f64::NAN));
    let baseline_time = baseline_training + full_evaluation.saturating_sub(dib_evaluation);
    verdicts.push(Verdict::new(
        2,
        "baseline gap at mismatched SNR",
        adv15 - dib15 >= 0.05 && baseline_time <= BASELINE_BUDGET,
        format!(
            "{baseline_id} at 15 dB {adv15:.3} vs DIB {dib15:.3}: gap {:.3} (≥ 0.05); {:.1} min",
            adv15 - dib15,
            baseline_time.as_secs_f64() / 60.0
        ),
    ));

    // 3: reconstructions keep the public content
    let threshold = 0.5 * full.constant_predictor_mse;
    verdicts.push(Verdict::new(
        3,
        "reconstruction sanity",
        dib.record.mse < threshold && dib.public_accuracy_on_reconstructions >= 0.85,
        format!(
            "MSE {:.4} at {} dB (< {threshold:.4}); digit accuracy on reconstructions {:.3} (≥ 0.85, clean {:.3})",
            dib.record.mse, full.snr_ab_db, dib.public_accuracy_on_reconstructions, full.public_accuracy_on_clean
        ),
    ));

    // 4: disentanglement probes, re-run on their own for the time budget
    let bundle = experiment::load_stage(&exp, Stage::Finetune)?;
    let splits = experiment::load_splits(&exp)?;
    let start = Instant::now();
    let p = probe_disentanglement(
        &bundle,
        &splits.train,
        &splits.test,
        &config.attack.probe,
        rng::derive(config.seed, "probes"),
    )?;
    let probe_time = start.elapsed();
    verdicts.push(Verdict::new(
        4,
        "disentanglement probes",
        p.private_from_y_s >= 0.8
            && p.private_from_y_t <= 0.2
            && p.public_from_y_t > p.public_from_y_s
            && probe_time <= PROBE_BUDGET,
        format!(
            "y_s→private {:.3} (≥ 0.8), y_t→private {:.3} (≤ 0.2), y_t→public {:.3} > y_s→public {:.3}; {:.0}s",
            p.private_from_y_s,
            p.private_from_y_t,
            p.public_from_y_t,
            p.public_from_y_s,
            probe_time.as_secs_f64()
        ),
    ));

    // 9: freeze / zero / schema contracts
    let stage1 = experiment::load_stage(&exp, Stage::Stage1)?;
    let stage2 = experiment::load_stage(&exp, Stage::Stage2)?;
    let frozen = stage1.checksum(ParamGroup::PrivateEncoder)? == stage2.checksum(ParamGroup::PrivateEncoder)?;
    let batch = splits.test.batch_tensor(&(0..64).collect::<Vec<_>>(), &Device::Cpu)?;
    let sent = bundle.transmitted(&batch)?;
    let m_t = bundle.architecture().m_t;
    let private = sent.narrow(1, m_t, sent.dim(1)? - m_t)?;
    let zeros = private.flatten_all()?.to_vec1::<f32>()?.iter().all(|&v| v == 0.0);
    let public_nonzero = sent.narrow(1, 0, m_t)?.abs()?.sum_all()?.to_scalar::<f32>()? > 0.0;
    let leaky = DESK_CONFIG.replacen("[train]\n", "[train]\nsnr_ae_db = 5.0\n", 1);
    let rejected = matches!(ExperimentConfig::from_toml(&leaky), Err(Error::Config(_)));
    verdicts.push(Verdict::new(
        9,
        "freeze/zero/schema contracts",
        frozen && zeros && public_nonzero && rejected,
        format!(
            "φ_s unchanged by stage 2: {frozen}; private positions exactly zero: {zeros}; \
             SNR_AE under [train] rejected: {rejected}"
        ),
    ));
    Ok(verdicts)
}

fn main() {
    let mut verdicts = invariant_criteria();
    match pipeline_criteria() {
        Ok(v) => verdicts.extend(v),
        Err(e) => {
            for (id, title) in [
                (1, "privacy at chance"),
                (2, "baseline gap at mismatched SNR"),
                (3, "reconstruction sanity"),
                (4, "disentanglement probes"),
                (9, "freeze/zero/schema contracts"),
            ] {
                verdicts.push(Verdict::new(id, title, false, format!("pipeline failed: {e}")));
            }
        }
    }
    verdicts.sort_by_key(|v| v.id);
    println!();
    for v in &verdicts {
        v.print();
    }
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!("{} criteria, {failed} failed", verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
