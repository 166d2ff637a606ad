//! Finite-difference verification of the hand-written gradients, plus the
//! closed-form check of the positive-term logit gradient.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{backward, forward_peer, forward_peer_cached, parameter_class, DualModel, ModelShape, ProbabilityRow};
use crate::error::{HailError, Result};
use crate::losses::{
    batch_objective, grad_med_pos_wrt_logit, loss_med_positive, med_positive_logit_grad, peer_total_with_flags,
    DistillMode, ObjectiveConfig, PeerDistributions, TruncationFlags, TruncationRule,
};
use crate::masking::{MaskedBatch, MaskedSample};

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero on
/// both sides compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;
pub const IDENTITY_FORMULA_TOL: f64 = 1e-8;
pub const IDENTITY_FD_TOL: f64 = 1e-5;
/// Init scale of the check models; wide enough that every path carries signal.
const CHECK_INIT_STD: f64 = 0.3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error per parameter class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Block and flat index of the worst scalar.
    pub worst: String,
}

/// Sum over peers of each peer's total, with every peer's distillation
/// weights and the truncation flags taken from `base`.
fn frozen_grand_total(
    model: &DualModel,
    batch: &MaskedBatch,
    base: &PeerDistributions,
    cfg: &ObjectiveConfig,
    flags: &TruncationFlags,
) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..model.peers() {
        let mut d = base.clone();
        d.rows[j] = forward_peer(model, j, batch)?;
        total += peer_total_with_flags(&d, cfg, j, flags)?;
    }
    Ok(total)
}

/// Compares backprop gradients of the grand total against central
/// differences for every scalar parameter.
pub fn finite_difference_check(model: &DualModel, batch: &MaskedBatch, cfg: &ObjectiveConfig, eps: f64) -> Result<Vec<ClassReport>> {
    let mut rows = Vec::new();
    let mut caches = Vec::new();
    for j in 0..model.peers() {
        let (r, c) = forward_peer_cached(model, j, batch, true)?;
        rows.push(r);
        caches.push(c);
    }
    let base = PeerDistributions::new(rows, batch.labels.clone())?;
    let out = batch_objective(&base, cfg, &|i| format!("coordinate {i}"))?;
    let mut grads = model.params.zeros_like();
    for (j, c) in caches.iter().enumerate() {
        backward(model, j, batch, c, &out.dlogits[j], &mut grads)?;
    }

    let mut probe = model.clone();
    let names: Vec<String> = model.params.blocks().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.blocks().into_iter().map(|(_, m)| m.data.clone()).collect();
    let mut reports: BTreeMap<String, ClassReport> = BTreeMap::new();
    for (b, name) in names.iter().enumerate() {
        for k in 0..analytic[b].len() {
            let original = probe.params.blocks()[b].1.data[k];
            let mut eval_at = |x: f64| -> Result<f64> {
                probe.params.blocks_mut()[b].1.data[k] = x;
                frozen_grand_total(&probe, batch, &base, cfg, &out.flags)
            };
            let plus = eval_at(original + eps)?;
            let minus = eval_at(original - eps)?;
            eval_at(original)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[b][k], numeric);
            let class = parameter_class(name).to_string();
            let entry = reports.entry(class.clone()).or_insert_with(|| ClassReport {
                class,
                max_rel_error: 0.0,
                checked: 0,
                worst: String::new(),
            });
            entry.checked += 1;
            if err > entry.max_rel_error || entry.worst.is_empty() {
                entry.max_rel_error = err;
                entry.worst = format!("{name}[{k}]");
            }
        }
    }
    Ok(reports.into_values().collect())
}

fn check_shape(layer_norm: bool) -> ModelShape {
    ModelShape {
        vocab_rows: 8 + 2,
        max_len: 3,
        d: 4,
        d_hidden: 8,
        layers: 1,
        heads: 2,
        peers: 2,
        layer_norm,
    }
}

/// Random batch of length-`len` sequences over `elements` ids with one or
/// two masked positions each (the last one is always masked in row 0).
fn check_batch(rng: &mut ChaCha8Rng, rows: usize, len: usize, elements: u32) -> Result<MaskedBatch> {
    let samples: Vec<MaskedSample> = (0..rows)
        .map(|r| {
            let seq: Vec<u32> = (0..len).map(|_| rng.random_range(1..=elements)).collect();
            let positions = if r == 0 {
                vec![len - 1]
            } else {
                let k = rng.random_range(1..=2.min(len));
                index::sample(rng, len, k).into_vec()
            };
            MaskedSample::with_positions(&seq, elements + 1, positions)
        })
        .collect();
    let refs: Vec<&MaskedSample> = samples.iter().collect();
    MaskedBatch::from_samples(&refs, len, 0)
}

/// Full-objective check on the small reference model (d = 4, one layer, two
/// heads, sequences of 3 over 8 elements) with and without layer norm.
pub fn finite_difference_suite(seed: u64, cfg: &ObjectiveConfig) -> Result<Vec<ClassReport>> {
    let mut merged: BTreeMap<String, ClassReport> = BTreeMap::new();
    for (i, layer_norm) in [false, true].into_iter().enumerate() {
        let shape = check_shape(layer_norm);
        let peer_seeds: Vec<u64> = (0..shape.peers as u64).map(|j| seed.wrapping_add(100 + j + 10 * i as u64)).collect();
        let model = DualModel::with_seeds(shape, seed.wrapping_add(i as u64), &peer_seeds, CHECK_INIT_STD)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed ^ i as u64);
        let batch = check_batch(&mut rng, 4, shape.max_len, shape.elements() as u32)?;
        for r in finite_difference_check(&model, &batch, cfg, FD_EPS)? {
            match merged.get_mut(&r.class) {
                Some(m) => {
                    m.checked += r.checked;
                    if r.max_rel_error > m.max_rel_error {
                        m.max_rel_error = r.max_rel_error;
                        m.worst = r.worst;
                    }
                }
                None => {
                    merged.insert(r.class.clone(), r);
                }
            }
        }
    }
    Ok(merged.into_values().collect())
}

/// Worst deviations of the positive-term logit gradient over random
/// single-coordinate instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub instances: usize,
    pub max_formula_error: f64,
    pub max_fd_error: f64,
}

/// Draws single-coordinate instances from a small two-peer model (|E| = 10,
/// d = 4) and compares the backprop gradient of the positive term in the
/// positive logit with (1 − q_*)(p_* − 1) and with central differences.
pub fn gradient_identity_suite(seed: u64, instances: usize) -> Result<IdentityReport> {
    let shape = ModelShape {
        vocab_rows: 10 + 2,
        max_len: 6,
        d: 4,
        d_hidden: 8,
        layers: 1,
        heads: 2,
        peers: 2,
        layer_norm: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = IdentityReport {
        instances,
        max_formula_error: 0.0,
        max_fd_error: 0.0,
    };
    let h = 1e-6;
    for _ in 0..instances {
        let peer_seeds = [rng.random(), rng.random()];
        let model = DualModel::with_seeds(shape, rng.random(), &peer_seeds, CHECK_INIT_STD)?;
        let len = rng.random_range(2..=shape.max_len);
        let prefix: Vec<u32> = (0..len - 1).map(|_| rng.random_range(1..=10)).collect();
        let label = rng.random_range(1..=10);
        let sample = MaskedSample::next_element(&prefix, label, 11, shape.max_len);
        let batch = MaskedBatch::from_samples(&[&sample], shape.max_len, 0)?;
        let p = forward_peer(&model, 0, &batch)?.remove(0);
        let q = forward_peer(&model, 1, &batch)?.remove(0);
        let q_star = q.probs[label as usize];

        let g = med_positive_logit_grad(&p, q_star, label)[label as usize];
        let closed = grad_med_pos_wrt_logit(p.probs[label as usize], q_star);
        report.max_formula_error = report.max_formula_error.max((g - closed).abs());

        let keep = TruncationFlags::keep_all(1);
        let at = |delta: f64| -> Result<f64> {
            let mut z = p.logits.clone();
            z[label as usize] += delta;
            loss_med_positive(&[ProbabilityRow::from_logits(z)], &[q.clone()], &[label], &keep)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        report.max_fd_error = report.max_fd_error.max((g - fd).abs());
    }
    Ok(report)
}

/// Outcome of both suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub classes: Vec<ClassReport>,
    pub identity: IdentityReport,
    pub passed: bool,
}

/// Reference settings: α = 0.5, β = 0.2, MED.
pub fn reference_objective() -> ObjectiveConfig {
    ObjectiveConfig {
        alpha: 0.5,
        beta: 0.2,
        mode: DistillMode::Med,
        rule: TruncationRule::Any,
    }
}

pub fn run_all(seed: u64) -> Result<GradcheckSummary> {
    let classes = finite_difference_suite(seed, &reference_objective())?;
    let identity = gradient_identity_suite(seed, 200)?;
    if classes.is_empty() {
        return Err(HailError::contract("no parameters checked"));
    }
    let passed = classes.iter().all(|c| c.max_rel_error <= FD_TOLERANCE)
        && identity.max_formula_error <= IDENTITY_FORMULA_TOL
        && identity.max_fd_error <= IDENTITY_FD_TOL;
    Ok(GradcheckSummary {
        classes,
        identity,
        passed,
    })
}
