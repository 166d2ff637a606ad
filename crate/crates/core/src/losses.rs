//! Training objectives: self-knowledge cross-entropy, mutual exclusivity
//! distillation (MED) over positive and negative samples, denoising
//! truncation, the α balance, the T-peer generalization and the mimic
//! ablation.
//!
//! Peer probabilities that act as weights are plain inputs here, so no
//! gradient ever flows into a peer through another peer's loss.

use serde::{Deserialize, Serialize};

use crate::encoder::math::softmax_backward;
use crate::encoder::ProbabilityRow;
use crate::error::{HailError, Result};

/// Floor applied to p and 1 − p before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    /// Weights 1 − p_peer on the positive, p_peer on negatives.
    Med,
    /// Weights p_peer on the positive, 1 − p_peer on negatives.
    Mimic,
    /// Self-knowledge only.
    None,
}

impl std::str::FromStr for DistillMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "med" => Ok(DistillMode::Med),
            "mimic" => Ok(DistillMode::Mimic),
            "none" => Ok(DistillMode::None),
            other => Err(format!("unknown distill mode `{other}` (expected med, mimic or none)")),
        }
    }
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistillMode::Med => "med",
            DistillMode::Mimic => "mimic",
            DistillMode::None => "none",
        })
    }
}

/// How per-peer top-β sets combine into one drop decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationRule {
    /// Drop if the coordinate is in the top-β losses of any peer.
    Any,
    /// Drop only if it is in the top-β losses of every peer.
    All,
}

impl std::str::FromStr for TruncationRule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "any" => Ok(TruncationRule::Any),
            "all" => Ok(TruncationRule::All),
            other => Err(format!("unknown truncation rule `{other}` (expected any or all)")),
        }
    }
}

impl std::fmt::Display for TruncationRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TruncationRule::Any => "any",
            TruncationRule::All => "all",
        })
    }
}

/// Probability rows of every peer, aligned with one label list.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerDistributions {
    pub rows: Vec<Vec<ProbabilityRow>>,
    pub labels: Vec<u32>,
}

impl PeerDistributions {
    pub fn new(rows: Vec<Vec<ProbabilityRow>>, labels: Vec<u32>) -> Result<Self> {
        if rows.iter().any(|r| r.len() != labels.len()) {
            return Err(HailError::contract("peer rows misaligned with labels"));
        }
        if labels.is_empty() {
            return Err(HailError::contract("empty mask set"));
        }
        Ok(PeerDistributions { rows, labels })
    }

    pub fn peers(&self) -> usize {
        self.rows.len()
    }

    pub fn coords(&self) -> usize {
        self.labels.len()
    }
}

/// Which masked coordinates keep their MED terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationFlags {
    pub keep: Vec<bool>,
    pub beta: f64,
    /// ⌈β·S_L⌉: how many top-loss coordinates each peer nominates.
    pub per_peer: usize,
}

impl TruncationFlags {
    pub fn keep_all(n: usize) -> Self {
        TruncationFlags {
            keep: vec![true; n],
            beta: 0.0,
            per_peer: 0,
        }
    }

    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// d(−ln max(p, floor))/dp.
fn neg_log_grad(p: f64) -> f64 {
    if p > PROB_FLOOR {
        -1.0 / p
    } else {
        0.0
    }
}

fn check_rows(rows: &[ProbabilityRow], labels: &[u32]) -> Result<()> {
    if rows.len() != labels.len() {
        return Err(HailError::contract(format!("{} rows for {} labels", rows.len(), labels.len())));
    }
    if rows.is_empty() {
        return Err(HailError::contract("empty mask set"));
    }
    for (r, &l) in rows.iter().zip(labels) {
        if l == 0 || l as usize >= r.probs.len().saturating_sub(1) {
            return Err(HailError::contract(format!("label {l} is not a real element id")));
        }
    }
    Ok(())
}

fn check_flags(flags: &TruncationFlags, n: usize) -> Result<()> {
    if flags.keep.len() != n {
        return Err(HailError::contract(format!(
            "truncation flags cover {} coordinates, batch has {n}",
            flags.keep.len()
        )));
    }
    Ok(())
}

/// Real element ids of a row other than the positive: 1..=|E| without `label`.
fn negatives(row_len: usize, label: u32) -> impl Iterator<Item = usize> {
    (1..row_len - 1).filter(move |&k| k != label as usize)
}

/// Mean −ln p_* over the masked coordinates, plus the per-coordinate values.
pub fn loss_self_knowledge(rows: &[ProbabilityRow], labels: &[u32]) -> Result<(f64, Vec<f64>)> {
    check_rows(rows, labels)?;
    let per: Vec<f64> = rows.iter().zip(labels).map(|(r, &l)| neg_log(r.probs[l as usize])).collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

/// −(1/|I|) Σ_kept (1 − p_peer,*) ln p_self,*.
pub fn loss_med_positive(
    self_rows: &[ProbabilityRow],
    peer_rows: &[ProbabilityRow],
    labels: &[u32],
    flags: &TruncationFlags,
) -> Result<f64> {
    check_rows(self_rows, labels)?;
    check_rows(peer_rows, labels)?;
    check_flags(flags, labels.len())?;
    let mut sum = 0.0;
    for i in 0..labels.len() {
        if flags.keep[i] {
            let l = labels[i] as usize;
            sum += (1.0 - peer_rows[i].probs[l]) * neg_log(self_rows[i].probs[l]);
        }
    }
    Ok(sum / labels.len() as f64)
}

/// −(1/|I|) Σ_kept Σ_{k≠*} p_peer,k ln(1 − p_self,k), k over real elements.
pub fn loss_med_negative(
    self_rows: &[ProbabilityRow],
    peer_rows: &[ProbabilityRow],
    labels: &[u32],
    flags: &TruncationFlags,
) -> Result<f64> {
    check_rows(self_rows, labels)?;
    check_rows(peer_rows, labels)?;
    check_flags(flags, labels.len())?;
    let mut sum = 0.0;
    for i in 0..labels.len() {
        if flags.keep[i] {
            let (s, p) = (&self_rows[i].probs, &peer_rows[i].probs);
            let mut neg_i = 0.0;
            for k in negatives(s.len(), labels[i]) {
                neg_i += p[k] * neg_log(1.0 - s[k]);
            }
            sum += neg_i;
        }
    }
    Ok(sum / labels.len() as f64)
}

/// Mimic-learning ablation: positive weight p_peer,* and negative weights
/// 1 − p_peer,k. Returns (pos, neg).
pub fn loss_mimic(
    self_rows: &[ProbabilityRow],
    peer_rows: &[ProbabilityRow],
    labels: &[u32],
    flags: &TruncationFlags,
) -> Result<(f64, f64)> {
    check_rows(self_rows, labels)?;
    check_rows(peer_rows, labels)?;
    check_flags(flags, labels.len())?;
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..labels.len() {
        if !flags.keep[i] {
            continue;
        }
        let (s, p) = (&self_rows[i].probs, &peer_rows[i].probs);
        let l = labels[i] as usize;
        pos += p[l] * neg_log(s[l]);
        for k in negatives(s.len(), labels[i]) {
            neg += (1.0 - p[k]) * neg_log(1.0 - s[k]);
        }
    }
    let n = labels.len() as f64;
    Ok((pos / n, neg / n))
}

/// T-peer MED for peer `j`: each term sums the other T − 1 peers' weights
/// with a 1/(T − 1) rescaling, then averages over masked coordinates.
pub fn med_multi_peer(dists: &PeerDistributions, flags: &TruncationFlags, j: usize) -> Result<(f64, f64)> {
    let t = dists.peers();
    if t < 2 {
        return Err(HailError::contract(format!("MED needs at least 2 peers, got {t}")));
    }
    if j >= t {
        return Err(HailError::contract(format!("peer index {j} out of range")));
    }
    for rows in &dists.rows {
        check_rows(rows, &dists.labels)?;
    }
    check_flags(flags, dists.coords())?;
    let rescale = 1.0 / (t - 1) as f64;
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..dists.coords() {
        if !flags.keep[i] {
            continue;
        }
        let s = &dists.rows[j][i].probs;
        let l = dists.labels[i] as usize;
        let mut pos_i = 0.0;
        let mut neg_i = 0.0;
        for c in (0..t).filter(|&c| c != j) {
            let p = &dists.rows[c][i].probs;
            pos_i += (1.0 - p[l]) * neg_log(s[l]);
            for k in negatives(s.len(), dists.labels[i]) {
                neg_i += p[k] * neg_log(1.0 - s[k]);
            }
        }
        pos += rescale * pos_i;
        neg += rescale * neg_i;
    }
    let n = dists.coords() as f64;
    Ok((pos / n, neg / n))
}

/// Drops the MED terms of coordinates whose SK loss ranks (0-based,
/// descending, ties by coordinate index) below ⌈β·S_L⌉ for any peer (or
/// for all peers under [`TruncationRule::All`]).
pub fn denoise_truncation(per_peer_sk: &[Vec<f64>], beta: f64, rule: TruncationRule) -> Result<TruncationFlags> {
    if !(0.0..1.0).contains(&beta) {
        return Err(HailError::contract(format!("beta must be in [0,1), got {beta}")));
    }
    let n = per_peer_sk.first().map_or(0, Vec::len);
    if per_peer_sk.iter().any(|v| v.len() != n) {
        return Err(HailError::contract("per-peer SK loss lists differ in length"));
    }
    // Guard against products like 0.07·100 = 7.000000000000001.
    let per_peer = ((beta * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut votes = vec![0usize; n];
    if per_peer > 0 {
        for losses in per_peer_sk {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
            for &i in order.iter().take(per_peer) {
                votes[i] += 1;
            }
        }
    }
    let peers = per_peer_sk.len();
    let keep = votes
        .iter()
        .map(|&v| match rule {
            TruncationRule::Any => v == 0,
            TruncationRule::All => v < peers || peers == 0,
        })
        .collect();
    Ok(TruncationFlags { keep, beta, per_peer })
}

/// Loss values of one peer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PeerLoss {
    pub sk: f64,
    pub med_pos: f64,
    pub med_neg: f64,
    pub total: f64,
    pub truncated_count: usize,
}

/// Per-peer losses of one batch and their sum.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub peers: Vec<PeerLoss>,
    pub grand_total: f64,
}

/// α·L_SK + (1 − α)·(L_pos + L_neg) per peer, summed over peers.
pub fn combine_total(parts: &[(f64, f64, f64)], alpha: f64, truncated: usize) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(HailError::contract(format!("alpha must be in [0,1], got {alpha}")));
    }
    let peers: Vec<PeerLoss> = parts
        .iter()
        .map(|&(sk, med_pos, med_neg)| PeerLoss {
            sk,
            med_pos,
            med_neg,
            total: alpha * sk + (1.0 - alpha) * (med_pos + med_neg),
            truncated_count: truncated,
        })
        .collect();
    let grand_total = peers.iter().map(|p| p.total).sum();
    Ok(LossBreakdown { peers, grand_total })
}

/// Closed-form ∂L_pos/∂z_* for one coordinate: (1 − p_peer,*)(p_self,* − 1).
pub fn grad_med_pos_wrt_logit(p_self: f64, p_peer: f64) -> f64 {
    (1.0 - p_peer) * (p_self - 1.0)
}

/// Settings of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mode: DistillMode,
    pub rule: TruncationRule,
}

/// Everything one training step needs from the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub breakdown: LossBreakdown,
    pub flags: TruncationFlags,
    /// ∂(grand total)/∂z per peer, per coordinate, over all vocabulary rows.
    pub dlogits: Vec<Vec<Vec<f64>>>,
}

/// Distillation weights that peer `j` applies at coordinate `i`:
/// (positive weight, weights over the whole row for negatives).
fn distill_weights(dists: &PeerDistributions, mode: DistillMode, j: usize, i: usize) -> (f64, Vec<f64>) {
    let t = dists.peers();
    let l = dists.labels[i] as usize;
    let width = dists.rows[j][i].probs.len();
    let rescale = 1.0 / (t - 1) as f64;
    let mut pos = 0.0;
    let mut neg = vec![0.0; width];
    for c in (0..t).filter(|&c| c != j) {
        let p = &dists.rows[c][i].probs;
        match mode {
            DistillMode::Med => {
                pos += 1.0 - p[l];
                for k in negatives(width, dists.labels[i]) {
                    neg[k] += p[k];
                }
            }
            DistillMode::Mimic => {
                pos += p[l];
                for k in negatives(width, dists.labels[i]) {
                    neg[k] += 1.0 - p[k];
                }
            }
            DistillMode::None => {}
        }
    }
    if t > 2 {
        pos *= rescale;
        neg.iter_mut().for_each(|w| *w *= rescale);
    }
    (pos, neg)
}

/// Loss terms (SK, positive, negative) of peer `j` and the logit gradients
/// of its weighted total, with the truncation flags given.
fn peer_terms(
    dists: &PeerDistributions,
    cfg: &ObjectiveConfig,
    j: usize,
    flags: &TruncationFlags,
    sk_j: &[f64],
) -> ((f64, f64, f64), Vec<Vec<f64>>) {
    let n = dists.coords();
    let distill = cfg.mode != DistillMode::None;
    let (sk_weight, med_weight) = if distill { (cfg.alpha, 1.0 - cfg.alpha) } else { (1.0, 0.0) };
    let inv_n = 1.0 / n as f64;
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let probs = &dists.rows[j][i].probs;
        let l = dists.labels[i] as usize;
        let mut dp = vec![0.0; probs.len()];
        let c_sk = sk_weight * inv_n;
        if distill {
            let (w_pos, w_neg) = distill_weights(dists, cfg.mode, j, i);
            let keep = flags.keep[i];
            if keep {
                pos_sum += w_pos * sk_j[i];
                for k in negatives(probs.len(), dists.labels[i]) {
                    neg_sum += w_neg[k] * neg_log(1.0 - probs[k]);
                }
            }
            let c_med = if keep { med_weight * inv_n } else { 0.0 };
            dp[l] = (c_sk + c_med * w_pos) * neg_log_grad(probs[l]);
            for k in negatives(probs.len(), dists.labels[i]) {
                let q = 1.0 - probs[k];
                // d(−ln(1 − p))/dp = 1/(1 − p)
                dp[k] = if q > PROB_FLOOR { c_med * w_neg[k] / q } else { 0.0 };
            }
        } else {
            dp[l] = c_sk * neg_log_grad(probs[l]);
        }
        grads.push(softmax_backward(probs, &dp));
    }
    let sk = sk_j.iter().sum::<f64>() * inv_n;
    ((sk, pos_sum * inv_n, neg_sum * inv_n), grads)
}

/// Total loss of peer `j` with fixed truncation flags. The other peers' rows
/// only act as weights, which makes this the function whose derivative in
/// peer `j`'s logits [`batch_objective`] returns.
pub fn peer_total_with_flags(
    dists: &PeerDistributions,
    cfg: &ObjectiveConfig,
    j: usize,
    flags: &TruncationFlags,
) -> Result<f64> {
    if j >= dists.peers() {
        return Err(HailError::contract(format!("peer index {j} out of range")));
    }
    check_rows(&dists.rows[j], &dists.labels)?;
    check_flags(flags, dists.coords())?;
    let sk_j: Vec<f64> = dists.rows[j]
        .iter()
        .zip(&dists.labels)
        .map(|(r, &l)| neg_log(r.probs[l as usize]))
        .collect();
    let ((sk, pos, neg), _) = peer_terms(dists, cfg, j, flags, &sk_j);
    Ok(match cfg.mode {
        DistillMode::None => sk,
        _ => cfg.alpha * sk + (1.0 - cfg.alpha) * (pos + neg),
    })
}

/// dL/dz of the positive MED term alone for one coordinate:
/// L = −(1 − q_*) ln p_*, with q the peer's probabilities.
pub fn med_positive_logit_grad(self_row: &ProbabilityRow, q_star: f64, label: u32) -> Vec<f64> {
    let p = &self_row.probs;
    let mut dp = vec![0.0; p.len()];
    dp[label as usize] = (1.0 - q_star) * neg_log_grad(p[label as usize]);
    softmax_backward(p, &dp)
}

/// Computes the grand total of a batch together with its logit gradients.
/// `coord_names` labels coordinates in numeric-fault diagnostics.
pub fn batch_objective(
    dists: &PeerDistributions,
    cfg: &ObjectiveConfig,
    coord_names: &dyn Fn(usize) -> String,
) -> Result<ObjectiveOutput> {
    let t = dists.peers();
    let n = dists.coords();
    if t < 1 {
        return Err(HailError::contract("no peers"));
    }
    for rows in &dists.rows {
        check_rows(rows, &dists.labels)?;
    }
    let distill = cfg.mode != DistillMode::None;
    if distill && t < 2 {
        return Err(HailError::contract("distillation needs at least 2 peers"));
    }

    let sk_per: Vec<Vec<f64>> = dists
        .rows
        .iter()
        .map(|rows| rows.iter().zip(&dists.labels).map(|(r, &l)| neg_log(r.probs[l as usize])).collect())
        .collect();

    let mut faults = Vec::new();
    for (j, per) in sk_per.iter().enumerate() {
        for (i, v) in per.iter().enumerate() {
            if !v.is_finite() || dists.rows[j][i].probs.iter().any(|p| !p.is_finite()) {
                faults.push(format!(
                    "peer {j} {} label {} p*={}",
                    coord_names(i),
                    dists.labels[i],
                    dists.rows[j][i].probs[dists.labels[i] as usize]
                ));
            }
        }
    }
    if !faults.is_empty() {
        return Err(HailError::Numeric(format!("non-finite loss at: {}", faults.join("; "))));
    }

    let flags = if distill {
        denoise_truncation(&sk_per, cfg.beta, cfg.rule)?
    } else {
        TruncationFlags::keep_all(n)
    };

    let mut parts = Vec::with_capacity(t);
    let mut dlogits = Vec::with_capacity(t);
    for j in 0..t {
        let (terms, grads) = peer_terms(dists, cfg, j, &flags, &sk_per[j]);
        parts.push(terms);
        dlogits.push(grads);
    }

    let breakdown = if distill {
        combine_total(&parts, cfg.alpha, flags.dropped())?
    } else {
        let peers = parts
            .iter()
            .map(|&(sk, _, _)| PeerLoss {
                sk,
                total: sk,
                ..PeerLoss::default()
            })
            .collect::<Vec<_>>();
        let grand_total = peers.iter().map(|p| p.total).sum();
        LossBreakdown { peers, grand_total }
    };
    if !breakdown.grand_total.is_finite() {
        return Err(HailError::Numeric(format!("non-finite grand total {}", breakdown.grand_total)));
    }
    Ok(ObjectiveOutput {
        breakdown,
        flags,
        dlogits,
    })
}
