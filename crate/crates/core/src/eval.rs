//! Sampled-negative ranking evaluation, the popularity baseline and the
//! cross-peer response-consistency diagnostic.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionSequence, SplitKind, SplitSet};
use crate::encoder::{forward_peer, DualModel};
use crate::error::{HailError, Result};
use crate::losses::PROB_FLOOR;
use crate::masking::{MaskedBatch, MaskedSample};
use crate::seed::{rng_for, Stream};

pub const DEFAULT_NEGATIVES: usize = 99;

/// How evaluation negatives are drawn from the non-interacted elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSampling {
    #[default]
    Uniform,
    /// Proportional to 1 + train count.
    Popularity,
}

impl std::str::FromStr for NegativeSampling {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(NegativeSampling::Uniform),
            "popularity" => Ok(NegativeSampling::Popularity),
            other => Err(format!("unknown negative sampling `{other}` (expected uniform or popularity)")),
        }
    }
}

impl std::fmt::Display for NegativeSampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NegativeSampling::Uniform => "uniform",
            NegativeSampling::Popularity => "popularity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub negatives: usize,
    pub sampling: NegativeSampling,
    pub seed: u64,
    pub max_len: usize,
    /// Cases forwarded together.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            negatives: DEFAULT_NEGATIVES,
            sampling: NegativeSampling::Uniform,
            seed: 0,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            batch_size: 256,
        }
    }
}

/// Draws `n` distinct negatives from the real ids 1..=elements that are not
/// in `history`. With too few such elements, falls back to everything but
/// the target. `weights` (indexed by id) switches to weighted sampling.
pub fn sample_eval_negatives<R: Rng + ?Sized>(
    history: &BTreeSet<u32>,
    target: u32,
    elements: usize,
    n: usize,
    weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let mut pool: Vec<u32> = (1..=elements as u32).filter(|e| !history.contains(e) && *e != target).collect();
    if pool.len() < n {
        warn!(
            "only {} non-interacted elements for target {target}; sampling negatives from all elements but the target",
            pool.len()
        );
        pool = (1..=elements as u32).filter(|&e| e != target).collect();
        if pool.len() < n {
            return Err(HailError::contract(format!(
                "cannot draw {n} negatives from {} elements",
                pool.len()
            )));
        }
    }
    let picked = match weights {
        None => index::sample(rng, pool.len(), n).into_vec(),
        Some(w) => index::sample_weighted(rng, pool.len(), |i| w[pool[i] as usize], n)
            .map_err(|e| HailError::contract(format!("weighted negative sampling failed: {e}")))?
            .into_vec(),
    };
    Ok(picked.into_iter().map(|i| pool[i]).collect())
}

/// One evaluated target with its candidate list (target first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedCase {
    pub generator: u32,
    pub target: u32,
    pub candidates: Vec<u32>,
    /// 1-based; ties with the target count against it.
    pub target_rank: usize,
}

impl RankedCase {
    pub fn hit(&self, k: usize) -> f64 {
        if self.target_rank <= k {
            1.0
        } else {
            0.0
        }
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        if self.target_rank <= k {
            1.0 / (1.0 + self.target_rank as f64).log2()
        } else {
            0.0
        }
    }

    pub fn reciprocal_rank(&self) -> f64 {
        1.0 / self.target_rank as f64
    }
}

/// Ranks `target` among `candidates` by `scores` (indexed by element id).
pub fn score_ranking(scores: &[f64], generator: u32, target: u32, candidates: &[u32]) -> Result<RankedCase> {
    let present = candidates.iter().filter(|&&c| c == target).count();
    if present != 1 {
        return Err(HailError::contract(format!(
            "target {target} appears {present} times among the candidates"
        )));
    }
    let score = |id: u32| {
        scores
            .get(id as usize)
            .copied()
            .ok_or_else(|| HailError::Index(format!("candidate {id} has no score")))
    };
    let t = score(target)?;
    let mut ahead = 0;
    for &c in candidates.iter().filter(|&&c| c != target) {
        if score(c)? >= t {
            ahead += 1;
        }
    }
    Ok(RankedCase {
        generator,
        target,
        candidates: candidates.to_vec(),
        target_rank: ahead + 1,
    })
}

/// Metrics averaged over cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "hr@1")]
    pub hr_1: f64,
    #[serde(rename = "hr@5")]
    pub hr_5: f64,
    #[serde(rename = "hr@10")]
    pub hr_10: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg_5: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: f64,
    pub mrr: f64,
    pub n_cases: usize,
}

impl EvalReport {
    pub fn from_cases(cases: &[RankedCase]) -> Result<Self> {
        if cases.is_empty() {
            return Err(HailError::contract("no evaluation cases"));
        }
        let n = cases.len() as f64;
        let mean = |f: &dyn Fn(&RankedCase) -> f64| cases.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            hr_1: mean(&|c| c.hit(1)),
            hr_5: mean(&|c| c.hit(5)),
            hr_10: mean(&|c| c.hit(10)),
            ndcg_5: mean(&|c| c.ndcg(5)),
            ndcg_10: mean(&|c| c.ndcg(10)),
            mrr: mean(&|c| c.reciprocal_rank()),
            n_cases: cases.len(),
        })
    }

    /// HR@1 doubles as NDCG@1.
    pub fn ndcg_1(&self) -> f64 {
        self.hr_1
    }
}

/// A target, its model input (last position masked) and candidates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub generator: u32,
    pub target: u32,
    pub sample: MaskedSample,
    pub candidates: Vec<u32>,
}

/// Train-split element counts indexed by id.
pub fn train_counts(train: &[InteractionSequence], table_rows: usize) -> Vec<f64> {
    let mut counts = vec![0.0; table_rows];
    for s in train {
        for &e in &s.elements {
            if let Some(c) = counts.get_mut(e as usize) {
                *c += 1.0;
            }
        }
    }
    counts
}

fn split_tag(kind: SplitKind) -> u8 {
    match kind {
        SplitKind::Valid => 0,
        SplitKind::Test => 1,
    }
}

/// Builds one case per generator with a target of `kind`.
pub fn eval_cases(split: &SplitSet, kind: SplitKind, elements: usize, cfg: &EvalConfig) -> Result<Vec<EvalCase>> {
    let targets = split.targets(kind);
    if targets.is_empty() {
        return Err(HailError::contract(format!("{kind:?} split has no targets")));
    }
    let mask_id = elements as u32 + 1;
    let histories = split.histories();
    let weights = match cfg.sampling {
        NegativeSampling::Uniform => None,
        NegativeSampling::Popularity => {
            Some(train_counts(&split.train, elements + 2).iter().map(|c| c + 1.0).collect::<Vec<_>>())
        }
    };
    let empty = BTreeSet::new();
    let mut cases = Vec::with_capacity(targets.len());
    for (&generator, &target) in targets {
        let prefix = split
            .eval_prefix(generator, kind)
            .ok_or_else(|| HailError::contract(format!("generator {generator} has no evaluation context")))?;
        let mut rng = rng_for(cfg.seed, Stream::EvalNegatives { split: split_tag(kind), generator });
        let history = histories.get(&generator).unwrap_or(&empty);
        let negatives = sample_eval_negatives(history, target, elements, cfg.negatives, weights.as_deref(), &mut rng)?;
        let mut candidates = Vec::with_capacity(negatives.len() + 1);
        candidates.push(target);
        candidates.extend(negatives);
        cases.push(EvalCase {
            generator,
            target,
            sample: MaskedSample::next_element(&prefix, target, mask_id, cfg.max_len),
            candidates,
        });
    }
    Ok(cases)
}

/// Full probability rows of one peer for each case, in case order.
pub fn case_probabilities(model: &DualModel, peer: usize, cases: &[EvalCase], cfg: &EvalConfig) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&MaskedSample> = chunk.iter().map(|c| &c.sample).collect();
        let batch = MaskedBatch::from_samples(&refs, cfg.max_len, 0)?;
        out.extend(forward_peer(model, peer, &batch)?.into_iter().map(|r| r.probs));
    }
    Ok(out)
}

/// Ranks every case with a model peer.
pub fn rank_cases(model: &DualModel, peer: usize, cases: &[EvalCase], cfg: &EvalConfig) -> Result<Vec<RankedCase>> {
    let probs = case_probabilities(model, peer, cases, cfg)?;
    cases
        .iter()
        .zip(&probs)
        .map(|(c, p)| score_ranking(p, c.generator, c.target, &c.candidates))
        .collect()
}

pub fn evaluate_split(
    model: &DualModel,
    peer: usize,
    split: &SplitSet,
    kind: SplitKind,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let cases = eval_cases(split, kind, model.shape.elements(), cfg)?;
    EvalReport::from_cases(&rank_cases(model, peer, &cases, cfg)?)
}

/// Scores elements by how often they occur in the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct PopScorer {
    pub counts: Vec<f64>,
}

pub fn pop_baseline(train: &[InteractionSequence], table_rows: usize) -> Result<PopScorer> {
    if train.iter().all(|s| s.elements.is_empty()) {
        return Err(HailError::contract("train split is empty"));
    }
    Ok(PopScorer {
        counts: train_counts(train, table_rows),
    })
}

impl PopScorer {
    pub fn rank_cases(&self, cases: &[EvalCase]) -> Result<Vec<RankedCase>> {
        cases
            .iter()
            .map(|c| score_ranking(&self.counts, c.generator, c.target, &c.candidates))
            .collect()
    }
}

/// Per-case correctness and negative log-likelihood of every peer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub inconsistent_fraction: f64,
    pub n_cases: usize,
    pub generators: Vec<u32>,
    /// `correct[case][peer]`: the target ranks first among the candidates.
    pub correct: Vec<Vec<bool>>,
    /// `nll[case][peer]`: −ln p_target.
    pub nll: Vec<Vec<f64>>,
}

/// Fraction of cases where peers disagree on correctness.
pub fn inconsistent_fraction(correct: &[Vec<bool>]) -> f64 {
    if correct.is_empty() {
        return 0.0;
    }
    let disagree = correct
        .iter()
        .filter(|row| row.iter().any(|&c| c != row[0]))
        .count();
    disagree as f64 / correct.len() as f64
}

pub fn response_consistency_report(
    model: &DualModel,
    split: &SplitSet,
    kind: SplitKind,
    cfg: &EvalConfig,
) -> Result<ConsistencyReport> {
    if model.peers() < 2 {
        return Err(HailError::contract("consistency needs at least 2 peers"));
    }
    let cases = eval_cases(split, kind, model.shape.elements(), cfg)?;
    let mut correct = vec![Vec::with_capacity(model.peers()); cases.len()];
    let mut nll = vec![Vec::with_capacity(model.peers()); cases.len()];
    for peer in 0..model.peers() {
        let probs = case_probabilities(model, peer, &cases, cfg)?;
        for (i, (c, p)) in cases.iter().zip(&probs).enumerate() {
            let ranked = score_ranking(p, c.generator, c.target, &c.candidates)?;
            correct[i].push(ranked.target_rank == 1);
            nll[i].push(-p[c.target as usize].max(PROB_FLOOR).ln());
        }
    }
    Ok(ConsistencyReport {
        inconsistent_fraction: inconsistent_fraction(&correct),
        n_cases: cases.len(),
        generators: cases.iter().map(|c| c.generator).collect(),
        correct,
        nll,
    })
}

impl ConsistencyReport {
    /// Rows are cases, columns peers, values negative log-likelihoods.
    pub fn nll_csv(&self) -> String {
        let peers = self.nll.first().map_or(0, Vec::len);
        let mut out = String::from("generator");
        for j in 0..peers {
            let _ = write!(out, ",peer{j}");
        }
        out.push('\n');
        for (g, row) in self.generators.iter().zip(&self.nll) {
            let _ = write!(out, "{g}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelShape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn case_at_rank(rank: usize) -> RankedCase {
        RankedCase {
            generator: 0,
            target: 1,
            candidates: vec![1],
            target_rank: rank,
        }
    }

    #[test]
    fn forced_negative_set() {
        let history: BTreeSet<u32> = [7].into();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut negs = sample_eval_negatives(&history, 7, 100, 99, None, &mut rng).unwrap();
        negs.sort_unstable();
        let expected: Vec<u32> = (1..=100).filter(|&e| e != 7).collect();
        assert_eq!(negs, expected);
    }

    #[test]
    fn negatives_avoid_history_and_repeat_per_seed() {
        let history: BTreeSet<u32> = (1..=50).map(|i| i * 4).collect();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            sample_eval_negatives(&history, 4, 200, 99, None, &mut rng).unwrap()
        };
        let a = draw();
        assert_eq!(a, draw());
        assert_eq!(a.len(), 99);
        assert!(a.iter().all(|e| !history.contains(e)));
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 99);
    }

    #[test]
    fn negatives_fall_back_when_history_is_large() {
        let history: BTreeSet<u32> = (1..=60).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let negs = sample_eval_negatives(&history, 3, 100, 99, None, &mut rng).unwrap();
        assert_eq!(negs.len(), 99);
        assert!(!negs.contains(&3));
        assert!(sample_eval_negatives(&history, 3, 50, 99, None, &mut rng).is_err());
    }

    #[test]
    fn weighted_negatives_prefer_heavy_elements() {
        let mut w = vec![1.0; 12];
        w[5] = 1e6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let negs = sample_eval_negatives(&BTreeSet::new(), 1, 10, 1, Some(&w), &mut rng).unwrap();
        assert_eq!(negs, vec![5]);
    }

    #[test]
    fn rank_examples() {
        let c = case_at_rank(1);
        assert_eq!((c.hit(1), c.ndcg(5), c.reciprocal_rank()), (1.0, 1.0, 1.0));
        let c = case_at_rank(3);
        assert_eq!((c.hit(1), c.hit(5)), (0.0, 1.0));
        assert_eq!(c.ndcg(5), 0.5);
        assert_eq!(c.reciprocal_rank(), 1.0 / 3.0);
        let c = case_at_rank(11);
        assert_eq!((c.hit(10), c.ndcg(10), c.reciprocal_rank()), (0.0, 0.0, 1.0 / 11.0));
    }

    #[test]
    fn score_ranking_counts_ties_against_target() {
        let scores = [0.0, 0.5, 0.5, 0.9, 0.1];
        let r = score_ranking(&scores, 0, 1, &[1, 2, 3, 4]).unwrap();
        assert_eq!(r.target_rank, 3);
        assert!(score_ranking(&scores, 0, 1, &[2, 3]).is_err());
        assert!(score_ranking(&scores, 0, 1, &[1, 1, 2]).is_err());
        assert!(matches!(score_ranking(&scores, 0, 1, &[1, 9]), Err(HailError::Index(_))));
    }

    #[test]
    fn report_metrics_and_guards() {
        let cases: Vec<RankedCase> = [1, 3, 7, 20].into_iter().map(case_at_rank).collect();
        let r = EvalReport::from_cases(&cases).unwrap();
        assert_eq!(r.hr_1, 0.25);
        assert_eq!(r.hr_5, 0.5);
        assert_eq!(r.hr_10, 0.75);
        assert_eq!(r.ndcg_1(), r.hr_1);
        assert!(r.mrr >= r.hr_1);
        assert!(EvalReport::from_cases(&[]).is_err());
        let json = serde_json::to_value(r).unwrap();
        assert!(json.get("hr@10").is_some() && json.get("ndcg@5").is_some());
    }

    #[test]
    fn pop_orders_by_count() {
        let train = vec![InteractionSequence {
            generator: 0,
            elements: vec![2, 2, 2, 3, 2, 3, 3, 2, 2, 2, 2, 2, 3],
        }];
        let pop = pop_baseline(&train, 6).unwrap();
        assert_eq!(pop.counts[2], 9.0);
        let r = score_ranking(&pop.counts, 0, 2, &[2, 3, 4]).unwrap();
        assert_eq!(r.target_rank, 1);
        let r = score_ranking(&pop.counts, 0, 4, &[2, 3, 4]).unwrap();
        assert_eq!(r.target_rank, 3);
        assert!(pop_baseline(&[], 6).is_err());
    }

    #[test]
    fn inconsistency_extremes() {
        assert_eq!(inconsistent_fraction(&[vec![true, true], vec![false, false]]), 0.0);
        assert_eq!(inconsistent_fraction(&[vec![true, false], vec![false, true]]), 1.0);
    }

    fn tiny_split() -> SplitSet {
        let seqs: Vec<InteractionSequence> = (0..6)
            .map(|g| InteractionSequence {
                generator: g,
                elements: (0..8).map(|i| 1 + (g + i) % 30).collect(),
            })
            .collect();
        crate::corpus::split_leave_one_out(&seqs)
    }

    fn tiny_model(peers: usize, seed: u64) -> DualModel {
        let shape = ModelShape {
            vocab_rows: 32,
            max_len: 10,
            d: 8,
            d_hidden: 16,
            layers: 1,
            heads: 2,
            peers,
            layer_norm: false,
        };
        DualModel::new(shape, seed).unwrap()
    }

    #[test]
    fn evaluate_split_end_to_end() {
        let split = tiny_split();
        let model = tiny_model(2, 3);
        let cfg = EvalConfig { negatives: 20, max_len: 10, batch_size: 4, ..EvalConfig::default() };
        let r = evaluate_split(&model, 0, &split, SplitKind::Test, &cfg).unwrap();
        assert_eq!(r.n_cases, 6);
        assert!(r.hr_1 <= r.hr_5 && r.hr_5 <= r.hr_10);
        assert_eq!(r, evaluate_split(&model, 0, &split, SplitKind::Test, &cfg).unwrap());
        let cases = eval_cases(&split, SplitKind::Valid, 30, &cfg).unwrap();
        for c in &cases {
            assert_eq!(c.candidates[0], c.target);
            assert_eq!(*c.sample.tokens.last().unwrap(), 31);
            assert_eq!(c.sample.labels, vec![c.target]);
        }
        let empty = SplitSet::default();
        assert!(evaluate_split(&model, 0, &empty, SplitKind::Valid, &cfg).is_err());
    }

    #[test]
    fn identical_peers_are_consistent() {
        let split = tiny_split();
        let mut model = tiny_model(2, 5);
        model.params.peers[1] = model.params.peers[0].clone();
        let cfg = EvalConfig { negatives: 20, max_len: 10, ..EvalConfig::default() };
        let rep = response_consistency_report(&model, &split, SplitKind::Test, &cfg).unwrap();
        assert_eq!(rep.inconsistent_fraction, 0.0);
        assert_eq!(rep.nll.len(), 6);
        assert!(rep.nll.iter().all(|r| r[0] == r[1]));
        let csv = rep.nll_csv();
        assert!(csv.starts_with("generator,peer0,peer1\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    fn brute_force_rank(scores: &[f64], target: u32, candidates: &[u32]) -> usize {
        // Sort descending; among equal scores the target goes last.
        let mut order: Vec<u32> = candidates.to_vec();
        order.sort_by(|&a, &b| {
            scores[b as usize]
                .total_cmp(&scores[a as usize])
                .then((a == target).cmp(&(b == target)))
        });
        order.iter().position(|&c| c == target).unwrap() + 1
    }

    proptest! {
        #[test]
        fn ranking_matches_full_sort(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..40).map(|_| rng.random_range(0..6) as f64).collect();
            let candidates: Vec<u32> = index::sample(&mut rng, 39, 20).into_iter().map(|i| i as u32 + 1).collect();
            let target = candidates[rng.random_range(0..20)];
            let r = score_ranking(&scores, 0, target, &candidates).unwrap();
            prop_assert_eq!(r.target_rank, brute_force_rank(&scores, target, &candidates));
            // strictly increasing transforms leave the rank alone
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() - 3.0).collect();
            prop_assert_eq!(score_ranking(&warped, 0, target, &candidates).unwrap().target_rank, r.target_rank);
        }

        #[test]
        fn metric_orderings(ranks in proptest::collection::vec(1usize..=100, 1..50)) {
            let cases: Vec<RankedCase> = ranks.into_iter().map(case_at_rank).collect();
            let r = EvalReport::from_cases(&cases).unwrap();
            prop_assert!(r.hr_1 <= r.hr_5 && r.hr_5 <= r.hr_10);
            prop_assert!(r.ndcg_5 <= r.hr_5 && r.ndcg_10 <= r.hr_10);
            prop_assert!(r.mrr >= r.hr_1);
            for v in [r.hr_1, r.hr_5, r.hr_10, r.ndcg_5, r.ndcg_10, r.mrr] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn ndcg_matches_generic_dcg(rank in 1usize..=100, k in 1usize..=20) {
            // one relevant item: IDCG = 1
            let dcg: f64 = (1..=k).map(|i| if i == rank { 1.0 / (1.0 + i as f64).log2() } else { 0.0 }).sum();
            prop_assert!((case_at_rank(rank).ndcg(k) - dcg).abs() < 1e-15);
        }
    }
}
