//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line straight to
//! stdout, so the verdicts survive libtest's output capture.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hail_core::corpus::{split_leave_one_out, EventRecord, PreparedCorpus, SplitKind};
use hail_core::eval::{evaluate_split, response_consistency_report, score_ranking, RankedCase};
use hail_core::gradcheck::{self, IDENTITY_FD_TOL, IDENTITY_FORMULA_TOL};
use hail_core::losses::{
    denoise_truncation, loss_med_negative, loss_med_positive, loss_mimic, loss_self_knowledge, med_multi_peer,
    PeerDistributions,
};
use hail_core::synthetic::{generate, SyntheticSpec};
use hail_core::trainer::{load_checkpoint, save_checkpoint, train, EpochMetrics, RunStatus, Trainer};
use hail_core::{DistillMode, ProbabilityRow, RawEventLog, SplitSet, TrainConfig, TruncationFlags, TruncationRule};

// Pinned tolerances and budgets.
const IDENTITY_INSTANCES: usize = 200;
const IDENTITY_BUDGET: Duration = Duration::from_secs(10);
const FD_REL_TOL: f64 = 1e-4;
const FD_BUDGET: Duration = Duration::from_secs(60);
const REDUCTION_STEPS: u64 = 50;
const REDUCTION_INPUTS: usize = 1000;
const MAX_ULPS: u64 = 1;
const WEIGHT_SUM_TOL: f64 = 1e-12;
const ORACLE_CASES: usize = 1000;
const NULL_CASES: usize = 2000;
const NULL_HR10: f64 = 0.10;
/// Two-sided 99% normal quantile.
const Z_99: f64 = 2.5758293035489004;
const SEEDS: [u64; 3] = [0, 1, 2];
const MED_WINS_REQUIRED: usize = 3;
const MIMIC_WINS_REQUIRED: usize = 2;
const DIRECTIONAL_BUDGET: Duration = Duration::from_secs(15 * 60);
const SK_TREND_RHO: f64 = -0.8;
const ML1M_TARGET_HR1: f64 = 0.4291;
const ML1M_BAND: f64 = 0.05;

/// Keeps timed criteria from sharing the CPU with each other.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: &str, pass: bool, detail: impl AsRef<str>) {
    let line = format!("[{}] criterion {id}: {}\n", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn random_row(rng: &mut ChaCha8Rng, width: usize) -> ProbabilityRow {
    ProbabilityRow::from_logits((0..width).map(|_| rng.random_range(-4.0..4.0)).collect())
}

fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    if a.signum() != b.signum() {
        return u64::MAX;
    }
    a.to_bits().abs_diff(b.to_bits())
}

#[test]
fn c1_gradient_identity() {
    let _g = serial();
    let start = Instant::now();
    let r = gradcheck::gradient_identity_suite(11, IDENTITY_INSTANCES).unwrap();
    let took = start.elapsed();
    let pass = r.instances == IDENTITY_INSTANCES
        && r.max_formula_error <= IDENTITY_FORMULA_TOL
        && r.max_fd_error <= IDENTITY_FD_TOL
        && took < IDENTITY_BUDGET;
    verdict(
        "1",
        pass,
        format!(
            "{} instances, closed form max |diff| {:.2e} (tol {IDENTITY_FORMULA_TOL:e}), finite differences {:.2e} (tol {IDENTITY_FD_TOL:e}), {:.2}s (budget {}s)",
            r.instances,
            r.max_formula_error,
            r.max_fd_error,
            took.as_secs_f64(),
            IDENTITY_BUDGET.as_secs()
        ),
    );
    assert!(pass);
}

#[test]
fn c2_finite_difference_suite() {
    let _g = serial();
    let start = Instant::now();
    let classes = gradcheck::finite_difference_suite(5, &gradcheck::reference_objective()).unwrap();
    let took = start.elapsed();
    let worst = classes.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = classes
        .iter()
        .filter(|c| !(c.max_rel_error <= FD_REL_TOL))
        .map(|c| c.class.as_str())
        .collect();
    let pass = !classes.is_empty() && failing.is_empty() && took < FD_BUDGET;
    verdict(
        "2",
        pass,
        format!(
            "{} parameter classes, worst relative error {worst:.2e} (tol {FD_REL_TOL:e}), failing {failing:?}, {:.2}s (budget {}s)",
            classes.len(),
            took.as_secs_f64(),
            FD_BUDGET.as_secs()
        ),
    );
    assert!(pass);
}

fn small_split() -> SplitSet {
    let spec = SyntheticSpec {
        generators: 40,
        elements: 20,
        min_len: 8,
        max_len: 12,
        ..SyntheticSpec::default()
    };
    split_leave_one_out(&generate(&spec).unwrap().sequences)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        d: 8,
        d_hidden: 16,
        layers: 1,
        heads: 2,
        max_len: 12,
        batch_size: 16,
        duplication: 2,
        epochs: 30,
        warmup_steps: 10,
        patience: 0,
        eval_negatives: 10,
        seed: 9,
        ..TrainConfig::default()
    }
}

const SMALL_ROWS: usize = 22;

#[test]
fn c3_reduction_identities() {
    let _g = serial();
    // (a) alpha = 1 against SK-only training.
    let split = small_split();
    let med = TrainConfig { alpha: 1.0, distill_mode: DistillMode::Med, ..small_config() };
    let sk_only = TrainConfig { distill_mode: DistillMode::None, ..med.clone() };
    let mut a = Trainer::new(med, &split, SMALL_ROWS).unwrap();
    let mut b = Trainer::new(sk_only, &split, SMALL_ROWS).unwrap();
    assert_eq!(a.run(Some(REDUCTION_STEPS)).unwrap(), RunStatus::Paused);
    assert_eq!(b.run(Some(REDUCTION_STEPS)).unwrap(), RunStatus::Paused);
    let pass_a = a.step() == REDUCTION_STEPS && a.model().params == b.model().params;

    // (b) multi-peer form at T = 2 against the two-peer terms.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_ulps = 0u64;
    for _ in 0..REDUCTION_INPUTS {
        let width = rng.random_range(4..14);
        let n = rng.random_range(1..6);
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(1..width as u32 - 1)).collect();
        let s: Vec<ProbabilityRow> = (0..n).map(|_| random_row(&mut rng, width)).collect();
        let p: Vec<ProbabilityRow> = (0..n).map(|_| random_row(&mut rng, width)).collect();
        let keep = TruncationFlags {
            keep: (0..n).map(|_| rng.random_bool(0.8)).collect(),
            ..TruncationFlags::keep_all(n)
        };
        let pos = loss_med_positive(&s, &p, &labels, &keep).unwrap();
        let neg = loss_med_negative(&s, &p, &labels, &keep).unwrap();
        let dists = PeerDistributions::new(vec![s, p], labels).unwrap();
        let (mpos, mneg) = med_multi_peer(&dists, &keep, 0).unwrap();
        worst_ulps = worst_ulps.max(ulps(pos, mpos)).max(ulps(neg, mneg));
    }
    let pass_b = worst_ulps <= MAX_ULPS;

    // (c) beta = 0 keeps every coordinate under either rule.
    let mut pass_c = true;
    for _ in 0..200 {
        let t = rng.random_range(2..5);
        let n = rng.random_range(1..40);
        let per: Vec<Vec<f64>> = (0..t).map(|_| (0..n).map(|_| rng.random_range(0.0..8.0)).collect()).collect();
        for rule in [TruncationRule::Any, TruncationRule::All] {
            let f = denoise_truncation(&per, 0.0, rule).unwrap();
            pass_c &= f.keep.iter().all(|&k| k) && f.dropped() == 0;
        }
    }

    // (d) per coordinate the two positive weights sum to one, so the two
    // weighted positive terms add up to the plain SK term.
    let mut worst_sum = 0.0f64;
    for _ in 0..REDUCTION_INPUTS {
        let width = rng.random_range(4..14);
        let label = rng.random_range(1..width as u32 - 1);
        let s = vec![random_row(&mut rng, width)];
        let p = vec![random_row(&mut rng, width)];
        let keep = TruncationFlags::keep_all(1);
        let med_pos = loss_med_positive(&s, &p, &[label], &keep).unwrap();
        let (mimic_pos, _) = loss_mimic(&s, &p, &[label], &keep).unwrap();
        let (sk, _) = loss_self_knowledge(&s, &[label]).unwrap();
        worst_sum = worst_sum.max(((med_pos + mimic_pos) - sk).abs() / sk.max(1.0));
    }
    let pass_d = worst_sum <= WEIGHT_SUM_TOL;

    let pass = pass_a && pass_b && pass_c && pass_d;
    verdict(
        "3",
        pass,
        format!(
            "(a) alpha=1 vs SK-only over {REDUCTION_STEPS} steps bit-identical: {pass_a}; (b) T=2 worst {worst_ulps} ulp over {REDUCTION_INPUTS} inputs (max {MAX_ULPS}); (c) beta=0 identity: {pass_c}; (d) weight sum worst deviation {worst_sum:.1e} (tol {WEIGHT_SUM_TOL:e})"
        ),
    );
    assert!(pass);
}

/// Full-sort oracle: stable descending sort with the target listed after
/// every other candidate, so equal scores rank ahead of it.
fn oracle_rank(scores: &[f64], target: u32, candidates: &[u32]) -> usize {
    let mut order: Vec<u32> = candidates.iter().copied().filter(|&c| c != target).collect();
    order.push(target);
    order.sort_by(|&a, &b| scores[b as usize].partial_cmp(&scores[a as usize]).unwrap());
    order.iter().position(|&c| c == target).unwrap() + 1
}

#[test]
fn c4_metric_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for case in 0..ORACLE_CASES {
        let elements = rng.random_range(2..300u32);
        let n = rng.random_range(2..=elements.min(100)) as usize;
        let ids = rand::seq::index::sample(&mut rng, elements as usize, n);
        let candidates: Vec<u32> = ids.iter().map(|i| i as u32 + 1).collect();
        let target = candidates[rng.random_range(0..n)];
        // Few distinct values, so ties are common.
        let levels = rng.random_range(1..6);
        let scores: Vec<f64> = (0..=elements).map(|_| rng.random_range(0..levels) as f64 / 4.0).collect();
        let got = score_ranking(&scores, case as u32, target, &candidates).unwrap();
        let want = oracle_rank(&scores, target, &candidates);
        let r = want as f64;
        let ok = got.target_rank == want
            && got.hit(10) == if want <= 10 { 1.0 } else { 0.0 }
            && got.ndcg(10) == if want <= 10 { 1.0 / (r + 1.0).log2() } else { 0.0 }
            && got.reciprocal_rank() == 1.0 / r;
        mismatches += usize::from(!ok);
    }

    let third = RankedCase { generator: 0, target: 1, candidates: vec![1, 2, 3], target_rank: 3 };
    let ndcg_exact = third.ndcg(5) == 0.5;

    let mut hits = 0usize;
    for case in 0..NULL_CASES {
        let candidates: Vec<u32> = (1..=100).collect();
        let target = rng.random_range(1..=100);
        let scores: Vec<f64> = (0..=100).map(|_| rng.random::<f64>()).collect();
        hits += score_ranking(&scores, case as u32, target, &candidates).unwrap().hit(10) as usize;
    }
    let hr10 = hits as f64 / NULL_CASES as f64;
    let half = Z_99 * (NULL_HR10 * (1.0 - NULL_HR10) / NULL_CASES as f64).sqrt();
    let null_ok = (hr10 - NULL_HR10).abs() <= half;

    let pass = mismatches == 0 && ndcg_exact && null_ok;
    verdict(
        "4",
        pass,
        format!(
            "{mismatches} oracle mismatches over {ORACLE_CASES} cases; NDCG@5 at rank 3 = {} (want 0.5 exactly); random scorer HR@10 {hr10:.4} vs 99% interval [{:.4}, {:.4}]",
            third.ndcg(5),
            NULL_HR10 - half,
            NULL_HR10 + half
        ),
    );
    assert!(pass);
}

/// One synthetic training run of the directional comparison.
struct Run {
    mode: DistillMode,
    seed: u64,
    peer_hr1: Vec<f64>,
    inconsistency: f64,
    log: Vec<EpochMetrics>,
    secs: f64,
}

impl Run {
    fn median_hr1(&self) -> f64 {
        median(&self.peer_hr1)
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = s.len() / 2;
    if s.len() % 2 == 0 {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

/// Shared setting of criteria 5 to 7: 500 generators, 200 elements in two
/// disjoint Markov families, two peers, 20 epochs.
fn directional_config(mode: DistillMode, seed: u64) -> TrainConfig {
    TrainConfig {
        alpha: 0.5,
        beta: 0.0,
        peers: 2,
        d: 32,
        d_hidden: 64,
        layers: 1,
        heads: 2,
        max_len: 24,
        batch_size: 64,
        duplication: 5,
        warmup_steps: 50,
        epochs: 20,
        patience: 0,
        distill_mode: mode,
        seed,
        ..TrainConfig::default()
    }
}

fn directional_runs() -> &'static [Run] {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let spec = SyntheticSpec::default();
        let corpus = generate(&spec).unwrap();
        let split = split_leave_one_out(&corpus.sequences);
        let rows = spec.elements + 2;
        let mut runs = Vec::new();
        for &seed in &SEEDS {
            for mode in [DistillMode::Med, DistillMode::None, DistillMode::Mimic] {
                let cfg = directional_config(mode, seed);
                let start = Instant::now();
                let (ckpt, log) = train(&cfg, &split, rows).unwrap();
                let secs = start.elapsed().as_secs_f64();
                let model = ckpt.model();
                let eval = cfg.eval_config();
                let peer_hr1 = (0..cfg.peers)
                    .map(|j| evaluate_split(&model, j, &split, SplitKind::Test, &eval).unwrap().hr_1)
                    .collect();
                let inconsistency = response_consistency_report(&model, &split, SplitKind::Test, &eval)
                    .unwrap()
                    .inconsistent_fraction;
                runs.push(Run { mode, seed, peer_hr1, inconsistency, log, secs });
            }
        }
        runs
    })
}

fn run_of(runs: &[Run], mode: DistillMode, seed: u64) -> &Run {
    runs.iter().find(|r| r.mode == mode && r.seed == seed).unwrap()
}

/// Spearman correlation; ties get average ranks.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn c5_med_beats_no_distillation() {
    let _g = serial();
    let runs = directional_runs();
    let mut wins = 0;
    let mut secs = 0.0;
    let mut detail = Vec::new();
    for &seed in &SEEDS {
        let med = run_of(runs, DistillMode::Med, seed);
        let none = run_of(runs, DistillMode::None, seed);
        secs += med.secs + none.secs;
        wins += usize::from(med.median_hr1() > none.median_hr1());
        detail.push(format!("seed {seed} med {:.4} none {:.4}", med.median_hr1(), none.median_hr1()));
    }
    let in_budget = secs < DIRECTIONAL_BUDGET.as_secs_f64();
    let pass = wins >= MED_WINS_REQUIRED && in_budget;
    verdict(
        "5",
        pass,
        format!(
            "median test HR@1 MED > none in {wins}/{} seeds (need {MED_WINS_REQUIRED}): {}; {secs:.0}s (budget {}s)",
            SEEDS.len(),
            detail.join(", "),
            DIRECTIONAL_BUDGET.as_secs()
        ),
    );
    assert!(pass);
}

#[test]
fn c5_training_reduces_self_knowledge_loss() {
    let _g = serial();
    let runs = directional_runs();
    let mut worst = f64::NEG_INFINITY;
    for r in runs {
        let epochs: Vec<f64> = r.log.iter().map(|m| m.epoch as f64).collect();
        let sk: Vec<f64> = r.log.iter().map(|m| m.sk.iter().sum::<f64>() / m.sk.len() as f64).collect();
        worst = worst.max(spearman(&epochs, &sk));
    }
    let pass = worst < SK_TREND_RHO;
    verdict(
        "5 (trend)",
        pass,
        format!("worst Spearman rho of epoch vs mean SK loss {worst:.3} over {} runs (need < {SK_TREND_RHO})", runs.len()),
    );
    assert!(pass);
}

#[test]
fn c6_med_at_least_mimic() {
    let _g = serial();
    let runs = directional_runs();
    let mut wins = 0;
    let mut detail = Vec::new();
    for &seed in &SEEDS {
        let med = run_of(runs, DistillMode::Med, seed);
        let mimic = run_of(runs, DistillMode::Mimic, seed);
        wins += usize::from(med.median_hr1() >= mimic.median_hr1());
        detail.push(format!("seed {seed} med {:.4} mimic {:.4}", med.median_hr1(), mimic.median_hr1()));
    }
    let pass = wins >= MIMIC_WINS_REQUIRED;
    verdict(
        "6",
        pass,
        format!("MED >= mimic in {wins}/{} seeds (need {MIMIC_WINS_REQUIRED}): {}", SEEDS.len(), detail.join(", ")),
    );
    assert!(pass);
}

#[test]
fn c7_consistency_diagnostic() {
    let _g = serial();
    let runs = directional_runs();
    let none: Vec<f64> = SEEDS.iter().map(|&s| run_of(runs, DistillMode::None, s).inconsistency).collect();
    let med: Vec<f64> = SEEDS.iter().map(|&s| run_of(runs, DistillMode::Med, s).inconsistency).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let positive = none.iter().all(|&f| f > 0.0);
    let lower = mean(&med) < mean(&none);
    let pass = positive && lower;
    verdict(
        "7",
        pass,
        format!(
            "inconsistent fraction without distillation {none:.4?} (all > 0: {positive}); with MED {med:.4?}; mean {:.4} vs {:.4} (MED lower: {lower})",
            mean(&none),
            mean(&med)
        ),
    );
    assert!(pass);
}

#[test]
fn c8_determinism_and_resume() {
    let _g = serial();
    let split = small_split();
    let cfg = TrainConfig { epochs: 3, ..small_config() };
    let dir = tempfile::tempdir().unwrap();
    let (a, log_a) = train(&cfg, &split, SMALL_ROWS).unwrap();
    let (b, _) = train(&cfg, &split, SMALL_ROWS).unwrap();
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&a, &pa).unwrap();
    save_checkpoint(&b, &pb).unwrap();
    let identical = std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap();

    let mut first = Trainer::new(cfg.clone(), &split, SMALL_ROWS).unwrap();
    let pause_at = a.step / 2 + 1;
    assert_eq!(first.run(Some(pause_at)).unwrap(), RunStatus::Paused);
    let mid = dir.path().join("mid.ckpt");
    save_checkpoint(&first.checkpoint(), &mid).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(cfg, &split, load_checkpoint(&mid).unwrap()).unwrap();
    assert_eq!(resumed.run(None).unwrap(), RunStatus::Finished);
    let matches = resumed.checkpoint() == a && resumed.log() == &log_a[..];

    let pass = identical && matches;
    verdict(
        "8",
        pass,
        format!(
            "same seed gives byte-identical checkpoints: {identical}; pause at step {pause_at} of {}, save, load and resume equals uninterrupted: {matches}",
            a.step
        ),
    );
    assert!(pass);
}

/// Reads `user::item::rating::time` lines.
fn read_ml1m(path: &PathBuf) -> RawEventLog {
    let text = std::fs::read_to_string(path).unwrap();
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split("::").collect();
            EventRecord { generator: f[0].into(), element: f[1].into(), timestamp: f[3].trim().parse().unwrap() }
        })
        .collect();
    RawEventLog { records }
}

/// Not gating: the verdict is printed but never asserted.
#[test]
fn c9_optional_ml1m_run() {
    let Some(path) = std::env::var_os("HAIL_ML1M_RATINGS").map(PathBuf::from).filter(|p| p.exists()) else {
        let _ = std::io::stdout()
            .lock()
            .write_all(b"[SKIP] criterion 9: set HAIL_ML1M_RATINGS to a ratings.dat file to run it\n");
        return;
    };
    let _g = serial();
    let corpus = PreparedCorpus::from_log(&read_ml1m(&path), 5, 200).unwrap();
    let split = split_leave_one_out(&corpus.sequences);
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let (ckpt, _) = train(&cfg, &split, corpus.vocab.table_rows()).unwrap();
    let hr1 = evaluate_split(&ckpt.model(), cfg.peer_index, &split, SplitKind::Test, &cfg.eval_config())
        .unwrap()
        .hr_1;
    verdict(
        "9 (non-gating)",
        (hr1 - ML1M_TARGET_HR1).abs() <= ML1M_BAND,
        format!("HR@1 {hr1:.4} vs {ML1M_TARGET_HR1} +/- {ML1M_BAND}, {:.0}s", start.elapsed().as_secs_f64()),
    );
}
