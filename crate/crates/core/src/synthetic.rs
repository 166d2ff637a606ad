//! Synthetic corpora with planted sequential patterns.
//!
//! Elements are split into disjoint families. Each family has its own sparse
//! Markov transition table, and every generator walks the table of one
//! family, so the next element is predictable from the previous one.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EventRecord, InteractionSequence, RawEventLog};
use crate::error::{HailError, Result};
use crate::seed::{rng_for, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub generators: usize,
    pub elements: usize,
    pub families: usize,
    /// Successors per element, drawn from the same family.
    pub branching: usize,
    /// Probability of the most likely successor; the rest share the remainder
    /// with geometrically decaying weights.
    pub top_probability: f64,
    /// Chance of jumping to a uniform element of the family instead.
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            generators: 500,
            elements: 200,
            families: 2,
            branching: 3,
            top_probability: 0.6,
            noise: 0.1,
            min_len: 16,
            max_len: 24,
            seed: 0,
        }
    }
}

/// Sequences plus the ground-truth transition structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub sequences: Vec<InteractionSequence>,
    /// Family of each generator.
    pub family_of: Vec<usize>,
    /// `successors[e]`: (next element, probability) for element id `e`.
    pub successors: Vec<Vec<(u32, f64)>>,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.families == 0 || self.elements % self.families != 0 {
            return Err(HailError::contract("elements must split evenly into families"));
        }
        let per = self.elements / self.families;
        if self.branching == 0 || self.branching > per {
            return Err(HailError::contract("branching must be in 1..=elements per family"));
        }
        if !(0.0..=1.0).contains(&self.top_probability) || !(0.0..=1.0).contains(&self.noise) {
            return Err(HailError::contract("probabilities must lie in [0, 1]"));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return Err(HailError::contract("need 3 <= min_len <= max_len"));
        }
        Ok(())
    }

    /// Element ids of family `f`: a contiguous block starting at 1.
    pub fn family_range(&self, f: usize) -> std::ops::RangeInclusive<u32> {
        let per = (self.elements / self.families) as u32;
        let lo = f as u32 * per + 1;
        lo..=lo + per - 1
    }
}

fn successor_weights(branching: usize, top: f64) -> Vec<f64> {
    if branching == 1 {
        return vec![1.0];
    }
    let rest: Vec<f64> = (0..branching - 1).map(|i| 0.5f64.powi(i as i32)).collect();
    let sum: f64 = rest.iter().sum();
    std::iter::once(top).chain(rest.iter().map(|w| (1.0 - top) * w / sum)).collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, Stream::Synthetic);
    let weights = successor_weights(spec.branching, spec.top_probability);
    let mut successors = vec![Vec::new(); spec.elements + 1];
    for f in 0..spec.families {
        let range = spec.family_range(f);
        let lo = *range.start();
        let per = range.count();
        for e in spec.family_range(f) {
            let picks = index::sample(&mut rng, per, spec.branching);
            successors[e as usize] = picks.iter().zip(&weights).map(|(i, &w)| (lo + i as u32, w)).collect();
        }
    }

    let mut sequences = Vec::with_capacity(spec.generators);
    let mut family_of = Vec::with_capacity(spec.generators);
    for g in 0..spec.generators {
        let f = g % spec.families;
        let range = spec.family_range(f);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut cur = rng.random_range(range.clone());
        let mut elements = vec![cur];
        while elements.len() < len {
            cur = if rng.random_bool(spec.noise) {
                rng.random_range(range.clone())
            } else {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let succ = &successors[cur as usize];
                let mut next = succ[succ.len() - 1].0;
                for &(e, w) in succ {
                    acc += w;
                    if u < acc {
                        next = e;
                        break;
                    }
                }
                next
            };
            elements.push(cur);
        }
        sequences.push(InteractionSequence {
            generator: g as u32,
            elements,
        });
        family_of.push(f);
    }
    Ok(SyntheticCorpus {
        sequences,
        family_of,
        successors,
    })
}

impl SyntheticCorpus {
    /// The corpus as a raw event log with names `g<i>` / `e<id>` and
    /// increasing timestamps.
    pub fn to_event_log(&self) -> RawEventLog {
        let mut records = Vec::new();
        for s in &self.sequences {
            for (t, &e) in s.elements.iter().enumerate() {
                records.push(EventRecord {
                    generator: format!("g{}", s.generator),
                    element: format!("e{e}"),
                    timestamp: t as i64,
                });
            }
        }
        RawEventLog { records }
    }
}
