//! Conditioning vectors `c = [lookback, theta, calendar]`.

use crate::data::{Example, CALENDAR_DIM};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// How the entity context `theta` is filled in.
pub enum ThetaDraw<'a> {
    /// Dirichlet mean (deterministic).
    Mean,
    /// A fresh Dirichlet draw.
    Sample(&'a mut StreamRng),
}

/// Read access to (target, condition) pairs for training and evaluation.
pub trait ConditionedData: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn target(&self, i: usize) -> &[f64];

    fn condition(&self, i: usize, theta: ThetaDraw<'_>) -> Vec<f64>;
}

/// Builds conditioning vectors for the entities of one dataset.
#[derive(Clone, Debug)]
pub struct Conditioner {
    lookback_len: usize,
    embed_size: usize,
    gammas: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
}

impl Conditioner {
    /// `entity_ids` lists the dataset's entities in dataset order. Every one
    /// must be present in `table` unless the table is absent or empty-sized.
    pub fn new(entity_ids: &[String], table: Option<&EmbeddingTable>, lookback_len: usize) -> Result<Self> {
        let embed_size = table.map_or(0, EmbeddingTable::size);
        let mut gammas = Vec::with_capacity(entity_ids.len());
        let mut means = Vec::with_capacity(entity_ids.len());
        for id in entity_ids {
            if embed_size == 0 {
                gammas.push(Vec::new());
                means.push(Vec::new());
                continue;
            }
            let e = table
                .and_then(|t| t.get(id))
                .ok_or_else(|| Error::UnknownEntity(id.clone()))?;
            means.push(e.mean());
            gammas.push(e.gamma.clone());
        }
        Ok(Conditioner {
            lookback_len,
            embed_size,
            gammas,
            means,
        })
    }

    pub fn embed_size(&self) -> usize {
        self.embed_size
    }

    pub fn cond_dim(&self) -> usize {
        self.lookback_len + self.embed_size + CALENDAR_DIM
    }

    pub fn assemble(&self, lookback: &[f64], entity: usize, calendar: &[f64; 4], theta: ThetaDraw<'_>) -> Vec<f64> {
        debug_assert_eq!(lookback.len(), self.lookback_len);
        let mut c = Vec::with_capacity(self.cond_dim());
        c.extend_from_slice(lookback);
        if self.embed_size > 0 {
            match theta {
                ThetaDraw::Mean => c.extend_from_slice(&self.means[entity]),
                ThetaDraw::Sample(rng) => {
                    c.extend(crate::embeddings::sample_dirichlet(&self.gammas[entity], rng))
                }
            }
        }
        c.extend_from_slice(calendar);
        c
    }

    pub fn condition_for(&self, ex: &Example, theta: ThetaDraw<'_>) -> Vec<f64> {
        self.assemble(&ex.lookback, ex.entity, &ex.calendar, theta)
    }
}

/// Examples paired with the conditioner that turns them into vectors.
pub struct ConditionedSet<'a> {
    pub examples: &'a [Example],
    pub conditioner: &'a Conditioner,
}

impl ConditionedData for ConditionedSet<'_> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn target(&self, i: usize) -> &[f64] {
        &self.examples[i].target
    }

    fn condition(&self, i: usize, theta: ThetaDraw<'_>) -> Vec<f64> {
        self.conditioner.condition_for(&self.examples[i], theta)
    }
}

/// Fixed (target, condition) pairs.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ConditionedData for PairSet {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn target(&self, i: usize) -> &[f64] {
        &self.pairs[i].0
    }

    fn condition(&self, i: usize, _theta: ThetaDraw<'_>) -> Vec<f64> {
        self.pairs[i].1.clone()
    }
}
