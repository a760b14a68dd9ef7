//! (μ+λ) evolutionary search over per-layer GLoRA structures.
//!
//! A genome holds five tags per layer. Parents are picked by tournament,
//! children come from uniform crossover and per-gene mutation, and the best
//! `μ` of parents and children survive. Fitness (lower is better) is cached
//! by genome, so the budget counts distinct evaluations.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::glora::{GloraTags, Tag};
use crate::error::{Error, Result};
use crate::numcore::init::seeded;

/// Allowed tags per support for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpace {
    pub path: String,
    /// Choices for `(U, V, X, Y, Z)`.
    pub choices: [Vec<Tag>; 5],
}

impl LayerSpace {
    /// `none`, `scalar`, `vector` everywhere and `lowrank(rank)` for `U`, `V`.
    /// Bias-free layers only allow `none` for `X`, `Y`, `Z`.
    pub fn standard(path: impl Into<String>, rank: usize, has_bias: bool) -> Self {
        let weight = vec![Tag::None, Tag::Scalar, Tag::Vector, Tag::LowRank(rank)];
        let bias = if has_bias {
            vec![Tag::None, Tag::Scalar, Tag::Vector]
        } else {
            vec![Tag::None]
        };
        Self {
            path: path.into(),
            choices: [weight.clone(), weight, bias.clone(), bias.clone(), bias],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub layers: Vec<LayerSpace>,
}

impl SearchSpace {
    pub fn new(layers: Vec<LayerSpace>) -> Result<Self> {
        let s = Self { layers };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.iter().any(|l| l.choices.iter().any(Vec::is_empty)) {
            return Err(Error::Search("empty search space".into()));
        }
        Ok(())
    }

    pub fn n_genes(&self) -> usize {
        self.layers.len() * 5
    }

    /// Number of distinct genomes, saturating.
    pub fn size(&self) -> u128 {
        self.layers
            .iter()
            .flat_map(|l| l.choices.iter())
            .fold(1u128, |acc, c| acc.saturating_mul(c.len() as u128))
    }

    pub fn paths(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.path.clone()).collect()
    }

    fn choices(&self, gene: usize) -> &[Tag] {
        &self.layers[gene / 5].choices[gene % 5]
    }
}

/// Per-layer tags and, once scored, the validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchGenome {
    pub layers: Vec<GloraTags>,
    pub fitness: Option<f64>,
}

impl SearchGenome {
    pub fn genes(&self) -> Vec<Tag> {
        self.layers.iter().flat_map(|t| t.as_array()).collect()
    }

    fn from_genes(genes: &[Tag]) -> Self {
        Self {
            layers: genes.chunks(5).map(|c| GloraTags::from_array([c[0], c[1], c[2], c[3], c[4]])).collect(),
            fitness: None,
        }
    }

    pub fn active_genes(&self) -> usize {
        self.genes().iter().filter(|t| **t != Tag::None).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// μ
    pub population: usize,
    /// λ
    pub offspring: usize,
    /// Maximum distinct fitness evaluations.
    pub budget: usize,
    pub tournament: usize,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    /// Start from an all-`none` member plus members of increasing density.
    pub seed_identity: bool,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 8,
            offspring: 8,
            budget: 50,
            tournament: 3,
            mutation_prob: 0.1,
            crossover_prob: 0.5,
            seed_identity: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: SearchGenome,
    /// Every distinct genome in evaluation order.
    pub history: Vec<SearchGenome>,
    pub generations: usize,
}

impl SearchResult {
    pub fn evaluations(&self) -> usize {
        self.history.len()
    }
}

fn key(fitness: f64) -> f64 {
    if fitness.is_nan() {
        f64::INFINITY
    } else {
        fitness
    }
}

struct Evaluator<'a, F> {
    cache: HashMap<Vec<Tag>, f64>,
    history: Vec<SearchGenome>,
    budget: usize,
    val_fn: &'a mut F,
}

impl<F: FnMut(&[GloraTags]) -> Result<f64>> Evaluator<'_, F> {
    fn exhausted(&self) -> bool {
        self.history.len() >= self.budget
    }

    /// Scored genome, or `None` once the budget is spent on a new genome.
    fn score(&mut self, mut g: SearchGenome) -> Result<Option<SearchGenome>> {
        let genes = g.genes();
        if let Some(&f) = self.cache.get(&genes) {
            g.fitness = Some(f);
            return Ok(Some(g));
        }
        if self.exhausted() {
            return Ok(None);
        }
        let f = (self.val_fn)(&g.layers)?;
        self.cache.insert(genes, f);
        g.fitness = Some(f);
        self.history.push(g.clone());
        Ok(Some(g))
    }
}

/// Returns the lowest-fitness genome found within `cfg.budget` distinct
/// evaluations. Deterministic for a fixed seed and deterministic `val_fn`.
pub fn evolutionary_search<F>(space: &SearchSpace, cfg: &SearchConfig, mut val_fn: F) -> Result<SearchResult>
where
    F: FnMut(&[GloraTags]) -> Result<f64>,
{
    space.validate()?;
    if cfg.population < 2 || cfg.budget < cfg.population || cfg.offspring == 0 || cfg.tournament == 0 {
        return Err(Error::Search(format!(
            "need budget ≥ population ≥ 2 and offspring, tournament ≥ 1 (got budget {}, population {}, offspring {}, tournament {})",
            cfg.budget, cfg.population, cfg.offspring, cfg.tournament
        )));
    }
    if !(0.0..=1.0).contains(&cfg.mutation_prob) || !(0.0..=1.0).contains(&cfg.crossover_prob) {
        return Err(Error::Search("mutation and crossover probabilities must lie in [0, 1]".into()));
    }
    let mut rng = seeded(cfg.seed);
    let n = space.n_genes();
    let distinct = space.size();
    let mut ev = Evaluator {
        cache: HashMap::new(),
        history: Vec::new(),
        budget: cfg.budget,
        val_fn: &mut val_fn,
    };

    let mut population: Vec<SearchGenome> = Vec::with_capacity(cfg.population);
    for i in 0..cfg.population {
        let density = if cfg.seed_identity { i as f64 / (cfg.population - 1) as f64 } else { rng.random::<f64>() };
        let genes: Vec<Tag> = (0..n)
            .map(|g| {
                let c = space.choices(g);
                let active: Vec<Tag> = c.iter().copied().filter(|t| *t != Tag::None).collect();
                if c.contains(&Tag::None) && (active.is_empty() || rng.random::<f64>() >= density) {
                    Tag::None
                } else {
                    *active.choose(&mut rng).unwrap_or(&c[0])
                }
            })
            .collect();
        if let Some(g) = ev.score(SearchGenome::from_genes(&genes))? {
            if !population.iter().any(|p| p.layers == g.layers) {
                population.push(g);
            }
        }
    }

    let mut generations = 0;
    // a generation that adds nothing new many times in a row means the
    // reachable space is exhausted
    let mut stale = 0;
    while !ev.exhausted() && (ev.history.len() as u128) < distinct && stale < 100 {
        generations += 1;
        let before = ev.history.len();
        let mut children = Vec::with_capacity(cfg.offspring);
        for _ in 0..cfg.offspring {
            let p1 = tournament(&population, cfg.tournament, &mut rng);
            let p2 = tournament(&population, cfg.tournament, &mut rng);
            let (g1, g2) = (p1.genes(), p2.genes());
            let crossover = rng.random::<f64>() < cfg.crossover_prob;
            let genes: Vec<Tag> = (0..n)
                .map(|g| {
                    let mut t = if crossover && rng.random::<bool>() { g2[g] } else { g1[g] };
                    let c = space.choices(g);
                    if c.len() > 1 && rng.random::<f64>() < cfg.mutation_prob {
                        let others: Vec<Tag> = c.iter().copied().filter(|x| *x != t).collect();
                        t = *others.choose(&mut rng).expect("at least one alternative");
                    }
                    t
                })
                .collect();
            match ev.score(SearchGenome::from_genes(&genes))? {
                Some(child) => children.push(child),
                None => break,
            }
        }
        for c in children {
            if !population.iter().any(|p| p.layers == c.layers) {
                population.push(c);
            }
        }
        // stable sort keeps earlier members ahead on ties
        population.sort_by(|a, b| key(a.fitness.unwrap_or(f64::INFINITY)).total_cmp(&key(b.fitness.unwrap_or(f64::INFINITY))));
        population.truncate(cfg.population);
        stale = if ev.history.len() == before { stale + 1 } else { 0 };
    }

    let best = ev
        .history
        .iter()
        .fold(None::<&SearchGenome>, |best, g| match best {
            Some(b) if key(b.fitness.unwrap_or(f64::INFINITY)) <= key(g.fitness.unwrap_or(f64::INFINITY)) => Some(b),
            _ => Some(g),
        })
        .cloned()
        .ok_or_else(|| Error::Search("no genome was evaluated".into()))?;
    Ok(SearchResult {
        best,
        history: ev.history,
        generations,
    })
}

fn tournament<'a>(population: &'a [SearchGenome], size: usize, rng: &mut crate::numcore::init::Rng) -> &'a SearchGenome {
    let mut best: Option<&SearchGenome> = None;
    for _ in 0..size {
        let c = &population[rng.random_range(0..population.len())];
        let better = match best {
            None => true,
            Some(b) => key(c.fitness.unwrap_or(f64::INFINITY)) < key(b.fitness.unwrap_or(f64::INFINITY)),
        };
        if better {
            best = Some(c);
        }
    }
    best.expect("tournament size ≥ 1")
}
