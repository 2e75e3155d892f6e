//! Synthetic token-generation tasks with a known expert.
//!
//! A [`TokenWorld`] couples a finite prompt distribution with two order-k
//! Markov next-token tables: the expert that annotates demonstrations and a
//! broader pretraining distribution (a mixture of the expert and a
//! uniform-smoothed random perturbation). Because both are explicit tables,
//! divergences to the expert can be computed exactly by enumeration.

use std::collections::HashSet;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_softmax_in_place, Scalar};
use crate::seeds::{self, Rng};
use crate::sequence::{
    enumerate_log_probs, sample, ContextEncoder, NextToken, Token, Vocabulary,
};

pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 20;
const MAX_PROMPT_SUPPORT: usize = 1 << 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptWeights {
    #[default]
    Uniform,
    /// Log-normal random weights, normalised.
    Random,
}

/// Parameters of a synthetic world. Every field has a default so that
/// configuration files only need to name what they change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Ordinary tokens (excluding `[EOS]`).
    pub vocab_size: usize,
    pub prompt_length: usize,
    pub max_response_length: usize,
    /// Context length of the expert and pretraining tables.
    pub markov_order: usize,
    /// Standard deviation of the expert's random logits.
    pub expert_scale: f64,
    /// Added to the expert's `[EOS]` logit; negative values lengthen responses.
    pub expert_eos_bias: f64,
    /// Replace every expert row by a point mass on its argmax.
    pub deterministic_expert: bool,
    /// Weight of the perturbation in the pretraining mixture.
    pub pretrain_mix: f64,
    /// Weight of the uniform distribution inside the perturbation.
    pub pretrain_smoothing: f64,
    pub perturbation_scale: f64,
    /// Added to the perturbation's `[EOS]` logit.
    pub perturbation_eos_bias: f64,
    /// Pretraining distribution identical to the expert.
    pub identity: bool,
    pub prompt_weights: PromptWeights,
    pub enumeration_cap: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            prompt_length: 2,
            max_response_length: 4,
            markov_order: 1,
            expert_scale: 1.5,
            expert_eos_bias: 0.0,
            deterministic_expert: false,
            pretrain_mix: 0.5,
            pretrain_smoothing: 0.5,
            perturbation_scale: 1.5,
            perturbation_eos_bias: 0.0,
            identity: false,
            prompt_weights: PromptWeights::Uniform,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        Vocabulary::new(self.vocab_size)?;
        if self.prompt_length < 1 {
            return Err(Error::Config("prompt_length must be >= 1".into()));
        }
        if self.max_response_length < 2 {
            return Err(Error::Config("max_response_length must be >= 2".into()));
        }
        let support = (self.vocab_size as f64).powi(self.prompt_length as i32);
        if support > MAX_PROMPT_SUPPORT as f64 {
            return Err(Error::Config(format!(
                "prompt support vocab_size^prompt_length = {support} exceeds {MAX_PROMPT_SUPPORT}"
            )));
        }
        let contexts = ((self.vocab_size + 2) as f64).powi(self.markov_order as i32);
        if contexts > 1e6 {
            return Err(Error::Config(format!(
                "markov_order {} gives {contexts} contexts, too many for a table",
                self.markov_order
            )));
        }
        for (name, v) in [
            ("pretrain_mix", self.pretrain_mix),
            ("pretrain_smoothing", self.pretrain_smoothing),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !self.identity && self.pretrain_mix == 0.0 {
            return Err(Error::Config(
                "pretrain_mix = 0 makes pretrain equal to expert; set identity = true instead".into(),
            ));
        }
        if !(self.expert_scale >= 0.0 && self.perturbation_scale >= 0.0) {
            return Err(Error::Config("logit scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// Order-k Markov next-token table over `prompt ++ response`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovTable<F> {
    vocab: Vocabulary,
    encoder: ContextEncoder,
    probs: Vec<F>,
    log_probs: Vec<F>,
}

impl<F: Scalar> MarkovTable<F> {
    /// Builds a table from row-major probabilities, one row per context.
    pub fn from_probs(vocab: Vocabulary, order: usize, probs: Vec<f64>) -> Result<Self> {
        let encoder = ContextEncoder::new(vocab, order);
        let width = vocab.len();
        if probs.len() != encoder.num_contexts() * width {
            return Err(Error::Config(format!(
                "table has {} entries, expected {}",
                probs.len(),
                encoder.num_contexts() * width
            )));
        }
        for (c, row) in probs.chunks(width).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "row {c} is not a distribution (sum {total})"
                )));
            }
        }
        Ok(Self {
            vocab,
            encoder,
            log_probs: probs.iter().map(|&p| F::of(p.ln())).collect(),
            probs: probs.into_iter().map(F::of).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.encoder.order()
    }

    pub fn num_contexts(&self) -> usize {
        self.encoder.num_contexts()
    }

    pub fn row(&self, context: usize) -> &[F] {
        let w = self.vocab.len();
        &self.probs[context * w..(context + 1) * w]
    }

    pub fn probs(&self) -> &[F] {
        &self.probs
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs.iter().all(|&p| p == F::zero() || p == F::one())
    }
}

impl<F: Scalar> NextToken<F> for MarkovTable<F> {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn next_log_probs(&self, prompt: &[Token], prefix: &[Token], out: &mut [F]) {
        let w = self.vocab.len();
        let c = self.encoder.index(prompt, prefix);
        out.copy_from_slice(&self.log_probs[c * w..(c + 1) * w]);
    }
}

/// A synthetic task: prompt distribution, expert, and pretraining source.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenWorld<F> {
    spec: WorldSpec,
    vocab: Vocabulary,
    prompts: Vec<Vec<Token>>,
    prompt_weights: Vec<f64>,
    expert: MarkovTable<F>,
    pretrain: MarkovTable<F>,
}

fn random_rows(
    vocab: Vocabulary,
    contexts: usize,
    scale: f64,
    eos_bias: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(contexts * vocab.len());
    let mut row = vec![0.0f64; vocab.len()];
    for _ in 0..contexts {
        for (t, l) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *l = scale * z + if t == vocab.eos() { eos_bias } else { 0.0 };
        }
        log_softmax_in_place(&mut row);
        out.extend(row.iter().map(|l| l.exp()));
    }
    out
}

/// Rescales each row so it sums to one in floating point.
fn renormalise(probs: &mut [f64], width: usize) {
    for row in probs.chunks_mut(width) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
}

/// Instantiates a world. Deterministic in `(spec, seed)`.
pub fn build_world<F: Scalar>(spec: &WorldSpec, seed: u64) -> Result<TokenWorld<F>> {
    spec.validate()?;
    let vocab = Vocabulary::new(spec.vocab_size)?;
    let width = vocab.len();
    let contexts = ContextEncoder::new(vocab, spec.markov_order).num_contexts();
    let mut rng = seeds::rng(seeds::derive(seed, seeds::tag::WORLD));

    let mut expert = random_rows(vocab, contexts, spec.expert_scale, spec.expert_eos_bias, &mut rng);
    if spec.deterministic_expert {
        for row in expert.chunks_mut(width) {
            let arg = argmax(row);
            row.iter_mut().enumerate().for_each(|(i, p)| *p = if i == arg { 1.0 } else { 0.0 });
        }
    }
    renormalise(&mut expert, width);

    let perturb = random_rows(
        vocab,
        contexts,
        spec.perturbation_scale,
        spec.perturbation_eos_bias,
        &mut rng,
    );
    let pretrain = if spec.identity {
        expert.clone()
    } else {
        let uniform = 1.0 / width as f64;
        let mut mix: Vec<f64> = expert
            .iter()
            .zip(&perturb)
            .map(|(&e, &q)| {
                let smoothed = (1.0 - spec.pretrain_smoothing) * q + spec.pretrain_smoothing * uniform;
                (1.0 - spec.pretrain_mix) * e + spec.pretrain_mix * smoothed
            })
            .collect();
        renormalise(&mut mix, width);
        mix
    };

    let prompts = all_prompts(vocab.size(), spec.prompt_length);
    let mut prompt_weights: Vec<f64> = match spec.prompt_weights {
        PromptWeights::Uniform => vec![1.0; prompts.len()],
        PromptWeights::Random => (0..prompts.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z.exp()
            })
            .collect(),
    };
    let total: f64 = prompt_weights.iter().sum();
    prompt_weights.iter_mut().for_each(|w| *w /= total);

    let world = TokenWorld {
        spec: spec.clone(),
        vocab,
        prompts,
        prompt_weights,
        expert: MarkovTable::from_probs(vocab, spec.markov_order, expert)?,
        pretrain: MarkovTable::from_probs(vocab, spec.markov_order, pretrain)?,
    };
    if !spec.identity && world.max_table_tv() == 0.0 {
        return Err(Error::Config(
            "pretraining distribution coincides with the expert; raise pretrain_mix".into(),
        ));
    }
    Ok(world)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

fn all_prompts(size: usize, len: usize) -> Vec<Vec<Token>> {
    let count = size.pow(len as u32);
    (0..count)
        .map(|mut k| {
            let mut p = vec![0; len];
            for slot in p.iter_mut().rev() {
                *slot = k % size;
                k /= size;
            }
            p
        })
        .collect()
}

impl<F: Scalar> TokenWorld<F> {
    /// Assembles a world from explicit tables. Allows horizons shorter than
    /// [`build_world`] accepts, which is convenient for hand-built oracles.
    pub fn from_tables(
        spec: WorldSpec,
        expert: MarkovTable<F>,
        pretrain: MarkovTable<F>,
    ) -> Result<Self> {
        let vocab = Vocabulary::new(spec.vocab_size)?;
        if expert.vocab != vocab || pretrain.vocab != vocab {
            return Err(Error::Config("table vocabulary does not match spec".into()));
        }
        if spec.prompt_length < 1 || spec.max_response_length < 1 {
            return Err(Error::Config("prompt and response lengths must be >= 1".into()));
        }
        let prompts = all_prompts(vocab.size(), spec.prompt_length);
        let n = prompts.len() as f64;
        Ok(Self {
            prompt_weights: vec![1.0 / n; prompts.len()],
            prompts,
            vocab,
            expert,
            pretrain,
            spec,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn prompt_length(&self) -> usize {
        self.spec.prompt_length
    }

    pub fn max_response_length(&self) -> usize {
        self.spec.max_response_length
    }

    pub fn enumeration_cap(&self) -> u64 {
        self.spec.enumeration_cap
    }

    pub fn expert(&self) -> &MarkovTable<F> {
        &self.expert
    }

    pub fn pretrain_distribution(&self) -> &MarkovTable<F> {
        &self.pretrain
    }

    /// Support of the prompt distribution.
    pub fn prompts(&self) -> &[Vec<Token>] {
        &self.prompts
    }

    pub fn prompt_weights(&self) -> &[f64] {
        &self.prompt_weights
    }

    /// Largest per-context total variation between expert and pretraining tables.
    pub fn max_table_tv(&self) -> f64 {
        let w = self.vocab.len();
        self.expert
            .probs
            .chunks(w)
            .zip(self.pretrain.probs.chunks(w))
            .map(|(a, b)| {
                0.5 * a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Draws one prompt from the prompt distribution.
    pub fn sample_prompt(&self, rng: &mut Rng) -> &[Token] {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (p, &w) in self.prompts.iter().zip(&self.prompt_weights) {
            acc += w;
            if u < acc {
                return p;
            }
        }
        self.prompts.last().expect("non-empty prompt support")
    }

    /// Draws `count` distinct prompts from the prompt distribution without
    /// replacement, skipping `exclude`. Returns fewer when the support runs out.
    pub fn sample_prompt_set(
        &self,
        count: usize,
        exclude: &[Vec<Token>],
        tag: OverlapTag,
        seed: u64,
    ) -> PromptSet {
        let excluded: HashSet<&Vec<Token>> = exclude.iter().collect();
        let mut rng = seeds::rng(seed);
        // Efraimidis–Spirakis: the largest u^(1/w) keys form a weighted
        // sample without replacement.
        let mut keyed: Vec<(f64, usize)> = self
            .prompt_weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let u: f64 = rng.random();
                (u.ln() / w, i)
            })
            .filter(|&(_, i)| !excluded.contains(&self.prompts[i]))
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        PromptSet {
            prompts: keyed
                .into_iter()
                .take(count)
                .map(|(_, i)| self.prompts[i].clone())
                .collect(),
            overlap_tag: tag,
        }
    }

    /// Expert demonstrations on prompts drawn uniformly from `prompts`.
    pub fn sample_demonstrations(
        &self,
        prompts: &PromptSet,
        count: usize,
        seed: u64,
    ) -> Result<DemonstrationSet> {
        if count == 0 {
            return Err(Error::Config("demonstration count must be >= 1".into()));
        }
        if prompts.is_empty() {
            return Err(Error::Config("prompt subset is empty".into()));
        }
        let m = self.max_response_length();
        let pairs = (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = seeds::item_rng(seed, i as u64);
                let x = prompts.prompts[rng.random_range(0..prompts.len())].clone();
                let y = sample::<F, _>(&self.expert, &x, m, 1.0, &mut rng).tokens;
                Demonstration { x, y }
            })
            .collect();
        Ok(DemonstrationSet {
            pairs,
            provenance: prompts.overlap_tag.as_str().to_string(),
        })
    }

    /// Every complete response to `prompt` with nonzero expert probability.
    pub fn enumerate_responses(&self, prompt: &[Token]) -> Result<Vec<(Vec<Token>, F)>> {
        let e: &dyn NextToken<F> = &self.expert;
        Ok(enumerate_log_probs(&[e], prompt, self.max_response_length(), self.enumeration_cap())?
            .into_iter()
            .map(|r| (r.response, r.log_probs[0].exp()))
            .filter(|(_, p)| *p > F::zero())
            .collect())
    }
}

/// One prompt/response demonstration pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Demonstration {
    pub x: Vec<Token>,
    pub y: Vec<Token>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemonstrationSet {
    pub pairs: Vec<Demonstration>,
    /// Which prompt subset the pairs were drawn from.
    pub provenance: String,
}

impl DemonstrationSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct prompts in first-appearance order.
    pub fn prompts(&self) -> Vec<Vec<Token>> {
        let mut seen = HashSet::new();
        self.pairs
            .iter()
            .filter(|d| seen.insert(d.x.clone()))
            .map(|d| d.x.clone())
            .collect()
    }

    /// Checks the structural invariants against a world.
    pub fn validate<F: Scalar>(&self, world: &TokenWorld<F>) -> Result<()> {
        let v = world.vocab();
        let m = world.max_response_length();
        for (i, d) in self.pairs.iter().enumerate() {
            v.check_prompt(&d.x)?;
            v.check_response(&d.y)?;
            if d.x.len() != world.prompt_length() {
                return Err(Error::Input(format!("pair {i}: prompt length {}", d.x.len())));
            }
            let terminated = d.y.last() == Some(&v.eos());
            if d.y.is_empty() || d.y.len() > m || (!terminated && d.y.len() != m) {
                return Err(Error::Input(format!(
                    "pair {i}: response of length {} neither EOS-terminated nor truncated at {m}",
                    d.y.len()
                )));
            }
        }
        Ok(())
    }
}

/// How a PPO prompt set relates to the SFT prompts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapTag {
    #[default]
    Minimum,
    Medium,
    Diminished,
}

impl OverlapTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            OverlapTag::Minimum => "minimum",
            OverlapTag::Medium => "medium",
            OverlapTag::Diminished => "diminished",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    pub prompts: Vec<Vec<Token>>,
    pub overlap_tag: OverlapTag,
}

impl PromptSet {
    pub fn new(prompts: Vec<Vec<Token>>, overlap_tag: OverlapTag) -> Self {
        Self {
            prompts,
            overlap_tag,
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn intersection_size(&self, other: &[Vec<Token>]) -> usize {
        let other: HashSet<&Vec<Token>> = other.iter().collect();
        self.prompts.iter().filter(|p| other.contains(p)).count()
    }

    /// Checks that the tag agrees with the intersection with `sft_prompts`.
    ///
    /// Minimum overlap requires a disjoint set, except for the degenerate
    /// fallback where the set is contained in the SFT prompts because no
    /// extra prompts exist. Medium and diminished overlap require a shared
    /// prompt.
    pub fn check_overlap(&self, sft_prompts: &[Vec<Token>]) -> Result<()> {
        let shared = self.intersection_size(sft_prompts);
        let ok = match self.overlap_tag {
            OverlapTag::Minimum => shared == 0 || shared == self.len(),
            OverlapTag::Medium | OverlapTag::Diminished => shared > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "prompt set tagged {} shares {shared} of {} prompts with SFT",
                self.overlap_tag.as_str(),
                self.len()
            )))
        }
    }
}
