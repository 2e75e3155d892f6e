//! The two-stage pipeline held in memory: world and data, pretraining, SFT,
//! PPO on the coherent reward, and evaluation. Stages run one at a time so a
//! caller can persist each result before the next begins.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::eval::{evaluate, oracle_reward_baseline, EvalReport, LengthStudy};
use crate::jsonl;
use crate::policy::{FrozenPolicy, Policy, Role};
use crate::ppo::{run_ppo, IterationMetrics, PpoInputs, PpoOutcome};
use crate::reward::{Granularity, KlReference, RewardSpec};
use crate::scalar::Scalar;
use crate::seeds::{self, tag};
use crate::sequence::Token;
use crate::sft::{pretrain, sft, sft_extended, split_heldout, HeldOut, HeldOutSplit, TrainOutcome};
use crate::world::{build_world, DemonstrationSet, OverlapTag, PromptSet, TokenWorld};

use super::config::{ExperimentConfig, Overlap, Stage};

/// Prompt sets and demonstrations derived from the config.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub sft_prompts: PromptSet,
    pub demos: DemonstrationSet,
    /// Second-pass annotated demonstrations (medium overlap).
    pub stage2_demos: Option<DemonstrationSet>,
    pub ppo_prompts: PromptSet,
    pub heldout: HeldOutSplit,
    /// Prompts seen during SFT.
    pub seen: Vec<Vec<Token>>,
    /// PPO prompts never seen during SFT; equal to `seen` when there are none.
    pub unseen: Vec<Vec<Token>>,
}

pub struct Pipeline<F: Scalar> {
    pub cfg: ExperimentConfig,
    pub world: TokenWorld<F>,
    data: DataSplit,
    pub pretrained: Option<TrainOutcome<F>>,
    pub sft: Option<TrainOutcome<F>>,
    pub sft_extended: Option<TrainOutcome<F>>,
    pub ppo: Option<PpoOutcome<F>>,
    pub oracle_ppo: Option<Vec<IterationMetrics>>,
    pub oracle_report: Option<EvalReport>,
    pub reports: Vec<EvalReport>,
    pub length_study: Option<LengthStudy>,
}

fn dedup(prompts: Vec<Vec<Token>>) -> Vec<Vec<Token>> {
    let mut seen = HashSet::new();
    prompts.into_iter().filter(|p| seen.insert(p.clone())).collect()
}

fn build_data<F: Scalar>(cfg: &ExperimentConfig, world: &TokenWorld<F>) -> Result<DataSplit> {
    let d = &cfg.data;
    let seed = cfg.seed;
    let (sft_prompts, mut demos) = match &d.demos_file {
        Some(path) => {
            let demos = jsonl::read_demonstrations(path, "file")?;
            demos.validate(world)?;
            (PromptSet::new(demos.prompts(), d.overlap.tag()), demos)
        }
        None => {
            let a = world.sample_prompt_set(d.sft_prompts, &[], d.overlap.tag(), seeds::derive(seed, tag::PROMPTS));
            let demos = world.sample_demonstrations(&a, d.demos, seeds::derive(seed, tag::DEMOS))?;
            (a, demos)
        }
    };
    let heldout = split_heldout(
        world,
        &demos,
        d.heldout_threshold,
        d.heldout_fraction,
        d.heldout_prompts,
        d.heldout_demos,
        seeds::derive(seed, tag::HELDOUT),
    )?;
    demos = heldout.train.clone();
    let seen = demos.prompts();
    // Fresh PPO prompts avoid both the SFT prompts and the held-out ones.
    let mut exclude = seen.clone();
    exclude.extend(heldout.heldout_prompts.iter().cloned());
    let extra = world
        .sample_prompt_set(d.extra_ppo_prompts, &exclude, d.overlap.tag(), seeds::derive(seed, tag::PROMPTS + 1))
        .prompts;

    let mut stage2_demos = None;
    let ppo_list = match d.overlap {
        Overlap::Minimum => {
            if extra.is_empty() {
                seen.clone()
            } else {
                extra
            }
        }
        Overlap::Medium => {
            let c: Vec<Vec<Token>> = seen.iter().take(d.annotated_prompts).cloned().collect();
            let cset = PromptSet::new(c.clone(), OverlapTag::Medium);
            stage2_demos = Some(world.sample_demonstrations(
                &cset,
                d.annotated_demos,
                seeds::derive(seed, tag::DEMOS_STAGE2),
            )?);
            dedup(c.into_iter().chain(extra).collect())
        }
        Overlap::Diminished => {
            demos.pairs.truncate(d.diminish_demos.min(demos.len()));
            dedup(demos.prompts().into_iter().chain(extra).collect())
        }
    };
    let seen = demos.prompts();
    let ppo_prompts = match &d.ppo_prompts_file {
        Some(path) => jsonl::read_prompts(path, d.overlap.tag())?,
        None => PromptSet::new(ppo_list, d.overlap.tag()),
    };
    let mut sft_all = seen.clone();
    if let Some(s2) = &stage2_demos {
        sft_all.extend(s2.prompts());
    }
    let sft_all = dedup(sft_all);
    ppo_prompts.check_overlap(&sft_all)?;
    let known: HashSet<&Vec<Token>> = sft_all.iter().collect();
    let unseen: Vec<Vec<Token>> = ppo_prompts.prompts.iter().filter(|p| !known.contains(p)).cloned().collect();
    let unseen = if unseen.is_empty() { seen.clone() } else { unseen };
    Ok(DataSplit {
        sft_prompts: PromptSet::new(sft_all.clone(), sft_prompts.overlap_tag),
        demos,
        stage2_demos,
        ppo_prompts,
        heldout,
        seen: sft_all,
        unseen,
    })
}

impl<F: Scalar> Pipeline<F> {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let world = build_world(&cfg.world, cfg.world_seed())?;
        let data = build_data(cfg, &world)?;
        Ok(Self {
            cfg: cfg.clone(),
            world,
            data,
            pretrained: None,
            sft: None,
            sft_extended: None,
            ppo: None,
            oracle_ppo: None,
            oracle_report: None,
            reports: Vec::new(),
            length_study: None,
        })
    }

    pub fn data(&self) -> &DataSplit {
        &self.data
    }

    /// Runs every configured stage in canonical order.
    pub fn run_all(&mut self) -> Result<()> {
        let mut stages = self.cfg.stages.clone();
        stages.sort();
        for s in stages {
            self.run_stage(s)?;
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Pretrain => self.stage_pretrain(),
            Stage::Sft => self.stage_sft(),
            Stage::SftExtended => self.stage_sft_extended(),
            Stage::Ppo => {
                let out = self.run_srppo(self.cfg.reward.granularity)?;
                self.ppo = Some(out);
                Ok(())
            }
            Stage::OraclePpo => self.stage_oracle(),
            Stage::Eval => self.stage_eval(),
            Stage::LengthStudy => {
                let token_wise = self.run_srppo(Granularity::TokenWise)?.metrics;
                let sequence_at_eos = self.run_srppo(Granularity::SequenceAtEos)?.metrics;
                self.length_study = Some(LengthStudy {
                    token_wise,
                    sequence_at_eos,
                });
                Ok(())
            }
        }
    }

    fn heldout(&self) -> HeldOut<'_, F> {
        HeldOut {
            world: &self.world,
            prompts: &self.data.heldout.heldout_prompts,
        }
    }

    fn stage_pretrain(&mut self) -> Result<()> {
        let seed = seeds::derive(self.cfg.seed, tag::PRETRAIN);
        let init = Policy::new(
            self.cfg.policy.architecture,
            self.world.vocab(),
            Role::Pretrained,
            seeds::derive(self.cfg.seed, tag::POLICY_INIT),
        )?;
        let out = pretrain(init, &self.world, &self.cfg.pretrain.as_sft(seed), self.cfg.pretrain.samples, seed)?;
        self.pretrained = Some(out);
        Ok(())
    }

    fn pretrained_snapshot(&self) -> Result<&FrozenPolicy<F>> {
        self.pretrained
            .as_ref()
            .map(|o| &o.policy)
            .ok_or_else(|| Error::Config("stage requires a pretrained policy".into()))
    }

    pub fn sft_snapshot(&self) -> Result<&FrozenPolicy<F>> {
        self.sft
            .as_ref()
            .map(|o| &o.policy)
            .ok_or_else(|| Error::Config("stage requires an SFT policy".into()))
    }

    fn sft_config(&self, tag_value: u64) -> crate::sft::SftConfig {
        let mut c = self.cfg.sft.clone();
        c.shuffle_seed = seeds::derive(self.cfg.seed ^ c.shuffle_seed, tag_value);
        c
    }

    fn stage_sft(&mut self) -> Result<()> {
        let pt = self.pretrained_snapshot()?.clone();
        let mut out = sft(&pt, &self.data.demos, &self.sft_config(tag::SFT), Some(self.heldout()))?;
        if let Some(s2) = &self.data.stage2_demos {
            let second = sft(&out.policy, s2, &self.sft_config(tag::SFT_STAGE2), Some(self.heldout()))?;
            let offset = out.log.last().map(|r| (r.step, r.epoch)).unwrap_or((0, 0));
            out.log.extend(second.log.into_iter().skip(1).map(|mut r| {
                r.step += offset.0;
                r.epoch += offset.1;
                r
            }));
            out.policy = second.policy;
        }
        self.sft = Some(out);
        Ok(())
    }

    fn stage_sft_extended(&mut self) -> Result<()> {
        let s = self.sft_snapshot()?.clone();
        let out = sft_extended(
            &s,
            &self.data.demos,
            self.cfg.sft_extended.extra_epochs,
            &self.sft_config(tag::SFT_EXTENDED),
            Some(self.heldout()),
        )?;
        self.sft_extended = Some(out);
        Ok(())
    }

    /// SRPPO from the SFT snapshot with the given reward granularity.
    pub fn run_srppo(&self, granularity: Granularity) -> Result<PpoOutcome<F>> {
        let s = self.sft_snapshot()?;
        let pt = self.pretrained_snapshot()?;
        let reward = RewardSpec::new(s.clone(), pt.clone(), granularity)?.with_clip(self.cfg.reward.clip.map(F::of));
        let reference = match self.cfg.ppo.kl_reference {
            KlReference::Sft => s,
            KlReference::Pretrained => pt,
        };
        let mut ppo = self.cfg.ppo.clone();
        // Both granularities share one stream so the length study compares
        // like with like.
        ppo.seed = seeds::derive(self.cfg.seed ^ self.cfg.ppo.seed, tag::PPO);
        run_ppo(
            PpoInputs {
                sft: s,
                reference,
                reward: &reward,
                prompts: &self.data.ppo_prompts,
                max_len: self.world.max_response_length(),
            },
            &ppo,
        )
    }

    fn eval_seed(&self) -> u64 {
        seeds::derive(self.cfg.seed, tag::EVAL)
    }

    fn stage_oracle(&mut self) -> Result<()> {
        let s = self.sft_snapshot()?.clone();
        let mut ppo = self.cfg.ppo.clone();
        ppo.seed = seeds::derive(self.cfg.seed ^ ppo.seed, tag::PPO_ORACLE);
        let (report, metrics) = oracle_reward_baseline(
            &s,
            &self.world,
            &self.data.ppo_prompts,
            &ppo,
            &self.data.seen,
            &self.data.unseen,
            &self.data.heldout.heldout_demos,
            &self.cfg.eval,
            self.eval_seed(),
        )?;
        self.oracle_ppo = Some(metrics);
        self.oracle_report = Some(report);
        Ok(())
    }

    fn stage_eval(&mut self) -> Result<()> {
        let mut methods: Vec<(&str, &FrozenPolicy<F>)> = Vec::new();
        if let Some(p) = &self.pretrained {
            methods.push(("pretrained", &p.policy));
        }
        if let Some(p) = &self.sft {
            methods.push(("sft", &p.policy));
        }
        if let Some(p) = &self.sft_extended {
            methods.push(("sft_extended", &p.policy));
        }
        if let Some(p) = &self.ppo {
            methods.push(("srppo", &p.actor));
        }
        let mut reports = Vec::with_capacity(methods.len() + 1);
        for (name, policy) in methods {
            reports.push(evaluate(
                name,
                policy,
                &self.world,
                &self.data.seen,
                &self.data.unseen,
                &self.data.heldout.heldout_demos,
                &self.cfg.eval,
                self.eval_seed(),
            )?);
        }
        if let Some(r) = &self.oracle_report {
            reports.push(r.clone());
        }
        self.reports = reports;
        Ok(())
    }
}
