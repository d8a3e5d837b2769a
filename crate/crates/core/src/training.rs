//! Supervised pre-training, policy-improvement fine-tuning on the guessing
//! action, the alternating schedule, and word-level REINFORCE.

use std::borrow::Cow;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuro::{Checkpoint, Gradients, Graph, ParamStore, Partition, Rng, Sgd, SgdConfig, Var};
use crate::parallel::{try_map_range, ExecMode};
use crate::qbot::{argmin, bank_distances, percentile, DecodeMode, DialogState, QBot, QBotConfig, TapeState, TopK};
use crate::world::{Corpus, Dialog, FeatureBank, SynthImage, Token, World};

const SL_STREAM: u64 = 0x51;
const RL_STREAM: u64 = 0x52;
const WORD_STREAM: u64 = 0x57;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// RL on odd epochs, SL on even epochs.
    Alternate,
    RlOnly,
}

/// Fine-tuning variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Alt,
    Na,
    Word,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Alt, Variant::Na, Variant::Word];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Alt => "alt",
            Variant::Na => "na",
            Variant::Word => "word",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alt" => Ok(Variant::Alt),
            "na" => Ok(Variant::Na),
            "word" => Ok(Variant::Word),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected alt, na or word)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Sl,
    Rl,
    Word,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Sl => "sl",
            Phase::Rl => "rl",
            Phase::Word => "word",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the question log-likelihood term.
    pub alpha: f64,
    /// Weight of the state-to-target-feature MSE term.
    pub beta: f64,
    pub gamma: f64,
    pub sl_lr: f64,
    pub rl_lr: f64,
    pub word_lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    /// Pre-training epochs.
    pub epochs: usize,
    pub finetune_epochs: usize,
    /// Episodes per RL epoch.
    pub episodes: usize,
    /// Rollouts per candidate action when estimating Q.
    pub rollouts: usize,
    pub schedule: Schedule,
    /// Execute i* in the trajectory; when false it is only a supervision label.
    pub execute_improved: bool,
    /// Games used to monitor PMR after each epoch (0 disables).
    pub monitor_games: usize,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 10.0,
            gamma: 0.9,
            sl_lr: 0.02,
            rl_lr: 0.01,
            word_lr: 0.01,
            momentum: 0.9,
            clip_norm: 5.0,
            epochs: 15,
            finetune_epochs: 20,
            episodes: 50,
            rollouts: 1,
            schedule: Schedule::Alternate,
            execute_improved: true,
            monitor_games: 0,
            seed: 1234,
            exec: ExecMode::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie strictly in (0, 1), got {}", self.gamma)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("alpha and beta must be finite and non-negative".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        for (name, lr) in [("sl_lr", self.sl_lr), ("rl_lr", self.rl_lr), ("word_lr", self.word_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.rollouts == 0 {
            return Err(Error::Config("rollouts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

/// Σ_{t=1}^{n} γ^t r_t.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut g = 1.0;
    let mut total = 0.0;
    for r in rewards {
        g *= gamma;
        total += g * r;
    }
    total
}

/// Guesser-embedded view of a database, computed once per parameter setting.
pub fn ranking_bank<'b>(bot: &QBot, params: &ParamStore, database: &'b FeatureBank) -> Cow<'b, FeatureBank> {
    match bot.embedded_bank(params, database) {
        Some(e) => Cow::Owned(e),
        None => Cow::Borrowed(database),
    }
}

fn snapshot(g: &Graph, t: TapeState, transcript: Vec<(Vec<Token>, Vec<Token>)>, guesses: Vec<u32>) -> DialogState {
    DialogState {
        h: g.value(t.h).to_vec(),
        c: g.value(t.c).to_vec(),
        transcript,
        guesses,
    }
}

fn image(world: &World, id: u32) -> Result<&SynthImage> {
    world
        .image(id)
        .ok_or_else(|| Error::Data(format!("unknown image id {id}")))
}

// ---- supervised ------------------------------------------------------------

/// Per-dialog teacher-forced pieces of the joint loss.
pub struct DialogLoss {
    pub nll: Var,
    pub mse: Var,
    pub tokens: usize,
    pub states: usize,
}

/// Replays a dialog with teacher forcing. Round t's guess is the argmin at
/// s_{t−1} over `ranked`, and its raw feature feeds the encoder.
pub fn dialog_loss_tape(
    bot: &QBot,
    g: &mut Graph,
    world: &World,
    database: &FeatureBank,
    ranked: &FeatureBank,
    dialog: &Dialog,
) -> Result<DialogLoss> {
    let target = image(world, dialog.image_id)?;
    let z = g.input(&target.feature)?;
    let mut st = bot.init_tape(g, &dialog.caption)?;
    let mut nll_terms = Vec::with_capacity(dialog.rounds.len());
    let mut mse_terms = vec![g.mse(z, st.h)?];
    let mut tokens = 0;
    for round in &dialog.rounds {
        nll_terms.push(bot.question_nll_tape(g, st.h, &round.q)?);
        tokens += round.q.len();
        let row = argmin(&bank_distances(ranked, g.value(st.h)));
        st = bot.encode_round_tape(g, st, &round.q, &round.a, database.row(row))?;
        mse_terms.push(g.mse(z, st.h)?);
    }
    let nll = if nll_terms.is_empty() {
        g.zeros(1)
    } else {
        g.sum(&nll_terms)?
    };
    let states = mse_terms.len();
    Ok(DialogLoss {
        nll,
        mse: g.sum(&mse_terms)?,
        tokens,
        states,
    })
}

/// Summed teacher-forced −log p over question tokens, and the token count.
pub fn teacher_forced_nll(
    bot: &QBot,
    params: &ParamStore,
    world: &World,
    database: &FeatureBank,
    dialogs: &[Dialog],
    exec: ExecMode,
) -> Result<(f64, usize)> {
    let ranked = ranking_bank(bot, params, database);
    let per = try_map_range(exec, dialogs.len(), |i| -> Result<(f64, usize)> {
        let mut g = Graph::new(params);
        let l = dialog_loss_tape(bot, &mut g, world, database, &ranked, &dialogs[i])?;
        Ok((g.scalar(l.nll), l.tokens))
    })?;
    Ok(per.into_iter().fold((0.0, 0), |(a, n), (b, m)| (a + b, n + m)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlMetrics {
    /// Mean −log p per question token.
    pub nll: f64,
    /// Mean MSE per state.
    pub mse: f64,
    /// Mean joint loss per dialog.
    pub joint_loss: f64,
}

/// One pass over `dialogs` in a seed-determined order, one optimizer step per dialog.
#[allow(clippy::too_many_arguments)]
pub fn sl_epoch(
    bot: &QBot,
    params: &mut ParamStore,
    opt: &mut Sgd,
    world: &World,
    database: &FeatureBank,
    dialogs: &[Dialog],
    config: &TrainConfig,
    epoch: usize,
) -> Result<SlMetrics> {
    config.validate()?;
    if dialogs.is_empty() {
        return Err(Error::Data("supervised epoch needs a nonempty corpus".into()));
    }
    if world.feature_dim() != bot.feature_dim() {
        return Err(Error::Config(format!(
            "world feature dim {} does not match model feature dim {}",
            world.feature_dim(),
            bot.feature_dim()
        )));
    }
    let mut order: Vec<usize> = (0..dialogs.len()).collect();
    Rng::derive(config.seed, &[SL_STREAM, epoch as u64]).shuffle(&mut order);
    let learnable = bot.config().learnable_guesser;
    let shared = (!learnable).then(|| ranking_bank(bot, params, database).into_owned());
    let (mut nll, mut mse, mut joint, mut tokens, mut states) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for &i in &order {
        let grads = {
            let own;
            let ranked = match &shared {
                Some(b) => b,
                None => {
                    own = ranking_bank(bot, params, database).into_owned();
                    &own
                }
            };
            let mut g = Graph::new(params);
            let l = dialog_loss_tape(bot, &mut g, world, database, ranked, &dialogs[i])?;
            let a = g.scale(l.nll, config.alpha);
            let b = g.scale(l.mse, config.beta);
            let loss = g.add(a, b)?;
            nll += g.scalar(l.nll);
            mse += g.scalar(l.mse);
            joint += g.scalar(loss);
            tokens += l.tokens;
            states += l.states;
            g.backward(loss)?
        };
        params.accumulate(&grads);
        opt.step(params, config.sl_lr, &Partition::ALL)?;
    }
    Ok(SlMetrics {
        nll: nll / tokens.max(1) as f64,
        mse: mse / states as f64,
        joint_loss: joint / dialogs.len() as f64,
    })
}

// ---- policy improvement ----------------------------------------------------

/// One game in progress, with the ranking bank fixed for the current parameters.
pub struct Episode<'a> {
    pub bot: &'a QBot,
    pub params: &'a ParamStore,
    pub world: &'a World,
    pub database: &'a FeatureBank,
    pub ranked: &'a FeatureBank,
    pub target: &'a SynthImage,
    pub target_row: usize,
    pub gamma: f64,
}

impl<'a> Episode<'a> {
    pub fn new(
        bot: &'a QBot,
        params: &'a ParamStore,
        world: &'a World,
        database: &'a FeatureBank,
        ranked: &'a FeatureBank,
        target: u32,
        gamma: f64,
    ) -> Result<Self> {
        let target_row = database
            .position(target)
            .ok_or_else(|| Error::Data(format!("target {target} not in database")))?;
        Ok(Episode {
            bot,
            params,
            world,
            database,
            ranked,
            target: image(world, target)?,
            target_row,
            gamma,
        })
    }

    pub fn rounds(&self) -> usize {
        self.bot.config().rounds
    }

    pub fn distances(&self, s: &DialogState) -> Vec<f64> {
        bank_distances(self.ranked, &s.h)
    }

    pub fn reward(&self, d: &[f64]) -> f64 {
        percentile(d, self.target_row)
    }

    pub fn answer(&self, question: &[Token], rng: &mut Rng) -> Vec<Token> {
        self.world.spec.oracle_answer(self.target, question, rng)
    }

    fn advance(&self, prev: &DialogState, q: &[Token], a: &[Token], row: usize) -> Result<DialogState> {
        self.bot
            .encode_round(self.params, prev, q, a, self.database.id(row), self.database.row(row))
    }

    /// Mean discounted return-to-go Σ_{t'≥t} γ^{t'} r_{t'} after forcing the
    /// round-t guess to `candidate_row`, then following the greedy policy.
    pub fn estimate_q(
        &self,
        prev: &DialogState,
        question: &[Token],
        answer: &[Token],
        candidate_row: usize,
        rollouts: usize,
        rng: &Rng,
    ) -> Result<f64> {
        let n = self.rounds();
        let t = prev.round() + 1;
        if t > n {
            return Err(Error::Data(format!("episode already finished after {n} rounds")));
        }
        let mut total = 0.0;
        for k in 0..rollouts.max(1) {
            let mut rng = rng.fork(k as u64);
            let mut state = self.advance(prev, question, answer, candidate_row)?;
            let mut d = self.distances(&state);
            let mut disc = self.gamma.powi(t as i32);
            let mut ret = disc * self.reward(&d);
            for _ in t + 1..=n {
                let row = argmin(&d);
                let (q, _) = self.bot.decode_question(self.params, &state, DecodeMode::Greedy, &mut rng)?;
                let a = self.answer(&q, &mut rng);
                state = self.advance(&state, &q, &a, row)?;
                d = self.distances(&state);
                disc *= self.gamma;
                ret += disc * self.reward(&d);
            }
            total += ret;
        }
        Ok(total / rollouts.max(1) as f64)
    }

    /// Q estimates for every candidate and the index of i* (ties → lowest image id).
    #[allow(clippy::too_many_arguments)]
    pub fn select_improved_action(
        &self,
        prev: &DialogState,
        question: &[Token],
        answer: &[Token],
        candidates: &TopK,
        rollouts: usize,
        rng: &Rng,
        exec: ExecMode,
    ) -> Result<(usize, Vec<f64>)> {
        let qs = try_map_range(exec, candidates.rows.len(), |j| {
            self.estimate_q(prev, question, answer, candidates.rows[j], rollouts, rng)
        })?;
        let mut best = 0;
        for j in 1..qs.len() {
            if qs[j] > qs[best] || (qs[j] == qs[best] && candidates.ids[j] < candidates.ids[best]) {
                best = j;
            }
        }
        Ok((best, qs))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// s_{t−1}, the state the round's decisions were made from.
    pub state: Vec<f64>,
    pub question: Vec<Token>,
    pub answer: Vec<Token>,
    pub candidates: Vec<u32>,
    pub q_values: Vec<f64>,
    pub greedy: u32,
    pub improved: u32,
    pub executed: u32,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub target: u32,
    pub rounds: Vec<RoundRecord>,
    pub episode_return: f64,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.reward).collect()
    }

    pub fn final_reward(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.reward)
    }
}

pub struct EpisodeOutcome {
    pub trajectory: Trajectory,
    pub loss: f64,
    pub grads: Gradients,
}

/// Plays one game against `target`, regressing π toward i* at every round.
/// The loss graph never touches decoder parameters.
#[allow(clippy::too_many_arguments)]
pub fn rl_episode(
    bot: &QBot,
    params: &ParamStore,
    world: &World,
    database: &FeatureBank,
    ranked: &FeatureBank,
    target: u32,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    let ep = Episode::new(bot, params, world, database, ranked, target, config.gamma)?;
    let k = bot.config().top_k;
    if k > database.len() {
        return Err(Error::Config(format!("K={k} exceeds database size {}", database.len())));
    }
    let mut g = Graph::new(params);
    let mut st = bot.init_tape(&mut g, &ep.target.caption)?;
    let mut state = snapshot(&g, st, vec![], vec![]);
    let mut terms = Vec::with_capacity(ep.rounds());
    let mut rounds = Vec::with_capacity(ep.rounds());
    for t in 1..=ep.rounds() {
        let (q, _) = bot.decode_question(params, &state, DecodeMode::Sample, rng)?;
        let a = ep.answer(&q, rng);
        let topk = TopK::from_distances(&ep.distances(&state), ranked, k);
        let q_rng = rng.fork(t as u64);
        let (best, q_values) = ep.select_improved_action(&state, &q, &a, &topk, config.rollouts, &q_rng, config.exec)?;
        let feats: Vec<&[f64]> = topk.rows.iter().map(|&r| database.row(r)).collect();
        terms.push(bot.policy_nll_tape(&mut g, st.h, &feats, best)?);
        let exec_idx = if config.execute_improved { best } else { 0 };
        let row = topk.rows[exec_idx];
        let prev_h = state.h.clone();
        st = bot.encode_round_tape(&mut g, st, &q, &a, database.row(row))?;
        let mut transcript = std::mem::take(&mut state.transcript);
        transcript.push((q.clone(), a.clone()));
        let mut guesses = std::mem::take(&mut state.guesses);
        guesses.push(database.id(row));
        state = snapshot(&g, st, transcript, guesses);
        let reward = ep.reward(&ep.distances(&state));
        rounds.push(RoundRecord {
            state: prev_h,
            question: q,
            answer: a,
            candidates: topk.ids.clone(),
            q_values,
            greedy: topk.ids[0],
            improved: topk.ids[best],
            executed: topk.ids[exec_idx],
            reward,
        });
    }
    let loss = if terms.is_empty() { g.zeros(1) } else { g.sum(&terms)? };
    let grads = g.backward(loss)?;
    let rewards: Vec<f64> = rounds.iter().map(|r| r.reward).collect();
    Ok(EpisodeOutcome {
        loss: g.scalar(loss),
        grads,
        trajectory: Trajectory {
            target,
            episode_return: discounted_return(&rewards, config.gamma),
            rounds,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlMetrics {
    pub mean_return: f64,
    pub final_pmr: f64,
    pub loss: f64,
}

fn episode_target(database: &FeatureBank, rng: &mut Rng) -> u32 {
    database.id(rng.below(database.len()))
}

/// `config.episodes` sequential episodes, one encoder/guesser step each.
#[allow(clippy::too_many_arguments)]
pub fn rl_epoch(
    bot: &QBot,
    params: &mut ParamStore,
    opt: &mut Sgd,
    world: &World,
    database: &FeatureBank,
    config: &TrainConfig,
    epoch: usize,
) -> Result<RlMetrics> {
    config.validate()?;
    let (mut ret, mut fin, mut loss) = (0.0, 0.0, 0.0);
    for e in 0..config.episodes {
        let mut rng = Rng::derive(config.seed, &[RL_STREAM, epoch as u64, e as u64]);
        let target = episode_target(database, &mut rng);
        let out = {
            let ranked = ranking_bank(bot, params, database);
            rl_episode(bot, params, world, database, &ranked, target, config, &mut rng)?
        };
        params.accumulate(&out.grads);
        opt.step(params, config.rl_lr, &[Partition::Encoder, Partition::Guesser])?;
        ret += out.trajectory.episode_return;
        fin += out.trajectory.final_reward();
        loss += out.loss;
    }
    let n = config.episodes.max(1) as f64;
    Ok(RlMetrics {
        mean_return: ret / n,
        final_pmr: fin / n,
        loss: loss / n,
    })
}

// ---- word-level REINFORCE --------------------------------------------------

/// Discounted sums of per-round percentile improvements, G_t = Σ_{t'≥t} γ^{t'−t} Δ_{t'}.
pub fn improvement_returns(rewards: &[f64], baseline: f64, gamma: f64) -> Vec<f64> {
    let mut prev = baseline;
    let deltas: Vec<f64> = rewards
        .iter()
        .map(|&r| {
            let d = r - prev;
            prev = r;
            d
        })
        .collect();
    let mut out = vec![0.0; deltas.len()];
    let mut acc = 0.0;
    for t in (0..deltas.len()).rev() {
        acc = deltas[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// One REINFORCE episode over sampled questions; guesses are greedy.
#[allow(clippy::too_many_arguments)]
pub fn word_episode(
    bot: &QBot,
    params: &ParamStore,
    world: &World,
    database: &FeatureBank,
    ranked: &FeatureBank,
    target: u32,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    let ep = Episode::new(bot, params, world, database, ranked, target, config.gamma)?;
    let max_len = bot.config().max_question_len;
    let mut g = Graph::new(params);
    let mut st = bot.init_tape(&mut g, &ep.target.caption)?;
    let mut state = snapshot(&g, st, vec![], vec![]);
    let mut d = ep.distances(&state);
    let baseline = ep.reward(&d);
    let mut nlls = Vec::new();
    let mut rounds = Vec::new();
    for _ in 0..ep.rounds() {
        let row = argmin(&d);
        let (q, _) = bot.decode_question(params, &state, DecodeMode::Sample, rng)?;
        let scored = if q.len() > max_len { &q[..q.len() - 1] } else { &q[..] };
        nlls.push(bot.question_nll_tape(&mut g, st.h, scored)?);
        let a = ep.answer(&q, rng);
        let prev_h = state.h.clone();
        st = bot.encode_round_tape(&mut g, st, &q, &a, database.row(row))?;
        let mut transcript = std::mem::take(&mut state.transcript);
        transcript.push((q.clone(), a.clone()));
        let mut guesses = std::mem::take(&mut state.guesses);
        guesses.push(database.id(row));
        state = snapshot(&g, st, transcript, guesses);
        d = ep.distances(&state);
        let id = database.id(row);
        rounds.push(RoundRecord {
            state: prev_h,
            question: q,
            answer: a,
            candidates: vec![id],
            q_values: vec![],
            greedy: id,
            improved: id,
            executed: id,
            reward: ep.reward(&d),
        });
    }
    let rewards: Vec<f64> = rounds.iter().map(|r| r.reward).collect();
    let returns = improvement_returns(&rewards, baseline, config.gamma);
    let weighted: Vec<Var> = nlls.iter().zip(&returns).map(|(&l, &w)| g.scale(l, w)).collect();
    let loss = if weighted.is_empty() { g.zeros(1) } else { g.sum(&weighted)? };
    let grads = g.backward(loss)?;
    Ok(EpisodeOutcome {
        loss: g.scalar(loss),
        grads,
        trajectory: Trajectory {
            target,
            episode_return: discounted_return(&rewards, config.gamma),
            rounds,
        },
    })
}

/// REINFORCE on question tokens; updates encoder and decoder.
#[allow(clippy::too_many_arguments)]
pub fn word_rl_epoch(
    bot: &QBot,
    params: &mut ParamStore,
    opt: &mut Sgd,
    world: &World,
    database: &FeatureBank,
    config: &TrainConfig,
    epoch: usize,
) -> Result<RlMetrics> {
    config.validate()?;
    let (mut ret, mut fin, mut loss) = (0.0, 0.0, 0.0);
    for e in 0..config.episodes {
        let mut rng = Rng::derive(config.seed, &[WORD_STREAM, epoch as u64, e as u64]);
        let target = episode_target(database, &mut rng);
        let out = {
            let ranked = ranking_bank(bot, params, database);
            word_episode(bot, params, world, database, &ranked, target, config, &mut rng)?
        };
        params.accumulate(&out.grads);
        opt.step(params, config.word_lr, &[Partition::Encoder, Partition::Decoder])?;
        ret += out.trajectory.episode_return;
        fin += out.trajectory.final_reward();
        loss += out.loss;
    }
    let n = config.episodes.max(1) as f64;
    Ok(RlMetrics {
        mean_return: ret / n,
        final_pmr: fin / n,
        loss: loss / n,
    })
}

// ---- runs --------------------------------------------------------------

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub joint_loss: Option<f64>,
    pub nll: Option<f64>,
    pub mse: Option<f64>,
    pub mean_return: Option<f64>,
    pub final_pmr: Option<f64>,
    pub perplexity: Option<f64>,
}

impl EpochMetrics {
    fn empty(epoch: usize, phase: Phase) -> Self {
        EpochMetrics {
            epoch,
            phase,
            joint_loss: None,
            nll: None,
            mse: None,
            mean_return: None,
            final_pmr: None,
            perplexity: None,
        }
    }
}

/// Writes per-epoch checkpoints and the metrics CSV for one run.
pub struct RunOutput {
    pub dir: PathBuf,
    pub run_id: String,
    pub config: serde_json::Value,
    pub vocabulary: Vec<String>,
    pub rows: Vec<EpochMetrics>,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>, run_id: &str, config: serde_json::Value, vocabulary: Vec<String>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(RunOutput {
            dir,
            run_id: run_id.to_string(),
            config,
            vocabulary,
            rows: Vec::new(),
        })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(format!("{}.metrics.csv", self.run_id))
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("{}-epoch{epoch:03}.ckpt.json", self.run_id))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join(format!("{}.ckpt.json", self.run_id))
    }

    pub fn record(&mut self, row: EpochMetrics, params: &ParamStore, opt: &Sgd) -> Result<()> {
        let mut ck = Checkpoint::capture(params, &self.vocabulary, self.config.clone());
        ck.epoch = row.epoch;
        ck.phase = row.phase.to_string();
        ck.optimizer = Some(opt.velocity().to_vec());
        ck.save(self.checkpoint_path(row.epoch))?;
        ck.save(self.final_path())?;
        self.rows.push(row);
        write_metrics(&self.metrics_path(), &self.config, &self.rows)
    }

    /// Restores rows written before `epoch` (inclusive) so a resumed run
    /// reproduces the uninterrupted metrics file.
    pub fn resume_rows(&mut self, epoch: usize) -> Result<()> {
        let rows = read_metrics(self.metrics_path())?;
        self.rows = rows.into_iter().filter(|r| r.epoch <= epoch).collect();
        Ok(())
    }
}

pub fn write_metrics(path: &Path, config: &serde_json::Value, rows: &[EpochMetrics]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# config {}", serde_json::to_string(config)?).map_err(|e| Error::io(path, e))?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.starts_with('#') {
            body.push_str(&line);
            body.push('\n');
        }
    }
    let mut r = csv::Reader::from_reader(body.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<EpochMetrics>, _>>()?)
}

/// A model plus everything needed to train or evaluate it.
pub struct Trainer<'a> {
    pub bot: &'a QBot,
    pub world: &'a World,
    pub corpus: &'a Corpus,
    pub config: &'a TrainConfig,
    pub database: FeatureBank,
}

impl<'a> Trainer<'a> {
    pub fn new(bot: &'a QBot, world: &'a World, corpus: &'a Corpus, config: &'a TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            bot,
            world,
            corpus,
            config,
            database: world.train_bank(),
        })
    }

    /// Perplexity of the validation split (train split when validation is empty).
    pub fn validation_perplexity(&self, params: &ParamStore) -> Result<f64> {
        let dialogs = if self.corpus.validation.is_empty() {
            &self.corpus.train
        } else {
            &self.corpus.validation
        };
        let (nll, n) = teacher_forced_nll(self.bot, params, self.world, &self.database, dialogs, self.config.exec)?;
        Ok((nll / n.max(1) as f64).exp())
    }

    fn monitor_pmr(&self, params: &ParamStore, epoch: usize) -> Result<Option<f64>> {
        if self.config.monitor_games == 0 {
            return Ok(None);
        }
        let bank = self.world.game_bank();
        let ranked = ranking_bank(self.bot, params, &bank);
        let finals = try_map_range(self.config.exec, self.config.monitor_games, |i| -> Result<f64> {
            let mut rng = Rng::derive(self.config.seed, &[0x4d, epoch as u64, i as u64]);
            let target = bank.id(rng.below(bank.len()));
            let ep = Episode::new(self.bot, params, self.world, &bank, &ranked, target, self.config.gamma)?;
            let mut state = self.bot.init_state(params, &ep.target.caption)?;
            let mut d = ep.distances(&state);
            for _ in 0..ep.rounds() {
                let row = argmin(&d);
                let (q, _) = self.bot.decode_question(params, &state, DecodeMode::Greedy, &mut rng)?;
                let a = ep.answer(&q, &mut rng);
                state = ep.advance(&state, &q, &a, row)?;
                d = ep.distances(&state);
            }
            Ok(ep.reward(&d))
        })?;
        Ok(Some(finals.iter().sum::<f64>() / finals.len() as f64))
    }

    fn sl_row(&self, params: &mut ParamStore, opt: &mut Sgd, epoch: usize) -> Result<EpochMetrics> {
        let m = sl_epoch(
            self.bot,
            params,
            opt,
            self.world,
            &self.database,
            &self.corpus.train,
            self.config,
            epoch,
        )?;
        Ok(EpochMetrics {
            joint_loss: Some(m.joint_loss),
            nll: Some(m.nll),
            mse: Some(m.mse),
            perplexity: Some(self.validation_perplexity(params)?),
            final_pmr: self.monitor_pmr(params, epoch)?,
            ..EpochMetrics::empty(epoch, Phase::Sl)
        })
    }

    fn rl_row(&self, params: &mut ParamStore, opt: &mut Sgd, epoch: usize, phase: Phase) -> Result<EpochMetrics> {
        let m = match phase {
            Phase::Word => word_rl_epoch(self.bot, params, opt, self.world, &self.database, self.config, epoch)?,
            _ => rl_epoch(self.bot, params, opt, self.world, &self.database, self.config, epoch)?,
        };
        Ok(EpochMetrics {
            joint_loss: Some(m.loss),
            mean_return: Some(m.mean_return),
            final_pmr: Some(m.final_pmr),
            perplexity: Some(self.validation_perplexity(params)?),
            ..EpochMetrics::empty(epoch, phase)
        })
    }

    fn emit(&self, out: &mut Option<&mut RunOutput>, row: &EpochMetrics, params: &ParamStore, opt: &Sgd) -> Result<()> {
        if let Some(o) = out {
            o.record(row.clone(), params, opt)?;
        }
        Ok(())
    }

    /// Supervised epochs `start+1..=config.epochs`. Epoch 0 (when `start` is 0)
    /// records the initial parameters.
    pub fn pretrain(
        &self,
        params: &mut ParamStore,
        opt: &mut Sgd,
        start: usize,
        mut out: Option<&mut RunOutput>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut rows = Vec::new();
        if start == 0 {
            let row = EpochMetrics {
                perplexity: Some(self.validation_perplexity(params)?),
                ..EpochMetrics::empty(0, Phase::Init)
            };
            self.emit(&mut out, &row, params, opt)?;
            rows.push(row);
        }
        for epoch in start + 1..=self.config.epochs {
            let row = self.sl_row(params, opt, epoch)?;
            self.emit(&mut out, &row, params, opt)?;
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn phase_for(&self, variant: Variant, epoch: usize) -> Phase {
        match variant {
            Variant::Word => Phase::Word,
            Variant::Na => Phase::Rl,
            Variant::Alt => match self.config.schedule {
                Schedule::RlOnly => Phase::Rl,
                Schedule::Alternate if epoch % 2 == 1 => Phase::Rl,
                Schedule::Alternate => Phase::Sl,
            },
        }
    }

    /// Fine-tunes from pre-trained parameters with a fresh optimizer.
    pub fn finetune(
        &self,
        params: &mut ParamStore,
        variant: Variant,
        mut out: Option<&mut RunOutput>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut opt = Sgd::new(self.config.sgd());
        let mut rows = Vec::new();
        for epoch in 1..=self.config.finetune_epochs {
            let row = match self.phase_for(variant, epoch) {
                Phase::Sl => self.sl_row(params, &mut opt, epoch)?,
                phase => self.rl_row(params, &mut opt, epoch, phase)?,
            };
            self.emit(&mut out, &row, params, &opt)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Run configuration echo stored in checkpoints and metrics files.
pub fn config_echo(qbot: &QBotConfig, train: &TrainConfig, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "qbot": qbot,
        "train": train,
        "run": extra,
    })
}

/// Rebuilds the model a checkpoint was trained with.
pub fn load_model(ck: &Checkpoint, feature_dim: usize) -> Result<(QBot, ParamStore)> {
    let cfg: QBotConfig = match ck.config.get("qbot") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => QBotConfig::default(),
    };
    let store = ck.to_store()?;
    let bot = QBot::bind(cfg, ck.vocabulary.len(), feature_dim, &store)?;
    Ok((bot, store))
}
