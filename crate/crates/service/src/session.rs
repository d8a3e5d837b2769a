//! Game sessions where a human answers and the questioner guesses.

use std::path::Path;

use altq_core::eval::{play_game, GameRecord, GameRound, GameSource};
use altq_core::neuro::{Checkpoint, ParamStore, Rng};
use altq_core::qbot::{argmin, bank_distances, percentile, DecodeMode, DialogState, QBot};
use altq_core::training::{load_model, ranking_bank};
use altq_core::world::{render_glyph, FeatureBank, SynthImage, Token, World, UNKNOWN_ANSWER};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

const POOL_STREAM: u64 = 0x50;
const COMPARE_STREAM: u64 = 0x43;

#[derive(Debug, Clone, PartialEq)]
pub enum SessionError {
    Invalid(String),
    NotFound(String),
    Conflict(String),
    Internal(String),
}

impl std::fmt::Display for SessionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SessionError::Invalid(m) | SessionError::NotFound(m) | SessionError::Conflict(m) | SessionError::Internal(m) => {
                f.write_str(m)
            }
        }
    }
}

impl std::error::Error for SessionError {}

impl From<altq_core::Error> for SessionError {
    fn from(e: altq_core::Error) -> Self {
        SessionError::Internal(e.to_string())
    }
}

pub type Timestamp = DateTime<Utc>;

pub type Result<T, E = SessionError> = std::result::Result<T, E>;

/// A checkpoint loaded once and shared read-only by every session.
pub struct Model {
    pub tag: String,
    pub checkpoint: String,
    pub bot: QBot,
    pub params: ParamStore,
}

impl Model {
    pub fn new(tag: impl Into<String>, checkpoint: impl Into<String>, bot: QBot, params: ParamStore) -> Self {
        Model {
            tag: tag.into(),
            checkpoint: checkpoint.into(),
            bot,
            params,
        }
    }

    pub fn load(tag: &str, path: &Path, world: &World) -> altq_core::Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.vocabulary != world.vocab().tokens() {
            return Err(altq_core::Error::Data(format!(
                "checkpoint {} was trained on a different vocabulary",
                path.display()
            )));
        }
        let (bot, params) = load_model(&ck, world.feature_dim())?;
        Ok(Model::new(tag, path.display().to_string(), bot, params))
    }

    pub fn rounds(&self) -> usize {
        self.bot.config().rounds
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    AwaitingRating,
    Finished,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rating {
    pub fluency: u8,
    pub relevance: u8,
    pub comprehension: u8,
    pub diversity: u8,
}

impl Rating {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fluency", self.fluency),
            ("relevance", self.relevance),
            ("comprehension", self.comprehension),
            ("diversity", self.diversity),
        ] {
            if !(1..=5).contains(&v) {
                return Err(SessionError::Invalid(format!("{name} must be between 1 and 5, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
    pub guess: u32,
    pub percentile: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reveal {
    pub guess_id: u32,
    pub win: bool,
}

/// Full server-side game state; this is what the store persists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub model: String,
    pub checkpoint: String,
    pub seed: u64,
    pub pool: Vec<u32>,
    pub target: u32,
    pub caption: String,
    pub rounds: usize,
    pub round: usize,
    pub transcript: Vec<Turn>,
    /// Pending question tokens; empty once the game is over.
    pub question: Vec<Token>,
    pub state: DialogState,
    pub status: Status,
    pub reveal: Option<Reveal>,
    pub rating: Option<Rating>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// Pool and target for a game seed; independent of the model.
pub fn draw_pool(world: &World, pool_size: usize, seed: u64) -> Result<(FeatureBank, u32)> {
    let source = GameSource::new(&world.game)?;
    Ok(source.draw(pool_size, &mut Rng::derive(seed, &[POOL_STREAM])))
}

fn image(world: &World, id: u32) -> Result<&SynthImage> {
    world
        .image(id)
        .ok_or_else(|| SessionError::Internal(format!("image {id} missing from world")))
}

fn bank_of(world: &World, ids: &[u32]) -> Result<FeatureBank> {
    let images = ids.iter().map(|&id| image(world, id).cloned()).collect::<Result<Vec<_>>>()?;
    Ok(FeatureBank::new(&images))
}

/// Tokens the questioner receives for a free-text answer.
pub fn answer_tokens(world: &World, text: &str) -> Vec<Token> {
    let text = text.trim();
    world.vocab().tokenize(if text.is_empty() { UNKNOWN_ANSWER } else { text })
}

fn greedy_question(model: &Model, state: &DialogState) -> Result<Vec<Token>> {
    Ok(model
        .bot
        .decode_question(&model.params, state, DecodeMode::Greedy, &mut Rng::new(0))?
        .0)
}

pub enum AnswerOutcome {
    Question { question: String, guess: u32 },
    Reveal(Reveal),
}

impl Session {
    pub fn start(id: String, world: &World, model: &Model, seed: u64, pool_size: usize, now: DateTime<Utc>) -> Result<Self> {
        let (pool, target) = draw_pool(world, pool_size, seed)?;
        let target_image = image(world, target)?;
        let state = model.bot.init_state(&model.params, &target_image.caption)?;
        let question = greedy_question(model, &state)?;
        Ok(Session {
            id,
            model: model.tag.clone(),
            checkpoint: model.checkpoint.clone(),
            seed,
            pool: pool.ids().to_vec(),
            target,
            caption: world.vocab().render(&target_image.caption),
            rounds: model.rounds(),
            round: 0,
            transcript: Vec::new(),
            question,
            state,
            status: Status::Active,
            reveal: None,
            rating: None,
            created_at: now,
            updated_at: now,
        })
    }

    pub fn pending_question(&self, world: &World) -> Option<String> {
        (self.status == Status::Active).then(|| world.vocab().render(&self.question))
    }

    pub fn answer(&mut self, world: &World, model: &Model, text: &str, now: DateTime<Utc>) -> Result<AnswerOutcome> {
        if self.status != Status::Active {
            return Err(SessionError::Conflict(format!("game {} is no longer taking answers", self.id)));
        }
        let pool = bank_of(world, &self.pool)?;
        let ranked = ranking_bank(&model.bot, &model.params, &pool);
        let target_row = pool
            .position(self.target)
            .ok_or_else(|| SessionError::Internal("target not in pool".into()))?;
        let guess_row = argmin(&bank_distances(&ranked, &self.state.h));
        let answer = answer_tokens(world, text);
        let state = model.bot.encode_round(
            &model.params,
            &self.state,
            &self.question,
            &answer,
            pool.id(guess_row),
            pool.row(guess_row),
        )?;
        let d = bank_distances(&ranked, &state.h);
        self.transcript.push(Turn {
            question: world.vocab().render(&self.question),
            answer: world.vocab().render(&answer),
            guess: pool.id(guess_row),
            percentile: percentile(&d, target_row),
        });
        self.state = state;
        self.round += 1;
        self.updated_at = now;
        if self.round < self.rounds {
            self.question = greedy_question(model, &self.state)?;
            return Ok(AnswerOutcome::Question {
                question: world.vocab().render(&self.question),
                guess: pool.id(argmin(&d)),
            });
        }
        self.question.clear();
        let guess_id = pool.id(argmin(&d));
        let reveal = Reveal {
            guess_id,
            win: guess_id == self.target,
        };
        self.reveal = Some(reveal.clone());
        self.status = Status::AwaitingRating;
        Ok(AnswerOutcome::Reveal(reveal))
    }

    pub fn rate(&mut self, rating: Rating, now: DateTime<Utc>) -> Result<()> {
        rating.validate()?;
        if self.status != Status::AwaitingRating {
            return Err(SessionError::Conflict(format!("game {} is not awaiting a rating", self.id)));
        }
        self.rating = Some(rating);
        self.status = Status::Finished;
        self.updated_at = now;
        Ok(())
    }

    pub fn record(&self) -> GameRecord {
        let final_guess = self.reveal.as_ref().map_or(u32::MAX, |r| r.guess_id);
        GameRecord {
            target: self.target,
            pool: self.pool.clone(),
            caption: self.caption.clone(),
            rounds: self
                .transcript
                .iter()
                .map(|t| GameRound {
                    question: t.question.clone(),
                    answer: t.answer.clone(),
                    guess: t.guess,
                    percentile: t.percentile,
                })
                .collect(),
            final_guess,
            win: final_guess == self.target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub id: u32,
    pub svg: String,
}

pub fn glyph(world: &World, id: u32) -> Result<Glyph> {
    Ok(Glyph {
        id,
        svg: render_glyph(&world.spec, image(world, id)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnView {
    pub question: String,
    pub answer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guess: Option<u32>,
}

/// What the client is allowed to see of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: String,
    pub model: String,
    pub seed: u64,
    pub status: Status,
    pub round: usize,
    pub rounds: usize,
    pub caption: String,
    pub pool: Vec<Glyph>,
    pub target: Glyph,
    pub transcript: Vec<TurnView>,
    pub question: Option<String>,
    pub reveal: Option<Reveal>,
    pub rating: Option<Rating>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl Session {
    pub fn snapshot(&self, world: &World, show_guesses: bool) -> Result<Snapshot> {
        let reveal_guesses = show_guesses || self.status != Status::Active;
        Ok(Snapshot {
            id: self.id.clone(),
            model: self.model.clone(),
            seed: self.seed,
            status: self.status,
            round: self.round,
            rounds: self.rounds,
            caption: self.caption.clone(),
            pool: self.pool.iter().map(|&id| glyph(world, id)).collect::<Result<_>>()?,
            target: glyph(world, self.target)?,
            transcript: self
                .transcript
                .iter()
                .map(|t| TurnView {
                    question: t.question.clone(),
                    answer: t.answer.clone(),
                    guess: reveal_guesses.then_some(t.guess),
                })
                .collect(),
            question: self.pending_question(world),
            reveal: self.reveal.clone(),
            rating: self.rating,
            created_at: self.created_at,
            updated_at: self.updated_at,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRound {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareTranscript {
    pub label: String,
    pub rounds: Vec<CompareRound>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareBundle {
    pub seed: u64,
    pub caption: String,
    pub target: Glyph,
    pub transcripts: Vec<CompareTranscript>,
}

/// Opaque labels A, B, C, … assigned to `tags` in a seed-dependent order.
pub fn compare_labels(tags: &[String], seed: u64) -> Vec<(String, String)> {
    let mut order: Vec<usize> = (0..tags.len()).collect();
    Rng::derive(seed, &[COMPARE_STREAM]).shuffle(&mut order);
    order
        .iter()
        .enumerate()
        .map(|(i, &m)| (((b'A' + i as u8) as char).to_string(), tags[m].clone()))
        .collect()
}

/// AI-AI games of every model on the same pool and target, under anonymous labels.
pub fn compare_bundle(world: &World, models: &[&Model], seed: u64, pool_size: usize) -> Result<CompareBundle> {
    let (pool, target) = draw_pool(world, pool_size, seed)?;
    let tags: Vec<String> = models.iter().map(|m| m.tag.clone()).collect();
    let mut transcripts = Vec::with_capacity(models.len());
    for (label, tag) in compare_labels(&tags, seed) {
        let m = models.iter().find(|m| m.tag == tag).expect("label maps to a model");
        let rec = play_game(
            &m.bot,
            &m.params,
            world,
            &pool,
            target,
            m.rounds(),
            DecodeMode::Greedy,
            &mut Rng::derive(seed, &[COMPARE_STREAM, 1]),
        )?;
        transcripts.push(CompareTranscript {
            label,
            rounds: rec
                .rounds
                .into_iter()
                .map(|r| CompareRound {
                    question: r.question,
                    answer: r.answer,
                })
                .collect(),
        });
    }
    Ok(CompareBundle {
        seed,
        caption: world.vocab().render(&image(world, target)?.caption),
        target: glyph(world, target)?,
        transcripts,
    })
}
