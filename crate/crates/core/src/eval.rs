//! AI-AI games, percentile-mean-rank curves, perplexity, win rate and
//! paired ablation reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuro::{ParamStore, Rng};
use crate::parallel::{try_map_range, ExecMode};
use crate::qbot::{argmin, bank_distances, percentile, DecodeMode, QBot};
use crate::training::{ranking_bank, teacher_forced_nll};
use crate::world::{Dialog, FeatureBank, SynthImage, World};

const GAME_STREAM: u64 = 0x47;
const WIN_STREAM: u64 = 0x57_49;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameRound {
    pub question: String,
    pub answer: String,
    pub guess: u32,
    pub percentile: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    pub target: u32,
    pub pool: Vec<u32>,
    pub caption: String,
    pub rounds: Vec<GameRound>,
    pub final_guess: u32,
    pub win: bool,
}

/// Anything that can play the questioner side of a game.
pub trait Agent: Sync {
    fn tag(&self) -> &str;

    fn play(&self, world: &World, pool: &FeatureBank, target: u32, rounds: usize, rng: &mut Rng) -> Result<GameRecord>;
}

pub struct QBotAgent<'a> {
    pub tag: String,
    pub bot: &'a QBot,
    pub params: &'a ParamStore,
    pub mode: DecodeMode,
}

impl<'a> QBotAgent<'a> {
    pub fn new(tag: impl Into<String>, bot: &'a QBot, params: &'a ParamStore) -> Self {
        QBotAgent {
            tag: tag.into(),
            bot,
            params,
            mode: DecodeMode::Greedy,
        }
    }
}

fn target_image<'w>(world: &'w World, pool: &FeatureBank, target: u32) -> Result<(&'w SynthImage, usize)> {
    let row = pool
        .position(target)
        .ok_or_else(|| Error::Data(format!("target {target} not in pool")))?;
    let image = world
        .image(target)
        .ok_or_else(|| Error::Data(format!("unknown image id {target}")))?;
    Ok((image, row))
}

/// Full greedy game: round t guesses the argmin at s_{t−1}, r_t ranks the
/// target at s_t, and the final guess is the argmin at s_n.
pub fn play_game(
    bot: &QBot,
    params: &ParamStore,
    world: &World,
    pool: &FeatureBank,
    target: u32,
    rounds: usize,
    mode: DecodeMode,
    rng: &mut Rng,
) -> Result<GameRecord> {
    let (image, row) = target_image(world, pool, target)?;
    let ranked = ranking_bank(bot, params, pool);
    let vocab = world.vocab();
    let mut state = bot.init_state(params, &image.caption)?;
    let mut d = bank_distances(&ranked, &state.h);
    let mut out = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let guess = argmin(&d);
        let (q, _) = bot.decode_question(params, &state, mode, rng)?;
        let a = world.spec.oracle_answer(image, &q, rng);
        state = bot.encode_round(params, &state, &q, &a, pool.id(guess), pool.row(guess))?;
        d = bank_distances(&ranked, &state.h);
        out.push(GameRound {
            question: vocab.render(&q),
            answer: vocab.render(&a),
            guess: pool.id(guess),
            percentile: percentile(&d, row),
        });
    }
    let final_guess = pool.id(argmin(&d));
    Ok(GameRecord {
        target,
        pool: pool.ids().to_vec(),
        caption: vocab.render(&image.caption),
        rounds: out,
        final_guess,
        win: final_guess == target,
    })
}

impl Agent for QBotAgent<'_> {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn play(&self, world: &World, pool: &FeatureBank, target: u32, rounds: usize, rng: &mut Rng) -> Result<GameRecord> {
        play_game(self.bot, self.params, world, pool, target, rounds, self.mode, rng)
    }
}

/// Upper bound: always names the target.
pub struct CheatAgent;

impl Agent for CheatAgent {
    fn tag(&self) -> &str {
        "cheat"
    }

    fn play(&self, world: &World, pool: &FeatureBank, target: u32, rounds: usize, _rng: &mut Rng) -> Result<GameRecord> {
        let (image, _) = target_image(world, pool, target)?;
        Ok(GameRecord {
            target,
            pool: pool.ids().to_vec(),
            caption: world.vocab().render(&image.caption),
            rounds: (0..rounds)
                .map(|_| GameRound {
                    question: String::new(),
                    answer: String::new(),
                    guess: target,
                    percentile: 1.0,
                })
                .collect(),
            final_guess: target,
            win: true,
        })
    }
}

/// Null model: a fresh random ranking every round.
pub struct RandomAgent;

impl Agent for RandomAgent {
    fn tag(&self) -> &str {
        "random"
    }

    fn play(&self, world: &World, pool: &FeatureBank, target: u32, rounds: usize, rng: &mut Rng) -> Result<GameRecord> {
        let (image, row) = target_image(world, pool, target)?;
        let mut out = Vec::with_capacity(rounds);
        let mut d: Vec<f64> = (0..pool.len()).map(|_| rng.uniform()).collect();
        for _ in 0..rounds {
            let guess = pool.id(argmin(&d));
            d = (0..pool.len()).map(|_| rng.uniform()).collect();
            out.push(GameRound {
                question: String::new(),
                answer: String::new(),
                guess,
                percentile: percentile(&d, row),
            });
        }
        let final_guess = pool.id(argmin(&d));
        Ok(GameRecord {
            target,
            pool: pool.ids().to_vec(),
            caption: world.vocab().render(&image.caption),
            rounds: out,
            final_guess,
            win: final_guess == target,
        })
    }
}

/// Where game pools and targets come from; identical for every agent given
/// the same seed, which is what makes evaluations paired.
pub struct GameSource<'w> {
    images: &'w [SynthImage],
    full: FeatureBank,
}

impl<'w> GameSource<'w> {
    pub fn new(images: &'w [SynthImage]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("no images to draw games from".into()));
        }
        Ok(GameSource {
            images,
            full: FeatureBank::new(images),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Pool of `pool_size` images (all of them when it covers the source) and a target.
    pub fn draw(&self, pool_size: usize, rng: &mut Rng) -> (FeatureBank, u32) {
        let pool = if pool_size >= self.images.len() {
            self.full.clone()
        } else {
            let mut idx = rng.sample_indices(self.images.len(), pool_size.max(1));
            idx.sort_unstable();
            let chosen: Vec<SynthImage> = idx.iter().map(|&i| self.images[i].clone()).collect();
            FeatureBank::new(&chosen)
        };
        let target = pool.id(rng.below(pool.len()));
        (pool, target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub tag: String,
    /// Mean r_t per round t = 1..n.
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub wins: usize,
    pub games: Vec<GameRecord>,
}

impl Curve {
    pub fn final_pmr(&self) -> f64 {
        self.mean.last().copied().unwrap_or(f64::NAN)
    }

    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.games.len().max(1) as f64
    }
}

/// Mean and standard error per position across equal-length rows.
pub fn mean_stderr(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let width = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![0.0; width];
    let mut se = vec![0.0; width];
    for t in 0..width {
        let m = rows.iter().map(|r| r[t]).sum::<f64>() / n as f64;
        mean[t] = m;
        if n > 1 {
            let var = rows.iter().map(|r| (r[t] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            se[t] = (var / n as f64).sqrt();
        }
    }
    (mean, se)
}

fn run_games(
    agent: &dyn Agent,
    world: &World,
    source: &GameSource,
    n_games: usize,
    pool_size: usize,
    rounds: usize,
    seed: u64,
    stream: u64,
    exec: ExecMode,
) -> Result<Curve> {
    if n_games == 0 {
        return Err(Error::Config("need at least one game".into()));
    }
    let games = try_map_range(exec, n_games, |i| {
        let mut rng = Rng::derive(seed, &[stream, i as u64]);
        let (pool, target) = source.draw(pool_size, &mut rng);
        agent.play(world, &pool, target, rounds, &mut rng)
    })?;
    let rows: Vec<Vec<f64>> = games
        .iter()
        .map(|g| g.rounds.iter().map(|r| r.percentile).collect())
        .collect();
    let (mean, stderr) = mean_stderr(&rows);
    Ok(Curve {
        tag: agent.tag().to_string(),
        mean,
        stderr,
        wins: games.iter().filter(|g| g.win).count(),
        games,
    })
}

/// Per-round mean percentile over `n_games` paired games.
#[allow(clippy::too_many_arguments)]
pub fn pmr_curve(
    agent: &dyn Agent,
    world: &World,
    source: &GameSource,
    n_games: usize,
    pool_size: usize,
    rounds: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<Curve> {
    run_games(agent, world, source, n_games, pool_size, rounds, seed, GAME_STREAM, exec)
}

/// Fraction of games whose final guess is the target.
#[allow(clippy::too_many_arguments)]
pub fn win_rate(
    agent: &dyn Agent,
    world: &World,
    source: &GameSource,
    pool_size: usize,
    n_games: usize,
    rounds: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<f64> {
    Ok(run_games(agent, world, source, n_games, pool_size, rounds, seed, WIN_STREAM, exec)?.win_rate())
}

/// exp of the mean teacher-forced −log p per question token.
pub fn perplexity(bot: &QBot, params: &ParamStore, world: &World, dialogs: &[Dialog], exec: ExecMode) -> Result<f64> {
    let (nll, tokens) = teacher_forced_nll(bot, params, world, &world.train_bank(), dialogs, exec)?;
    if tokens == 0 {
        return Err(Error::Data("perplexity needs at least one question token".into()));
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub games: usize,
    pub pool_size: usize,
    pub win_games: usize,
    pub win_pool: usize,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            games: 500,
            pool_size: 500,
            win_games: 500,
            win_pool: 20,
            seed: 1234,
            exec: ExecMode::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: String,
    pub pmr: Vec<f64>,
    pub pmr_stderr: Vec<f64>,
    pub perplexity: f64,
    pub win_rate: f64,
    pub games: usize,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn final_pmr(&self) -> f64 {
        self.pmr.last().copied().unwrap_or(f64::NAN)
    }
}

pub struct Report {
    pub rows: Vec<EvalReport>,
    pub curves: Vec<Curve>,
}

/// A model under evaluation.
pub struct Entry<'a> {
    pub tag: String,
    pub bot: &'a QBot,
    pub params: &'a ParamStore,
}

/// One row per entry, all on the same pools, targets and seeds.
pub fn ablation_report(
    entries: &[Entry],
    world: &World,
    dialogs: &[Dialog],
    config: &EvalConfig,
    config_echo: &serde_json::Value,
) -> Result<Report> {
    if entries.is_empty() {
        return Err(Error::Config("ablation report needs at least one model".into()));
    }
    let source = GameSource::new(&world.game)?;
    let mut rows = Vec::with_capacity(entries.len());
    let mut curves = Vec::with_capacity(entries.len());
    for e in entries {
        if e.bot.feature_dim() != world.feature_dim() {
            return Err(Error::Data(format!(
                "model {} expects feature dim {}, world has {}",
                e.tag,
                e.bot.feature_dim(),
                world.feature_dim()
            )));
        }
        let agent = QBotAgent::new(e.tag.clone(), e.bot, e.params);
        let rounds = e.bot.config().rounds;
        let curve = pmr_curve(&agent, world, &source, config.games, config.pool_size, rounds, config.seed, config.exec)?;
        let wr = win_rate(&agent, world, &source, config.win_pool, config.win_games, rounds, config.seed, config.exec)?;
        rows.push(EvalReport {
            tag: e.tag.clone(),
            pmr: curve.mean.clone(),
            pmr_stderr: curve.stderr.clone(),
            perplexity: perplexity(e.bot, e.params, world, dialogs, config.exec)?,
            win_rate: wr,
            games: config.games,
            seed: config.seed,
            config: config_echo.clone(),
        });
        curves.push(curve);
    }
    Ok(Report { rows, curves })
}

/// Directional checks against the supervised baseline tagged `sl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    /// (tag, final PMR ≥ SL final PMR) for every other tag.
    pub pmr_ge_sl: Vec<(String, bool)>,
    /// perplexity(na) > perplexity(alt), when both are present.
    pub na_ppl_gt_alt: Option<bool>,
    /// perplexity(word) > perplexity(alt), when both are present.
    pub word_ppl_gt_alt: Option<bool>,
}

pub fn trend(rows: &[EvalReport]) -> Trend {
    let find = |t: &str| rows.iter().find(|r| r.tag == t);
    let pmr_ge_sl = match find("sl") {
        Some(sl) => rows
            .iter()
            .filter(|r| r.tag != "sl")
            .map(|r| (r.tag.clone(), r.final_pmr() >= sl.final_pmr()))
            .collect(),
        None => Vec::new(),
    };
    let alt = find("alt");
    Trend {
        pmr_ge_sl,
        na_ppl_gt_alt: alt.zip(find("na")).map(|(a, n)| n.perplexity > a.perplexity),
        word_ppl_gt_alt: alt.zip(find("word")).map(|(a, w)| w.perplexity > a.perplexity),
    }
}

/// Writes report.csv, curves.csv, games.jsonl and, optionally, curves.svg.
pub fn write_report(dir: impl AsRef<Path>, report: &Report, svg: bool) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rounds = report.rows.iter().map(|r| r.pmr.len()).max().unwrap_or(0);

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["tag", "games", "seed", "perplexity", "win_rate", "final_pmr"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=rounds).map(|t| format!("pmr_{t}")));
    header.push("config".into());
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![
            r.tag.clone(),
            r.games.to_string(),
            r.seed.to_string(),
            r.perplexity.to_string(),
            r.win_rate.to_string(),
            r.final_pmr().to_string(),
        ];
        rec.extend(r.pmr.iter().map(|v| v.to_string()));
        rec.push(serde_json::to_string(&r.config)?);
        w.write_record(&rec)?;
    }
    write_bytes(&dir.join("report.csv"), w.into_inner().map_err(|e| Error::Data(e.to_string()))?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "tag", "pmr", "stderr"])?;
    for c in &report.curves {
        for (t, (m, s)) in c.mean.iter().zip(&c.stderr).enumerate() {
            w.write_record(&[(t + 1).to_string(), c.tag.clone(), m.to_string(), s.to_string()])?;
        }
    }
    write_bytes(&dir.join("curves.csv"), w.into_inner().map_err(|e| Error::Data(e.to_string()))?)?;

    #[derive(Serialize)]
    struct Line<'a> {
        tag: &'a str,
        game: usize,
        #[serde(flatten)]
        record: &'a GameRecord,
    }
    let mut buf = Vec::new();
    for c in &report.curves {
        for (i, g) in c.games.iter().enumerate() {
            serde_json::to_writer(&mut buf, &Line { tag: &c.tag, game: i, record: g })?;
            buf.push(b'\n');
        }
    }
    write_bytes(&dir.join("games.jsonl"), buf)?;

    if svg {
        let series: Vec<(String, Vec<f64>)> = report.curves.iter().map(|c| (c.tag.clone(), c.mean.clone())).collect();
        write_bytes(&dir.join("curves.svg"), curves_svg(&series).into_bytes())?;
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line chart of per-round PMR, one polyline and one marker per point per series.
pub fn curves_svg(series: &[(String, Vec<f64>)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let rounds = series.iter().map(|s| s.1.len()).max().unwrap_or(1).max(1);
    let finite = series.iter().flat_map(|s| s.1.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-6 {
        lo -= 0.01;
        hi += 0.01;
    }
    let x = |t: usize| pad + (w - 2.0 * pad) * if rounds > 1 { t as f64 / (rounds - 1) as f64 } else { 0.5 };
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);

    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = write!(
        s,
        r#"<rect width="{w}" height="{h}" fill="white"/><line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = write!(s, r#"<text x="{pad}" y="20" font-size="12">PMR by round ({lo:.4} to {hi:.4})</text>"#);
    for (i, (tag, vals)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = vals.iter().enumerate().map(|(t, v)| format!("{:.2},{:.2}", x(t), y(*v))).collect();
        let _ = write!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for (t, v) in vals.iter().enumerate() {
            let _ = write!(
                s,
                r#"<circle class="point" data-tag="{tag}" data-round="{}" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                t + 1,
                x(t),
                y(*v)
            );
        }
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{tag}</text>"#,
            w - pad - 60.0,
            pad + 14.0 * i as f64
        );
    }
    s.push_str("</svg>");
    s
}
