use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use altq_core::eval::{ablation_report, curves_svg, write_report, Entry, Report};
use altq_core::neuro::{Checkpoint, Rng, Sgd};
use altq_core::qbot::QBot;
use altq_core::training::{config_echo, load_model, EpochMetrics, RunOutput, Trainer, Variant};
use altq_core::world::{build_corpus, Corpus, World};
use altq_service::session::Model;
use altq_service::AppState;

use crate::play::{play, PlayOutcome};
use crate::{CliError, RunConfig};

pub const WORLD_FILE: &str = "world.json";
pub const CORPUS_DIR: &str = "corpus";
pub const SL_RUN: &str = "sl";
pub const EVAL_DIR: &str = "eval";

fn mkdir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Env(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Env(format!("{}: {e}", path.display())))
}

/// World and corpus files under `out`.
pub fn datagen(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    mkdir(&cfg.out)?;
    let world = World::generate(cfg.world.clone(), cfg.seed)?;
    let corpus = build_corpus(&world, cfg.corpus.dialogs, cfg.corpus.rounds, cfg.corpus.fractions, cfg.seed)?;
    corpus.validate(&world)?;
    world.save(cfg.out.join(WORLD_FILE))?;
    corpus.save(&world, cfg.out.join(CORPUS_DIR))?;
    write_json(&cfg.out.join("datagen.json"), &cfg.echo("datagen"))
}

pub fn load_world(cfg: &RunConfig) -> Result<World, CliError> {
    let path = cfg.out.join(WORLD_FILE);
    if !path.exists() {
        return Err(CliError::Data(format!("{} not found; run `altq datagen` first", path.display())));
    }
    Ok(World::load(path)?)
}

fn load_data(cfg: &RunConfig) -> Result<(World, Corpus), CliError> {
    let world = load_world(cfg)?;
    let corpus = Corpus::load(&world, cfg.out.join(CORPUS_DIR))?;
    Ok((world, corpus))
}

fn run_echo(cfg: &RunConfig, bot: &QBot, command: &str) -> serde_json::Value {
    config_echo(
        bot.config(),
        &cfg.train,
        serde_json::json!({ "command": command, "seed": cfg.seed, "world": cfg.world, "corpus": cfg.corpus }),
    )
}

/// Latest `{run}-epochNNN.ckpt.json` in `dir`.
pub fn latest_checkpoint(dir: &Path, run: &str) -> Option<(usize, PathBuf)> {
    let prefix = format!("{run}-epoch");
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let epoch = name.strip_prefix(&prefix)?.strip_suffix(".ckpt.json")?.parse().ok()?;
            Some((epoch, e.path()))
        })
        .max()
}

/// Supervised pre-training; with `resume`, continues from the latest epoch checkpoint.
pub fn pretrain(cfg: &RunConfig, resume: bool) -> Result<Vec<EpochMetrics>, CliError> {
    cfg.validate()?;
    let (world, corpus) = load_data(cfg)?;
    let found = if resume { latest_checkpoint(&cfg.out, SL_RUN) } else { None };
    let (bot, mut params, start, velocity) = match found {
        Some((epoch, path)) => {
            let ck = Checkpoint::load(&path)?;
            let (bot, params) = load_model(&ck, world.feature_dim())?;
            if bot.config() != &cfg.qbot {
                return Err(CliError::Config(format!("{} was trained with a different model config", path.display())));
            }
            (bot, params, epoch, ck.optimizer)
        }
        None => {
            let (bot, params) = QBot::init(cfg.qbot.clone(), world.vocab().len(), world.feature_dim(), &mut Rng::new(cfg.seed))?;
            (bot, params, 0, None)
        }
    };
    let mut opt = Sgd::new(cfg.train.sgd());
    if let Some(v) = velocity {
        opt.set_velocity(v);
    }
    let mut out = RunOutput::new(&cfg.out, SL_RUN, run_echo(cfg, &bot, "pretrain"), world.vocab().tokens().to_vec())?;
    if start > 0 {
        out.resume_rows(start)?;
    }
    let trainer = Trainer::new(&bot, &world, &corpus, &cfg.train)?;
    trainer.pretrain(&mut params, &mut opt, start, Some(&mut out))?;
    Ok(out.rows)
}

pub fn finetune(cfg: &RunConfig, variant: Variant, checkpoint: Option<&Path>) -> Result<Vec<EpochMetrics>, CliError> {
    cfg.validate()?;
    let (world, corpus) = load_data(cfg)?;
    let default = cfg.out.join(format!("{SL_RUN}.ckpt.json"));
    let path = checkpoint.unwrap_or(&default);
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let (bot, mut params) = load_model(&ck, world.feature_dim())?;
    let mut out = RunOutput::new(
        &cfg.out,
        variant.as_str(),
        run_echo(cfg, &bot, &format!("finetune --variant {variant}")),
        world.vocab().tokens().to_vec(),
    )?;
    let trainer = Trainer::new(&bot, &world, &corpus, &cfg.train)?;
    trainer.finetune(&mut params, variant, Some(&mut out))?;
    Ok(out.rows)
}

/// `tag=path` or a bare path whose tag is the file stem.
pub fn parse_model_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((tag, path)) => (tag.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(arg);
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or(arg);
            let tag = name.strip_suffix(".ckpt.json").or_else(|| name.strip_suffix(".json")).unwrap_or(name);
            (tag.to_string(), path)
        }
    }
}

/// Named checkpoints, or every standard run found under `out`.
pub fn resolve_models(cfg: &RunConfig, args: &[String]) -> Result<Vec<(String, PathBuf)>, CliError> {
    let models: Vec<(String, PathBuf)> = if args.is_empty() {
        ["sl", "alt", "na", "word"]
            .iter()
            .map(|t| (t.to_string(), cfg.out.join(format!("{t}.ckpt.json"))))
            .filter(|(_, p)| p.exists())
            .collect()
    } else {
        args.iter().map(|a| parse_model_arg(a)).collect()
    };
    if models.is_empty() {
        return Err(CliError::Data(format!("no checkpoints given or found in {}", cfg.out.display())));
    }
    for (_, p) in &models {
        if !p.exists() {
            return Err(CliError::Data(format!("checkpoint {} not found", p.display())));
        }
    }
    Ok(models)
}

pub fn load_models(world: &World, models: &[(String, PathBuf)]) -> Result<Vec<Model>, CliError> {
    models
        .iter()
        .map(|(tag, path)| Ok(Model::load(tag, path, world)?))
        .collect()
}

pub fn eval(cfg: &RunConfig, args: &[String], svg: bool) -> Result<Report, CliError> {
    cfg.validate()?;
    let (world, corpus) = load_data(cfg)?;
    let models = load_models(&world, &resolve_models(cfg, args)?)?;
    let entries: Vec<Entry> = models
        .iter()
        .map(|m| Entry {
            tag: m.tag.clone(),
            bot: &m.bot,
            params: &m.params,
        })
        .collect();
    let mut echo = cfg.echo("eval");
    echo["checkpoints"] = models
        .iter()
        .map(|m| {
            let p = Path::new(&m.checkpoint);
            serde_json::json!([m.tag, p.strip_prefix(&cfg.out).unwrap_or(p)])
        })
        .collect();
    let report = ablation_report(&entries, &world, &corpus.test, &cfg.eval, &echo)?;
    write_report(cfg.out.join(EVAL_DIR), &report, svg)?;
    Ok(report)
}

/// Redraws curves.svg from curves.csv.
pub fn plot(input: &Path, output: &Path) -> Result<(), CliError> {
    let mut rdr = csv::Reader::from_path(input).map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    for rec in rdr.deserialize::<(usize, String, f64, f64)>() {
        let (_, tag, pmr, _) = rec.map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?;
        match series.iter_mut().find(|(t, _)| *t == tag) {
            Some((_, v)) => v.push(pmr),
            None => series.push((tag, vec![pmr])),
        }
    }
    if series.is_empty() {
        return Err(CliError::Data(format!("{} has no curve rows", input.display())));
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    fs::write(output, curves_svg(&series)).map_err(|e| CliError::Env(format!("{}: {e}", output.display())))
}

pub fn play_cmd(
    cfg: &RunConfig,
    checkpoint: Option<&str>,
    input: &mut impl BufRead,
    out: &mut impl Write,
) -> Result<PlayOutcome, CliError> {
    cfg.validate()?;
    let world = load_world(cfg)?;
    let arg = match checkpoint {
        Some(c) => c.to_string(),
        None => format!("{SL_RUN}={}", cfg.out.join(format!("{SL_RUN}.ckpt.json")).display()),
    };
    let models = load_models(&world, &resolve_models(cfg, &[arg])?)?;
    mkdir(&cfg.out)?;
    play(&world, &models[0], cfg.seed, cfg.serve.pool_size, input, out, &cfg.out.join("play.jsonl"))
}

/// Shared state for `serve`, also used by tests.
pub fn service_state(cfg: &RunConfig, args: &[String]) -> Result<Arc<AppState>, CliError> {
    cfg.validate()?;
    let world = Arc::new(load_world(cfg)?);
    let models = load_models(&world, &resolve_models(cfg, args)?)?;
    let state = AppState::new(world, models, cfg.service()).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Arc::new(state))
}

pub fn serve(cfg: &RunConfig, args: &[String]) -> Result<(), CliError> {
    let state = service_state(cfg, args)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Env(e.to_string()))?;
    rt.block_on(async move {
        let addr = format!("{}:{}", cfg.serve.host, cfg.serve.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Env(format!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Env(e.to_string()))?;
        println!("serving {} on http://{local}", state.models.keys().cloned().collect::<Vec<_>>().join(", "));
        altq_service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Env(e.to_string()))
    })
}
