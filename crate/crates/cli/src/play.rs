//! Terminal version of the human game.

use std::fs::OpenOptions;
use std::io::{BufRead, Write};
use std::path::Path;

use altq_core::world::World;
use altq_service::session::{AnswerOutcome, Model, Rating, Session};
use altq_service::store::LogLine;

use crate::CliError;

#[derive(Debug, PartialEq, Eq)]
pub enum PlayOutcome {
    Finished { win: bool },
    Aborted,
}

fn io(e: std::io::Error) -> CliError {
    CliError::Env(e.to_string())
}

fn read_line(input: &mut impl BufRead) -> Result<Option<String>, CliError> {
    let mut line = String::new();
    if input.read_line(&mut line).map_err(io)? == 0 {
        return Ok(None);
    }
    Ok(Some(line.trim().to_string()))
}

fn ask_score(input: &mut impl BufRead, out: &mut impl Write, name: &str) -> Result<Option<u8>, CliError> {
    loop {
        write!(out, "{name} (1-5)> ").map_err(io)?;
        out.flush().map_err(io)?;
        let Some(line) = read_line(input)? else {
            return Ok(None);
        };
        match line.parse::<u8>() {
            Ok(v) if (1..=5).contains(&v) => return Ok(Some(v)),
            _ => writeln!(out, "please enter a whole number from 1 to 5").map_err(io)?,
        }
    }
}

/// Plays one game on `input`/`out` and appends the finished record to `log`.
pub fn play(
    world: &World,
    model: &Model,
    seed: u64,
    pool_size: usize,
    input: &mut impl BufRead,
    out: &mut impl Write,
    log: &Path,
) -> Result<PlayOutcome, CliError> {
    let now = chrono_now();
    let mut s = Session::start(format!("play-{seed}"), world, model, seed, pool_size, now).map_err(service_err)?;
    let target = world.image(s.target).expect("target exists");
    writeln!(out, "You are answering questions about image {}:", s.target).map_err(io)?;
    for (a, v) in world.spec.schema().iter().zip(&target.values) {
        writeln!(out, "  {:<11} {}", a.name, a.values[*v]).map_err(io)?;
    }
    writeln!(out, "The questioner sees the caption \"{}\" and {} candidates.", s.caption, s.pool.len()).map_err(io)?;
    let mut question = s.pending_question(world).unwrap_or_default();
    let win = loop {
        writeln!(out, "Q{}: {question}", s.round + 1).map_err(io)?;
        write!(out, "A{}> ", s.round + 1).map_err(io)?;
        out.flush().map_err(io)?;
        let Some(answer) = read_line(input)? else {
            writeln!(out, "\naborted").map_err(io)?;
            return Ok(PlayOutcome::Aborted);
        };
        match s.answer(world, model, &answer, chrono_now()).map_err(service_err)? {
            AnswerOutcome::Question { question: q, .. } => question = q,
            AnswerOutcome::Reveal(r) => {
                let verdict = if r.win { "correct" } else { "wrong" };
                writeln!(out, "Final guess: image {} (target {}), {verdict}.", r.guess_id, s.target).map_err(io)?;
                break r.win;
            }
        }
    };
    writeln!(out, "Rate the conversation.").map_err(io)?;
    let mut scores = [0u8; 4];
    for (slot, name) in scores.iter_mut().zip(["fluency", "relevance", "comprehension", "diversity"]) {
        match ask_score(input, out, name)? {
            Some(v) => *slot = v,
            None => {
                writeln!(out, "\naborted").map_err(io)?;
                return Ok(PlayOutcome::Aborted);
            }
        }
    }
    let rating = Rating {
        fluency: scores[0],
        relevance: scores[1],
        comprehension: scores[2],
        diversity: scores[3],
    };
    s.rate(rating, chrono_now()).map_err(service_err)?;
    let line = LogLine {
        session: s.id.clone(),
        model: s.model.clone(),
        checkpoint: s.checkpoint.clone(),
        seed,
        finished_at: s.updated_at,
        record: s.record(),
        rating,
    };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(log)
        .map_err(|e| CliError::Env(format!("{}: {e}", log.display())))?;
    let mut buf = serde_json::to_vec(&line).map_err(|e| CliError::Data(e.to_string()))?;
    buf.push(b'\n');
    f.write_all(&buf).map_err(io)?;
    writeln!(out, "Thanks, logged to {}.", log.display()).map_err(io)?;
    Ok(PlayOutcome::Finished { win })
}

fn chrono_now() -> altq_service::session::Timestamp {
    altq_service::session::Timestamp::from(std::time::SystemTime::now())
}

fn service_err(e: altq_service::SessionError) -> CliError {
    CliError::Data(e.to_string())
}
