use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SynthImage, Token, World, WorldSpec};
use crate::error::{Error, Result};
use crate::neuro::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Validation => "validation.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    /// Dialog counts per split; rounding remainder goes to the test split.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let total = self.train + self.validation + self.test;
        if (total - 1.0).abs() > 1e-9 || [self.train, self.validation, self.test].iter().any(|f| *f < 0.0) {
            return Err(Error::Config(format!(
                "split fractions must be non-negative and sum to 1, got {total}"
            )));
        }
        let train = (self.train * n as f64).round() as usize;
        let validation = ((self.validation * n as f64).round() as usize).min(n - train);
        Ok([train, validation, n - train - validation])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRound {
    pub q: Vec<Token>,
    pub a: Vec<Token>,
}

/// One scripted dialog about one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dialog {
    pub image_id: u32,
    pub caption: Vec<Token>,
    pub rounds: Vec<QaRound>,
}

#[derive(Serialize, Deserialize)]
struct RoundLine {
    q: Vec<String>,
    a: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DialogLine {
    image_id: u32,
    caption: Vec<String>,
    rounds: Vec<RoundLine>,
}

/// Scripted questioner: asks about `n_rounds` distinct attributes the caption
/// leaves out, in random order, answered by the oracle.
pub fn scripted_dialog(
    spec: &WorldSpec,
    image: &SynthImage,
    caption: &[Token],
    n_rounds: usize,
    rng: &mut Rng,
) -> Result<Dialog> {
    let mentioned = spec.mentioned_attributes(image, caption);
    let mut open: Vec<usize> = (0..spec.schema().len())
        .filter(|a| !mentioned.contains(a))
        .collect();
    if open.len() < n_rounds {
        return Err(Error::Config(format!(
            "{n_rounds} rounds requested but only {} attributes are not in the caption",
            open.len()
        )));
    }
    rng.shuffle(&mut open);
    let rounds = open[..n_rounds]
        .iter()
        .map(|&attr| {
            let q = spec.question_for(attr);
            let a = spec.oracle_answer(image, &q, rng);
            QaRound { q, a }
        })
        .collect();
    Ok(Dialog {
        image_id: image.id,
        caption: caption.to_vec(),
        rounds,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Dialog>,
    pub validation: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Dialog] {
        match s {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every referenced image exists and, at zero answer noise, every answer
    /// equals the oracle's.
    pub fn validate(&self, world: &World) -> Result<()> {
        for s in Split::ALL {
            for (i, d) in self.split(s).iter().enumerate() {
                let image = world
                    .image(d.image_id)
                    .ok_or_else(|| Error::Data(format!("{s:?} dialog {i}: unknown image {}", d.image_id)))?;
                if world.spec.config.answer_noise == 0.0 {
                    for (t, r) in d.rounds.iter().enumerate() {
                        let expect = world.spec.oracle_answer(image, &r.q, &mut Rng::new(0));
                        if expect != r.a {
                            return Err(Error::Data(format!(
                                "{s:?} dialog {i} round {t}: answer disagrees with oracle"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn write_split(dialogs: &[Dialog], world: &World, path: &Path) -> Result<()> {
        let vocab = world.vocab();
        let mut out = Vec::new();
        for d in dialogs {
            let line = DialogLine {
                image_id: d.image_id,
                caption: vocab.decode(&d.caption),
                rounds: d
                    .rounds
                    .iter()
                    .map(|r| RoundLine {
                        q: vocab.decode(&r.q),
                        a: vocab.decode(&r.a),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn save(&self, world: &World, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in Split::ALL {
            Self::write_split(self.split(s), world, &dir.join(s.file_name()))?;
        }
        Ok(())
    }

    pub fn load_split(world: &World, path: impl AsRef<Path>) -> Result<Vec<Dialog>> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let vocab = world.vocab();
        let mut out = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let d: DialogLine = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            out.push(Dialog {
                image_id: d.image_id,
                caption: vocab.encode(&d.caption),
                rounds: d
                    .rounds
                    .iter()
                    .map(|r| QaRound {
                        q: vocab.encode(&r.q),
                        a: vocab.encode(&r.a),
                    })
                    .collect(),
            });
        }
        Ok(out)
    }

    pub fn load(world: &World, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Corpus {
            train: Self::load_split(world, dir.join(Split::Train.file_name()))?,
            validation: Self::load_split(world, dir.join(Split::Validation.file_name()))?,
            test: Self::load_split(world, dir.join(Split::Test.file_name()))?,
        })
    }
}

/// Scripted dialogs over uniformly drawn training images, split in order.
pub fn build_corpus(
    world: &World,
    n_dialogs: usize,
    n_rounds: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Corpus> {
    let counts = fractions.counts(n_dialogs)?;
    if world.train.is_empty() {
        return Err(Error::Config("world has no training images".into()));
    }
    let mut rng = Rng::new(seed);
    let mut dialogs = Vec::with_capacity(n_dialogs);
    for _ in 0..n_dialogs {
        let image = &world.train[rng.below(world.train.len())];
        dialogs.push(scripted_dialog(&world.spec, image, &image.caption, n_rounds, &mut rng)?);
    }
    let test = dialogs.split_off(counts[0] + counts[1]);
    let validation = dialogs.split_off(counts[0]);
    Ok(Corpus {
        train: dialogs,
        validation,
        test,
    })
}
