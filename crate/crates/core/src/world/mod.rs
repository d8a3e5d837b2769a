//! Synthetic stand-in for an image database: attribute bundles, frozen
//! random-projection features, captions, a rule-based answerer and a
//! scripted dialog corpus.

mod corpus;
mod glyph;
mod vocab;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuro::{Rng, Tensor};

pub use corpus::{build_corpus, scripted_dialog, Corpus, Dialog, QaRound, Split, SplitFractions};
pub use glyph::render_glyph;
pub use vocab::{Token, Vocabulary};

pub const WORLD_FORMAT: &str = "altq-world/1";

pub const QUESTION_WORD: &str = "what";
pub const UNKNOWN_ANSWER: &str = "unknown";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

impl Attribute {
    pub fn new(name: &str, values: &[&str]) -> Self {
        Attribute {
            name: name.to_string(),
            values: values.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn default_schema() -> Vec<Attribute> {
    vec![
        Attribute::new(
            "shape",
            &["circle", "square", "triangle", "star", "hexagon", "diamond"],
        ),
        Attribute::new(
            "color",
            &["red", "green", "blue", "yellow", "purple", "orange"],
        ),
        Attribute::new("size", &["small", "medium", "large"]),
        Attribute::new("fill", &["solid", "hollow", "striped"]),
        Attribute::new("count", &["1", "2", "3", "4"]),
        Attribute::new("background", &["white", "gray", "black"]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub schema: Vec<Attribute>,
    pub feature_dim: usize,
    /// Std-dev of the Gaussian noise added to projected features.
    pub feature_noise: f64,
    /// Probability that the answerer reports a wrong value.
    pub answer_noise: f64,
    pub n_train: usize,
    pub n_game: usize,
    /// Number of attribute values each caption names.
    pub caption_mentions: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            schema: default_schema(),
            feature_dim: 64,
            feature_noise: 0.05,
            answer_noise: 0.0,
            n_train: 2000,
            n_game: 500,
            caption_mentions: 1,
        }
    }
}

impl WorldConfig {
    pub fn raw_dim(&self) -> usize {
        self.schema.iter().map(|a| a.values.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema.is_empty() {
            return Err(Error::Config("attribute schema is empty".into()));
        }
        if self.schema.iter().any(|a| a.values.is_empty()) {
            return Err(Error::Config("attribute with no values".into()));
        }
        if self.n_train + self.n_game < 2 {
            return Err(Error::Config("world needs at least two images".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.caption_mentions > self.schema.len() {
            return Err(Error::Config(
                "caption_mentions exceeds attribute count".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.answer_noise) || self.feature_noise < 0.0 {
            return Err(Error::Config("noise levels out of range".into()));
        }
        Ok(())
    }
}

/// Everything fixed at world creation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub vocab: Vocabulary,
    /// `[feature_dim, raw_dim]`, entries N(0, 1/raw_dim).
    pub projection: Tensor,
}

impl WorldSpec {
    pub fn new(config: WorldConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let raw = config.raw_dim();
        let std = (1.0 / raw as f64).sqrt();
        let mut projection = Tensor::zeros(&[config.feature_dim, raw]);
        for v in projection.data_mut() {
            *v = rng.normal(0.0, std);
        }
        let mut words: Vec<&str> = vec!["a", "image", QUESTION_WORD, UNKNOWN_ANSWER];
        for a in &config.schema {
            words.push(&a.name);
        }
        for a in &config.schema {
            words.extend(a.values.iter().map(String::as_str));
        }
        let vocab = Vocabulary::build(words);
        Ok(WorldSpec {
            config,
            vocab,
            projection,
        })
    }

    pub fn schema(&self) -> &[Attribute] {
        &self.config.schema
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.config.schema.iter().position(|a| a.name == name)
    }

    /// Concatenated one-hot blocks.
    pub fn raw_encoding(&self, values: &[usize]) -> Vec<f64> {
        let mut raw = vec![0.0; self.config.raw_dim()];
        let mut off = 0;
        for (a, &v) in self.config.schema.iter().zip(values) {
            raw[off + v] = 1.0;
            off += a.values.len();
        }
        raw
    }

    /// Noise-free feature of a raw encoding.
    pub fn project(&self, raw: &[f64]) -> Vec<f64> {
        let cols = raw.len();
        self.projection
            .data()
            .chunks(cols)
            .map(|row| row.iter().zip(raw).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn value_token(&self, attr: usize, value: usize) -> Token {
        self.vocab.id(&self.config.schema[attr].values[value])
    }

    /// Attribute index referenced by a `what <attribute>` question.
    pub fn parse_question(&self, question: &[Token]) -> Option<usize> {
        let body: &[Token] = match question.iter().position(|&t| t == Vocabulary::END) {
            Some(end) if end == question.len() - 1 => &question[..end],
            Some(_) => return None,
            None => question,
        };
        if body.len() != 2 || body[0] != self.vocab.id(QUESTION_WORD) {
            return None;
        }
        let word = self.vocab.word(body[1]);
        self.attribute_index(word)
    }

    pub fn question_for(&self, attr: usize) -> Vec<Token> {
        vec![
            self.vocab.id(QUESTION_WORD),
            self.vocab.id(&self.config.schema[attr].name),
            Vocabulary::END,
        ]
    }

    /// Rule-based answerer.
    ///
    /// Questions of the form `what <attribute>` get that attribute's value,
    /// replaced by a uniformly drawn other value with probability
    /// `answer_noise`. Anything else is answered `unknown`.
    pub fn oracle_answer(&self, image: &SynthImage, question: &[Token], rng: &mut Rng) -> Vec<Token> {
        let Some(attr) = self.parse_question(question) else {
            return vec![self.vocab.id(UNKNOWN_ANSWER)];
        };
        let n_values = self.config.schema[attr].values.len();
        let truth = image.values[attr];
        let noisy = rng.uniform() < self.config.answer_noise;
        let value = if noisy && n_values > 1 {
            let k = rng.below(n_values - 1);
            if k >= truth {
                k + 1
            } else {
                k
            }
        } else {
            truth
        };
        vec![self.value_token(attr, value)]
    }

    /// `a <value> ... image <end>` naming `k` distinct true values in schema order.
    pub fn caption_of(&self, image: &SynthImage, rng: &mut Rng, k: usize) -> Vec<Token> {
        let k = k.min(self.config.schema.len());
        let mut chosen = rng.sample_indices(self.config.schema.len(), k);
        chosen.sort_unstable();
        let mut out = vec![self.vocab.id("a")];
        out.extend(chosen.iter().map(|&a| self.value_token(a, image.values[a])));
        out.push(self.vocab.id("image"));
        out.push(Vocabulary::END);
        out
    }

    /// Attributes whose true value token appears in `caption`.
    pub fn mentioned_attributes(&self, image: &SynthImage, caption: &[Token]) -> Vec<usize> {
        (0..self.config.schema.len())
            .filter(|&a| caption.contains(&self.value_token(a, image.values[a])))
            .collect()
    }

    fn make_image(&self, id: u32, rng: &mut Rng) -> SynthImage {
        let values: Vec<usize> = self
            .config
            .schema
            .iter()
            .map(|a| rng.below(a.values.len()))
            .collect();
        let raw = self.raw_encoding(&values);
        let mut feature = self.project(&raw);
        if self.config.feature_noise > 0.0 {
            for f in &mut feature {
                *f += rng.normal(0.0, self.config.feature_noise);
            }
        }
        let mut image = SynthImage {
            id,
            values,
            raw,
            feature,
            caption: Vec::new(),
        };
        image.caption = self.caption_of(&image, rng, self.config.caption_mentions);
        image
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    pub id: u32,
    /// Value index per attribute, in schema order.
    pub values: Vec<usize>,
    #[serde(skip)]
    pub raw: Vec<f64>,
    pub feature: Vec<f64>,
    pub caption: Vec<Token>,
}

/// Contiguous feature matrix over a set of images, rows in ascending id order.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    ids: Vec<u32>,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureBank {
    pub fn new(images: &[SynthImage]) -> Self {
        let mut sorted: Vec<&SynthImage> = images.iter().collect();
        sorted.sort_by_key(|im| im.id);
        let dim = sorted.first().map(|im| im.feature.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(dim * sorted.len());
        for im in &sorted {
            data.extend_from_slice(&im.feature);
        }
        FeatureBank {
            ids: sorted.iter().map(|im| im.id).collect(),
            dim,
            data,
        }
    }

    /// `ids` should be ascending for [`FeatureBank::position`] to find them.
    pub fn from_rows(ids: Vec<u32>, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(ids.len() * dim, data.len());
        FeatureBank { ids, dim, data }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> u32 {
        self.ids[row]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn feature(&self, id: u32) -> Option<&[f64]> {
        self.position(id).map(|r| self.row(r))
    }
}

/// A generated world: spec plus training and held-out game images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub format: String,
    pub seed: u64,
    pub spec: WorldSpec,
    pub train: Vec<SynthImage>,
    pub game: Vec<SynthImage>,
}

impl World {
    pub fn generate(config: WorldConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let spec = WorldSpec::new(config, &mut rng)?;
        let n_train = spec.config.n_train as u32;
        let n_game = spec.config.n_game as u32;
        let train = (0..n_train).map(|i| spec.make_image(i, &mut rng)).collect();
        let game = (n_train..n_train + n_game)
            .map(|i| spec.make_image(i, &mut rng))
            .collect();
        Ok(World {
            format: WORLD_FORMAT.to_string(),
            seed,
            spec,
            train,
            game,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.spec.vocab
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.config.feature_dim
    }

    pub fn image(&self, id: u32) -> Option<&SynthImage> {
        let n_train = self.train.len() as u32;
        if id < n_train {
            self.train.get(id as usize)
        } else {
            self.game.get((id - n_train) as usize)
        }
    }

    pub fn train_bank(&self) -> FeatureBank {
        FeatureBank::new(&self.train)
    }

    pub fn game_bank(&self) -> FeatureBank {
        FeatureBank::new(&self.game)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut world: World = serde_json::from_slice(&bytes)?;
        if world.format != WORLD_FORMAT {
            return Err(Error::Data(format!("unsupported world format `{}`", world.format)));
        }
        let spec = world.spec.clone();
        for im in world.train.iter_mut().chain(world.game.iter_mut()) {
            if im.values.len() != spec.config.schema.len() {
                return Err(Error::Data(format!("image {} has wrong attribute count", im.id)));
            }
            im.raw = spec.raw_encoding(&im.values);
        }
        Ok(world)
    }
}
