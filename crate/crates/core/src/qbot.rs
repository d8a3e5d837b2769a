//! The question-asking retrieval agent.
//!
//! A hierarchical encoder folds each round's (question, answer, guessed
//! image) into a history LSTM whose hidden vector is the dialog state. A
//! two-layer LSTM decoder seeded from that state asks the next question, and
//! the guesser ranks database images by squared euclidean distance to it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, NeuroError, Result};
use crate::neuro::{
    log_softmax_at, softmax_values, sq_dist, Graph, LstmParams, ParamId, ParamStore, Partition, Rng, Tensor, Var,
};
use crate::world::{FeatureBank, Token, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QBotConfig {
    pub embed_dim: usize,
    pub qa_hidden: usize,
    /// History/state dimension; must equal the world's feature dimension.
    pub state_dim: usize,
    pub decoder_layers: usize,
    /// Must equal `state_dim`: the decoder starts from the dialog state.
    pub decoder_hidden: usize,
    pub max_question_len: usize,
    pub top_k: usize,
    pub rounds: usize,
    /// Learnable linear guesser (initialised to identity) instead of the fixed identity.
    pub learnable_guesser: bool,
}

impl Default for QBotConfig {
    fn default() -> Self {
        QBotConfig {
            embed_dim: 32,
            qa_hidden: 64,
            state_dim: 64,
            decoder_layers: 2,
            decoder_hidden: 64,
            max_question_len: 8,
            top_k: 10,
            rounds: 5,
            learnable_guesser: false,
        }
    }
}

impl QBotConfig {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.state_dim != feature_dim {
            return Err(Error::Config(format!(
                "state_dim {} must equal world feature_dim {feature_dim}",
                self.state_dim
            )));
        }
        if self.decoder_hidden != self.state_dim {
            return Err(Error::Config("decoder_hidden must equal state_dim".into()));
        }
        if self.decoder_layers == 0 || self.max_question_len == 0 || self.rounds == 0 {
            return Err(Error::Config(
                "decoder_layers, max_question_len and rounds must be positive".into(),
            ));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        if [self.embed_dim, self.qa_hidden].contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Dialog state as plain values, owned by one game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogState {
    /// History hidden vector; this is the exposed state s_t.
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub transcript: Vec<(Vec<Token>, Vec<Token>)>,
    pub guesses: Vec<u32>,
}

impl DialogState {
    pub fn state(&self) -> &[f64] {
        &self.h
    }

    pub fn round(&self) -> usize {
        self.transcript.len()
    }
}

/// History LSTM state inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct TapeState {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Debug)]
struct Handles {
    enc_embed: ParamId,
    qa: LstmParams,
    img_w: ParamId,
    img_b: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    hist: LstmParams,
    dec_embed: ParamId,
    dec: Vec<LstmParams>,
    out_w: ParamId,
    out_b: ParamId,
    guess: Option<(ParamId, ParamId)>,
}

/// Model structure. Parameter values live in a separate [`ParamStore`] so
/// one `QBot` can drive several parameter sets.
#[derive(Clone, Debug)]
pub struct QBot {
    config: QBotConfig,
    vocab_size: usize,
    feature_dim: usize,
    h: Handles,
}

fn lstm_names(prefix: &str) -> [String; 3] {
    [format!("{prefix}.wx"), format!("{prefix}.wh"), format!("{prefix}.b")]
}

impl QBot {
    /// Builds the model and a freshly initialised parameter store.
    pub fn init(config: QBotConfig, vocab_size: usize, feature_dim: usize, rng: &mut Rng) -> Result<(QBot, ParamStore)> {
        config.validate(feature_dim)?;
        let mut s = ParamStore::new();
        let (e, q, sd, dh) = (config.embed_dim, config.qa_hidden, config.state_dim, config.decoder_hidden);
        use Partition::*;

        let lstm = |s: &mut ParamStore, prefix: &str, part: Partition, input: usize, hidden: usize, rng: &mut Rng| {
            let [wx, wh, b] = lstm_names(prefix);
            s.insert_uniform(&wx, part, &[4 * hidden, input], input + hidden, rng);
            s.insert_uniform(&wh, part, &[4 * hidden, hidden], input + hidden, rng);
            let mut bias = Tensor::zeros(&[4 * hidden]);
            bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
            s.insert(&b, part, bias).expect("finite");
        };

        let emb = s.insert_uniform("enc.embed", Encoder, &[vocab_size, e], e, rng);
        s.value_mut(emb).data_mut()[..e].iter_mut().for_each(|v| *v = 0.0);
        lstm(&mut s, "enc.qa", Encoder, e, q, rng);
        s.insert_uniform("enc.img.w", Encoder, &[sd, feature_dim], feature_dim, rng);
        s.insert_uniform("enc.img.b", Encoder, &[sd], feature_dim, rng);
        s.insert_uniform("enc.fuse.w", Encoder, &[sd, q + sd], q + sd, rng);
        s.insert_uniform("enc.fuse.b", Encoder, &[sd], q + sd, rng);
        lstm(&mut s, "enc.hist", Encoder, sd, sd, rng);

        let demb = s.insert_uniform("dec.embed", Decoder, &[vocab_size, e], e, rng);
        s.value_mut(demb).data_mut()[..e].iter_mut().for_each(|v| *v = 0.0);
        for l in 0..config.decoder_layers {
            let input = if l == 0 { e } else { dh };
            lstm(&mut s, &format!("dec.l{l}"), Decoder, input, dh, rng);
        }
        s.insert_uniform("dec.out.w", Decoder, &[vocab_size, dh], dh, rng);
        s.insert_uniform("dec.out.b", Decoder, &[vocab_size], dh, rng);

        if config.learnable_guesser {
            s.insert("guess.w", Guesser, Tensor::identity(feature_dim))?;
            s.insert("guess.b", Guesser, Tensor::zeros(&[sd]))?;
        }
        let bot = QBot::bind(config, vocab_size, feature_dim, &s)?;
        Ok((bot, s))
    }

    /// Resolves parameter handles by name in an existing store.
    pub fn bind(config: QBotConfig, vocab_size: usize, feature_dim: usize, s: &ParamStore) -> Result<QBot> {
        config.validate(feature_dim)?;
        let lstm = |prefix: &str| -> Result<LstmParams, NeuroError> {
            let [wx, wh, b] = lstm_names(prefix);
            Ok(LstmParams {
                wx: s.id(&wx)?,
                wh: s.id(&wh)?,
                b: s.id(&b)?,
            })
        };
        let dec = (0..config.decoder_layers)
            .map(|l| lstm(&format!("dec.l{l}")))
            .collect::<Result<Vec<_>, _>>()?;
        let guess = if config.learnable_guesser {
            Some((s.id("guess.w")?, s.id("guess.b")?))
        } else {
            None
        };
        let h = Handles {
            enc_embed: s.id("enc.embed")?,
            qa: lstm("enc.qa")?,
            img_w: s.id("enc.img.w")?,
            img_b: s.id("enc.img.b")?,
            fuse_w: s.id("enc.fuse.w")?,
            fuse_b: s.id("enc.fuse.b")?,
            hist: lstm("enc.hist")?,
            dec_embed: s.id("dec.embed")?,
            dec,
            out_w: s.id("dec.out.w")?,
            out_b: s.id("dec.out.b")?,
            guess,
        };
        let rows = s.value(h.enc_embed).rows();
        if rows != vocab_size {
            return Err(Error::Data(format!(
                "embedding has {rows} rows, vocabulary has {vocab_size} tokens"
            )));
        }
        if s.value(h.img_w).cols() != feature_dim {
            return Err(Error::Data("image embedding does not match feature dimension".into()));
        }
        Ok(QBot {
            config,
            vocab_size,
            feature_dim,
            h,
        })
    }

    pub fn config(&self) -> &QBotConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn clamp_token(&self, t: Token) -> Token {
        if t < self.vocab_size {
            t
        } else {
            Vocabulary::UNK
        }
    }

    // ---- graph-level building blocks -------------------------------------

    /// QA encoder over a token sequence, from a zero state. Returns the final hidden vector.
    pub fn encode_text(&self, g: &mut Graph, tokens: &[Token]) -> Result<Var> {
        let hq = self.config.qa_hidden;
        let mut h = g.zeros(hq);
        let mut c = g.zeros(hq);
        for &t in tokens {
            let x = g.embed(self.h.enc_embed, self.clamp_token(t))?;
            (h, c) = g.lstm_step(x, h, c, self.h.qa)?;
        }
        Ok(h)
    }

    fn fuse_and_advance(&self, g: &mut Graph, f: Var, feature: Var, prev: TapeState) -> Result<TapeState> {
        let z = g.linear(feature, self.h.img_w, Some(self.h.img_b))?;
        let cat = g.concat(&[f, z]);
        let ht = g.linear(cat, self.h.fuse_w, Some(self.h.fuse_b))?;
        let (h, c) = g.lstm_step(ht, prev.h, prev.c, self.h.hist)?;
        Ok(TapeState { h, c })
    }

    /// s_0: caption through the QA encoder, fused with a zero image feature.
    pub fn init_tape(&self, g: &mut Graph, caption: &[Token]) -> Result<TapeState> {
        let f = self.encode_text(g, caption)?;
        let zero_img = g.zeros(self.feature_dim);
        let prev = TapeState {
            h: g.zeros(self.config.state_dim),
            c: g.zeros(self.config.state_dim),
        };
        self.fuse_and_advance(g, f, zero_img, prev)
    }

    /// s_t = HistoryEnc(fuse(QAEnc(q_t, a_t), ImgEmbed(z_{i_t})), s_{t-1}).
    pub fn encode_round_tape(
        &self,
        g: &mut Graph,
        prev: TapeState,
        question: &[Token],
        answer: &[Token],
        guess_feature: &[f64],
    ) -> Result<TapeState> {
        let mut text = Vec::with_capacity(question.len() + answer.len());
        text.extend_from_slice(question);
        text.extend_from_slice(answer);
        let f = self.encode_text(g, &text)?;
        let feat = g.input(guess_feature)?;
        self.fuse_and_advance(g, f, feat, prev)
    }

    fn decoder_start(&self, g: &mut Graph, s: Var) -> Vec<(Var, Var)> {
        (0..self.config.decoder_layers)
            .map(|_| (s, g.zeros(self.config.decoder_hidden)))
            .collect()
    }

    fn decoder_step(&self, g: &mut Graph, layers: &mut [(Var, Var)], input: Token) -> Result<Var> {
        let mut x = g.embed(self.h.dec_embed, self.clamp_token(input))?;
        for (l, p) in self.h.dec.iter().enumerate() {
            let (h, c) = layers[l];
            let (h2, c2) = g.lstm_step(x, h, c, *p)?;
            layers[l] = (h2, c2);
            x = h2;
        }
        Ok(g.linear(x, self.h.out_w, Some(self.h.out_b))?)
    }

    /// Teacher-forced −log p(tokens | s), summed over tokens.
    pub fn question_nll_tape(&self, g: &mut Graph, s: Var, tokens: &[Token]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Data("cannot score an empty question".into()));
        }
        let mut layers = self.decoder_start(g, s);
        let mut prev = Vocabulary::START;
        let mut terms = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let logits = self.decoder_step(g, &mut layers, prev)?;
            terms.push(g.softmax_cross_entropy(logits, self.clamp_token(t))?);
            prev = t;
        }
        Ok(g.sum(&terms)?)
    }

    /// Guesser embedding of one feature vector.
    pub fn guess_embed_tape(&self, g: &mut Graph, feature: &[f64]) -> Result<Var> {
        let v = g.input(feature)?;
        match self.h.guess {
            Some((w, b)) => Ok(g.linear(v, w, Some(b))?),
            None => Ok(v),
        }
    }

    /// −log π(target | s) for π = softmax(−d) over the given candidate features.
    pub fn policy_nll_tape(&self, g: &mut Graph, s: Var, candidates: &[&[f64]], target: usize) -> Result<Var> {
        let mut dists = Vec::with_capacity(candidates.len());
        for f in candidates {
            let e = self.guess_embed_tape(g, f)?;
            dists.push(g.sq_dist(e, s)?);
        }
        let d = g.stack(&dists)?;
        let neg = g.scale(d, -1.0);
        Ok(g.softmax_cross_entropy(neg, target)?)
    }

    // ---- value-level API -------------------------------------------------

    fn to_state(g: &Graph, t: TapeState) -> DialogState {
        DialogState {
            h: g.value(t.h).to_vec(),
            c: g.value(t.c).to_vec(),
            transcript: Vec::new(),
            guesses: Vec::new(),
        }
    }

    pub fn init_state(&self, params: &ParamStore, caption: &[Token]) -> Result<DialogState> {
        let mut g = Graph::new(params);
        let t = self.init_tape(&mut g, caption)?;
        Ok(Self::to_state(&g, t))
    }

    pub fn encode_round(
        &self,
        params: &ParamStore,
        state: &DialogState,
        question: &[Token],
        answer: &[Token],
        guess_id: u32,
        guess_feature: &[f64],
    ) -> Result<DialogState> {
        let mut g = Graph::new(params);
        let prev = TapeState {
            h: g.input(&state.h)?,
            c: g.input(&state.c)?,
        };
        let t = self.encode_round_tape(&mut g, prev, question, answer, guess_feature)?;
        let mut next = Self::to_state(&g, t);
        next.transcript = state.transcript.clone();
        next.transcript.push((question.to_vec(), answer.to_vec()));
        next.guesses = state.guesses.clone();
        next.guesses.push(guess_id);
        Ok(next)
    }

    /// Generates a question from the state. Returns tokens (always ending in
    /// `<end>`) and the summed log-probability of the emitted tokens; a
    /// length-capped question gets an implicit `<end>` that is not scored.
    pub fn decode_question(
        &self,
        params: &ParamStore,
        state: &DialogState,
        mode: DecodeMode,
        rng: &mut Rng,
    ) -> Result<(Vec<Token>, f64)> {
        let mut g = Graph::new(params);
        let s = g.input(&state.h)?;
        let mut layers = self.decoder_start(&mut g, s);
        let mut prev = Vocabulary::START;
        let mut tokens = Vec::new();
        let mut logp = 0.0;
        for _ in 0..self.config.max_question_len {
            let logits = self.decoder_step(&mut g, &mut layers, prev)?;
            let lv = g.value(logits);
            let t = match mode {
                DecodeMode::Greedy => argmax(lv),
                DecodeMode::Sample => rng.categorical(&softmax_values(lv)),
            };
            logp += log_softmax_at(lv, t);
            tokens.push(t);
            if t == Vocabulary::END {
                return Ok((tokens, logp));
            }
            prev = t;
        }
        tokens.push(Vocabulary::END);
        Ok((tokens, logp))
    }

    pub fn score_question(&self, params: &ParamStore, state: &DialogState, tokens: &[Token]) -> Result<f64> {
        let mut g = Graph::new(params);
        let s = g.input(&state.h)?;
        let nll = self.question_nll_tape(&mut g, s, tokens)?;
        Ok(-g.scalar(nll))
    }

    /// Guesser-embedded bank, or `None` when the guesser is the identity.
    pub fn embedded_bank(&self, params: &ParamStore, bank: &FeatureBank) -> Option<FeatureBank> {
        let (w, b) = self.h.guess?;
        let (wt, bt) = (params.value(w), params.value(b));
        let rows = wt.rows();
        let mut data = Vec::with_capacity(bank.len() * rows);
        for r in 0..bank.len() {
            let x = bank.row(r);
            for o in 0..rows {
                data.push(bt.data()[o] + crate::neuro::dot(wt.row(o), x));
            }
        }
        Some(FeatureBank::from_rows(bank.ids().to_vec(), rows, data))
    }

    /// Squared euclidean distance from the state to every image in the bank, in bank order.
    pub fn distances(&self, params: &ParamStore, state: &DialogState, bank: &FeatureBank) -> Result<Vec<f64>> {
        if bank.is_empty() {
            return Err(Error::Data("empty image database".into()));
        }
        match self.embedded_bank(params, bank) {
            Some(e) => Ok(bank_distances(&e, &state.h)),
            None => {
                if bank.dim() != state.h.len() {
                    return Err(NeuroError::ShapeMismatch {
                        op: "distances",
                        expected: vec![state.h.len()],
                        got: vec![bank.dim()],
                    }
                    .into());
                }
                Ok(bank_distances(bank, &state.h))
            }
        }
    }

    /// Nearest image id (ties → lowest id).
    pub fn guess(&self, params: &ParamStore, state: &DialogState, bank: &FeatureBank) -> Result<u32> {
        let d = self.distances(params, state, bank)?;
        Ok(bank.id(argmin(&d)))
    }

    pub fn policy_topk(
        &self,
        params: &ParamStore,
        state: &DialogState,
        bank: &FeatureBank,
        k: usize,
    ) -> Result<TopK> {
        if k == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        if k > bank.len() {
            return Err(Error::Config(format!("K={k} exceeds database size {}", bank.len())));
        }
        let d = self.distances(params, state, bank)?;
        Ok(TopK::from_distances(&d, bank, k))
    }

    pub fn rank_percentile(
        &self,
        params: &ParamStore,
        state: &DialogState,
        bank: &FeatureBank,
        target: u32,
    ) -> Result<f64> {
        let row = bank
            .position(target)
            .ok_or_else(|| Error::Data(format!("target {target} not in database")))?;
        let d = self.distances(params, state, bank)?;
        Ok(percentile(&d, row))
    }
}

/// K nearest candidates and the softmax-of-negated-distance policy over them.
#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    /// Bank rows, nearest first.
    pub rows: Vec<usize>,
    pub ids: Vec<u32>,
    pub distances: Vec<f64>,
    pub probs: Vec<f64>,
}

impl TopK {
    pub fn from_distances(d: &[f64], bank: &FeatureBank, k: usize) -> Self {
        let rows = topk_rows(d, k);
        let distances: Vec<f64> = rows.iter().map(|&r| d[r]).collect();
        let neg: Vec<f64> = distances.iter().map(|v| -v).collect();
        TopK {
            ids: rows.iter().map(|&r| bank.id(r)).collect(),
            probs: softmax_values(&neg),
            distances,
            rows,
        }
    }
}

pub fn bank_distances(bank: &FeatureBank, s: &[f64]) -> Vec<f64> {
    (0..bank.len()).map(|r| sq_dist(bank.row(r), s)).collect()
}

/// Index of the largest value; ties → lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest value; ties → lowest index.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` smallest values ordered by (value, index).
pub fn topk_rows(d: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(d.len());
    let mut idx: Vec<usize> = (0..d.len()).collect();
    let cmp = |a: &usize, b: &usize| d[*a].total_cmp(&d[*b]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Fraction of the other images strictly farther than the target; 1.0 for a
/// single-image database.
pub fn percentile(d: &[f64], target_row: usize) -> f64 {
    if d.len() <= 1 {
        return 1.0;
    }
    let dt = d[target_row];
    let farther = d.iter().filter(|&&x| x > dt).count();
    farther as f64 / (d.len() - 1) as f64
}
