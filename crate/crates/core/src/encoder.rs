//! Small post-LN transformer encoder that exposes every layer's output.
//!
//! The embedding width may be smaller than the hidden width (a learned
//! projection bridges them), and all blocks may share one set of weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionSpan, Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::rng::{truncated_normal, SeededRng};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;
pub const SEGMENT_TYPES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub embedding_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_position: usize,
    pub share_parameters: bool,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            hidden_size: 64,
            embedding_size: 32,
            num_layers: 4,
            num_heads: 4,
            ffn_size: 256,
            max_position: 64,
            share_parameters: false,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return fail(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.embedding_size < 2 || self.embedding_size > self.hidden_size {
            return fail(format!(
                "embedding_size {} must lie in [2, hidden_size {}]",
                self.embedding_size, self.hidden_size
            ));
        }
        if self.vocab_size <= crate::tokenizer::SPECIAL_TOKENS.len() {
            return fail(format!("vocab_size {} leaves no room for text", self.vocab_size));
        }
        if self.max_position == 0 || self.ffn_size == 0 {
            return fail("max_position and ffn_size must be positive".into());
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub query: (ParamId, ParamId),
    pub key: (ParamId, ParamId),
    pub value: (ParamId, ParamId),
    pub output: (ParamId, ParamId),
    pub attention_norm: (ParamId, ParamId),
    pub ffn_in: (ParamId, ParamId),
    pub ffn_out: (ParamId, ParamId),
    pub ffn_norm: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub word_embeddings: ParamId,
    pub position_embeddings: ParamId,
    pub segment_embeddings: ParamId,
    pub embedding_norm: (ParamId, ParamId),
    pub projection: Option<(ParamId, ParamId)>,
    /// One entry when parameters are shared, otherwise one per layer.
    pub blocks: Vec<BlockParams>,
}

/// Per-layer hidden states of one encoder pass: `states[0]` is the embedding
/// output and `states[i]` the output of block `i`. Each state is stored
/// token-major as `[n, d]`, so column `j` of the `d × n` view is row `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub states: Vec<Tensor>,
}

impl LayerStack {
    pub fn num_layers(&self) -> usize {
        self.states.len() - 1
    }

    /// First-token (`[CLS]`) vector of state `index`.
    pub fn cls(&self, index: usize) -> &[f64] {
        self.states[index].row(0)
    }
}

/// Stacked per-layer states of a batch; sequence `i` occupies rows
/// `starts[i]..` of every state, so its `[CLS]` row is `starts[i]`.
#[derive(Clone, Debug)]
pub struct BatchStates {
    pub states: Vec<Var>,
    pub starts: Vec<usize>,
}

/// Forward-pass mode; dropout only fires in `Train`.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut SeededRng),
}

fn weight(store: &mut ParamStore, rng: &mut SeededRng, name: &str, group: ParamGroup, shape: &[usize]) -> ParamId {
    let n = shape.iter().product();
    let data = (0..n).map(|_| truncated_normal(rng, INIT_STD)).collect();
    store.add(name, group, Tensor::new(shape.to_vec(), data).expect("shape matches"))
}

fn linear(store: &mut ParamStore, rng: &mut SeededRng, name: &str, group: ParamGroup, input: usize, output: usize) -> (ParamId, ParamId) {
    let w = weight(store, rng, &format!("{name}.weight"), group, &[input, output]);
    let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[output]));
    (w, b)
}

fn norm(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.gain"), group, Tensor::filled(&[width], 1.0));
    let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[width]));
    (g, b)
}

impl EncoderParams {
    /// Registers freshly initialized encoder weights in `store`: truncated
    /// normal (σ = 0.02) matrices, zero biases, unit norm gains.
    pub fn init(config: &EncoderConfig, store: &mut ParamStore, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let emb = ParamGroup::Embeddings;
        let (e, d) = (config.embedding_size, config.hidden_size);
        let word_embeddings = weight(store, rng, "embeddings.word", emb, &[config.vocab_size, e]);
        let position_embeddings = weight(store, rng, "embeddings.position", emb, &[config.max_position, e]);
        let segment_embeddings = weight(store, rng, "embeddings.segment", emb, &[SEGMENT_TYPES, e]);
        let embedding_norm = norm(store, "embeddings.norm", emb, e);
        let projection = (e != d).then(|| linear(store, rng, "embeddings.projection", emb, e, d));

        let count = if config.share_parameters { 1 } else { config.num_layers };
        let blk = ParamGroup::Blocks;
        let blocks = (0..count)
            .map(|i| {
                let p = format!("blocks.{i}");
                BlockParams {
                    query: linear(store, rng, &format!("{p}.attention.query"), blk, d, d),
                    key: linear(store, rng, &format!("{p}.attention.key"), blk, d, d),
                    value: linear(store, rng, &format!("{p}.attention.value"), blk, d, d),
                    output: linear(store, rng, &format!("{p}.attention.output"), blk, d, d),
                    attention_norm: norm(store, &format!("{p}.attention.norm"), blk, d),
                    ffn_in: linear(store, rng, &format!("{p}.ffn.in"), blk, d, config.ffn_size),
                    ffn_out: linear(store, rng, &format!("{p}.ffn.out"), blk, config.ffn_size, d),
                    ffn_norm: norm(store, &format!("{p}.ffn.norm"), blk, d),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            word_embeddings,
            position_embeddings,
            segment_embeddings,
            embedding_norm,
            projection,
            blocks,
        })
    }

    fn block(&self, layer: usize) -> &BlockParams {
        if self.config.share_parameters {
            &self.blocks[0]
        } else {
            &self.blocks[layer]
        }
    }

    /// Records a forward pass on `tape`, returning `L + 1` states of `[n, d]`.
    pub fn forward(&self, tape: &mut Tape<'_>, tokens: &TokenSequence, mode: &mut Mode<'_>) -> Result<Vec<Var>> {
        Ok(self.forward_batch(tape, &[tokens], mode)?.states)
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        let cfg = &self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        if n > cfg.max_position {
            return Err(Error::Capacity(format!(
                "sequence of {n} tokens exceeds max_position {}",
                cfg.max_position
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Index {
                index: bad,
                len: cfg.vocab_size,
            });
        }
        if let Some(&bad) = tokens.segment_ids.iter().find(|&&s| s >= SEGMENT_TYPES) {
            return Err(Error::Index {
                index: bad,
                len: SEGMENT_TYPES,
            });
        }
        if !tokens.attention_mask.iter().any(|&m| m == 1) {
            return Err(Error::Input("token sequence is entirely padding".into()));
        }
        Ok(())
    }

    /// Encodes several sequences at once by stacking their rows. Row-wise
    /// layers run on the whole stack; attention stays within each sequence.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&TokenSequence],
        mode: &mut Mode<'_>,
    ) -> Result<BatchStates> {
        let cfg = &self.config;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::new();
        let mut spans = Vec::with_capacity(batch.len());
        for tokens in batch {
            self.check_tokens(tokens)?;
            spans.push(AttentionSpan {
                start: ids.len(),
                key_mask: tokens.key_mask(),
            });
            ids.extend_from_slice(&tokens.ids);
            positions.extend(0..tokens.len());
            segments.extend_from_slice(&tokens.segment_ids);
        }
        if spans.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }

        let word_table = tape.param(self.word_embeddings);
        let pos_table = tape.param(self.position_embeddings);
        let seg_table = tape.param(self.segment_embeddings);
        let words = tape.gather(word_table, &ids)?;
        let pos = tape.gather(pos_table, &positions)?;
        let segs = tape.gather(seg_table, &segments)?;
        let sum = tape.add(words, pos)?;
        let sum = tape.add(sum, segs)?;
        let mut h = self.norm(tape, sum, self.embedding_norm)?;
        if let Some(proj) = self.projection {
            h = self.linear(tape, h, proj)?;
        }
        h = dropout(tape, h, cfg.dropout, mode)?;

        let mut states = Vec::with_capacity(cfg.num_layers + 1);
        states.push(h);
        for layer in 0..cfg.num_layers {
            h = self.block_forward(tape, h, self.block(layer), &spans, mode)?;
            states.push(h);
        }
        Ok(BatchStates {
            states,
            starts: spans.iter().map(|s| s.start).collect(),
        })
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let w = tape.param(w);
        let b = tape.param(b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape<'_>, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let g = tape.param(g);
        let b = tape.param(b);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    fn block_forward(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        block: &BlockParams,
        spans: &[AttentionSpan],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let q = self.linear(tape, h, block.query)?;
        let k = self.linear(tape, h, block.key)?;
        let v = self.linear(tape, h, block.value)?;
        let ctx = tape.attention(q, k, v, spans, cfg.num_heads)?;
        let attn = self.linear(tape, ctx, block.output)?;
        let attn = dropout(tape, attn, cfg.dropout, mode)?;
        let res = tape.add(h, attn)?;
        let h1 = self.norm(tape, res, block.attention_norm)?;

        let ff = self.linear(tape, h1, block.ffn_in)?;
        let ff = tape.gelu(ff);
        let ff = self.linear(tape, ff, block.ffn_out)?;
        let ff = dropout(tape, ff, cfg.dropout, mode)?;
        let res = tape.add(h1, ff)?;
        self.norm(tape, res, block.ffn_norm)
    }

    /// Eval-mode forward pass returning plain tensors.
    pub fn encode(&self, store: &ParamStore, tokens: &TokenSequence) -> Result<LayerStack> {
        let mut tape = Tape::with_params(store);
        let vars = self.forward(&mut tape, tokens, &mut Mode::Eval)?;
        Ok(LayerStack {
            states: vars.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Every parameter id owned by the encoder, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.word_embeddings,
            self.position_embeddings,
            self.segment_embeddings,
            self.embedding_norm.0,
            self.embedding_norm.1,
        ];
        if let Some((w, b)) = self.projection {
            ids.extend([w, b]);
        }
        for b in &self.blocks {
            for (x, y) in [
                b.query,
                b.key,
                b.value,
                b.output,
                b.attention_norm,
                b.ffn_in,
                b.ffn_out,
                b.ffn_norm,
            ] {
                ids.extend([x, y]);
            }
        }
        ids
    }
}

/// Inverted dropout; identity in eval mode or when `rate == 0`.
fn dropout(tape: &mut Tape<'_>, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..tape.value(x).len())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tokenizer::{CLS, SEP};

    fn tiny(share: bool, layers: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            hidden_size: 8,
            embedding_size: 4,
            num_layers: layers,
            num_heads: 2,
            ffn_size: 16,
            max_position: 16,
            share_parameters: share,
            dropout: 0.0,
        }
    }

    fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(cfg, &mut store, &mut seeded(seed)).unwrap();
        (store, enc)
    }

    fn tokens(ids: &[usize]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            segment_ids: vec![0; ids.len()],
            attention_mask: vec![1; ids.len()],
        }
    }

    #[test]
    fn sharing_makes_param_count_independent_of_depth() {
        let (s1, _) = build(&tiny(true, 1), 0);
        let (s4, _) = build(&tiny(true, 4), 0);
        assert_eq!(s1.scalar_count(None), s4.scalar_count(None));
    }

    #[test]
    fn unshared_block_params_double_with_depth() {
        let (s1, _) = build(&tiny(false, 1), 0);
        let (s2, _) = build(&tiny(false, 2), 0);
        let b1 = s1.scalar_count(Some(ParamGroup::Blocks));
        assert_eq!(s2.scalar_count(Some(ParamGroup::Blocks)), 2 * b1);
    }

    #[test]
    fn same_seed_same_init() {
        assert_eq!(build(&tiny(false, 2), 5).0, build(&tiny(false, 2), 5).0);
        assert_ne!(build(&tiny(false, 2), 5).0, build(&tiny(false, 2), 6).0);
    }

    #[test]
    fn init_values() {
        let (store, enc) = build(&tiny(false, 2), 1);
        assert!(store.get(enc.word_embeddings).data().iter().all(|x| x.abs() <= 2.0 * INIT_STD));
        assert!(store.get(enc.blocks[0].query.1).data().iter().all(|&x| x == 0.0));
        assert!(store.get(enc.blocks[1].ffn_norm.0).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let bad_heads = EncoderConfig { num_heads: 3, ..tiny(false, 1) };
        assert!(matches!(EncoderParams::init(&bad_heads, &mut store, &mut rng), Err(Error::Config(_))));
        let bad_layers = EncoderConfig { num_layers: 0, ..tiny(false, 1) };
        assert!(EncoderParams::init(&bad_layers, &mut store, &mut rng).is_err());
        let bad_dropout = EncoderConfig { dropout: 1.0, ..tiny(false, 1) };
        assert!(EncoderParams::init(&bad_dropout, &mut store, &mut rng).is_err());
    }

    #[test]
    fn output_shapes_and_determinism() {
        let (store, enc) = build(&tiny(false, 3), 2);
        let t = tokens(&[CLS, 5, 6, 7, SEP]);
        let stack = enc.encode(&store, &t).unwrap();
        assert_eq!(stack.states.len(), 4);
        assert!(stack.states.iter().all(|s| s.shape() == [5, 8]));
        assert_eq!(stack, enc.encode(&store, &t).unwrap());
    }

    #[test]
    fn overflow_errors() {
        let (store, enc) = build(&tiny(false, 1), 2);
        let long = tokens(&[5; 17]);
        assert!(matches!(enc.encode(&store, &long), Err(Error::Capacity(_))));
        let bad = tokens(&[CLS, 25, SEP]);
        assert!(matches!(enc.encode(&store, &bad), Err(Error::Index { .. })));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let cfg = EncoderConfig { dropout: 0.5, ..tiny(false, 1) };
        let (store, enc) = build(&cfg, 3);
        let t = tokens(&[CLS, 5, 6, SEP]);
        let eval = enc.encode(&store, &t).unwrap();
        let mut rng = seeded(1);
        let mut tape = Tape::with_params(&store);
        let vars = enc.forward(&mut tape, &t, &mut Mode::Train(&mut rng)).unwrap();
        assert_ne!(tape.value(vars[1]), &eval.states[1]);
    }
}
