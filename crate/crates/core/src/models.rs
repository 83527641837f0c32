//! Task heads on top of the encoder: cross-layer fusion of `[CLS]` states, a
//! linear answer head, and the candidate layouts of both subtasks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{EncoderConfig, EncoderParams, LayerStack, Mode, INIT_STD};
use crate::error::{Error, Result};
use crate::param::{ParamGroup, ParamId, ParamStore};
use crate::rng::{derive_seed, seeded, truncated_normal};
use crate::tensor::Tensor;
use crate::tokenizer::{encode_pair, encode_single, encode_triple, TokenSequence, Vocab};

/// Which model a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Dual-order paired encoding of both statements.
    SenMaking,
    /// Statement, hint and one option per sequence; three candidates.
    Explanation,
    /// Each statement encoded on its own.
    BaselineSenMaking,
}

impl Task {
    pub fn num_candidates(self) -> usize {
        match self {
            Task::Explanation => 3,
            Task::SenMaking | Task::BaselineSenMaking => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::SenMaking => "sen_making",
            Task::Explanation => "explanation",
            Task::BaselineSenMaking => "baseline_sen_making",
        }
    }
}

/// Trainable fusion logits `ω` over the last `window` block outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub omega: ParamId,
    pub window: usize,
}

impl FusionWeights {
    /// Registers `ω = 0` (uniform weights) in `store`.
    pub fn init(store: &mut ParamStore, window: usize, num_layers: usize) -> Result<Self> {
        check_window(window, num_layers)?;
        let omega = store.add("fusion.omega", ParamGroup::Fusion, Tensor::zeros(&[window]));
        Ok(Self { omega, window })
    }

    /// `softmax(ω)`.
    pub fn alphas(&self, store: &ParamStore) -> Vec<f64> {
        store
            .get(self.omega)
            .softmax(0)
            .map(Tensor::into_data)
            .unwrap_or_default()
    }
}

fn check_window(window: usize, num_layers: usize) -> Result<()> {
    if window == 0 || window > num_layers {
        return Err(Error::Config(format!(
            "fusion window {window} must lie in [1, {num_layers}]"
        )));
    }
    Ok(())
}

/// Records the fused `[1, d]` representation of the sequence whose first row
/// is `start`: `Σ_j α_j · CLS(state[L − K + 1 + j])` with `α = softmax(ω)`.
pub fn fuse_on_tape(tape: &mut Tape<'_>, states: &[Var], start: usize, alphas: Var) -> Result<Var> {
    let window = tape.value(alphas).len();
    let layers = states.len() - 1;
    check_window(window, layers)?;
    let rows = states[layers + 1 - window..]
        .iter()
        .map(|&s| tape.row(s, start))
        .collect::<Result<Vec<_>>>()?;
    let rows = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
    tape.combine(alphas, rows)
}

/// Fuses the `[CLS]` vectors of the last `omega.len()` block outputs.
pub fn fuse(stack: &LayerStack, omega: &[f64]) -> Result<Vec<f64>> {
    check_window(omega.len(), stack.num_layers())?;
    let mut tape = Tape::new();
    let states: Vec<Var> = stack.states.iter().map(|s| tape.constant(s.clone())).collect();
    let omega = tape.constant(Tensor::vector(omega.to_vec()));
    let alphas = tape.softmax(omega, 0)?;
    let x = fuse_on_tape(&mut tape, &states, 0, alphas)?;
    Ok(tape.value(x).data().to_vec())
}

/// Scores a fused representation: `w · x + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnswerHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AnswerHead {
    pub fn init(store: &mut ParamStore, hidden: usize, rng: &mut crate::rng::SeededRng) -> Self {
        let data = (0..hidden).map(|_| truncated_normal(rng, INIT_STD)).collect();
        let weight = store.add(
            "head.weight",
            ParamGroup::Head,
            Tensor::new(alloc::vec![hidden, 1], data).expect("shape matches"),
        );
        let bias = store.add("head.bias", ParamGroup::Head, Tensor::zeros(&[1]));
        Self { weight, bias }
    }
}

/// Architecture of a task model: the encoder plus the fusion window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion_window: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        check_window(self.fusion_window, self.encoder.num_layers)
    }
}

/// RNG streams derived from the model seed. Fusion and head draw from their
/// own stream so a fresh head is the same whatever happened to the encoder.
const ENCODER_STREAM: u64 = 0;
const HEAD_STREAM: u64 = 1;

/// Encoder, fusion and head sharing one parameter store, plus the vocabulary
/// used to build inputs. One set of weights scores every candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct ComveModel {
    pub task: Task,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub encoder: EncoderParams,
    pub fusion: FusionWeights,
    pub head: AnswerHead,
    pub store: ParamStore,
}

impl ComveModel {
    pub fn init(task: Task, config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() > config.encoder.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the encoder only embeds {}",
                vocab.len(),
                config.encoder.vocab_size
            )));
        }
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(
            &config.encoder,
            &mut store,
            &mut seeded(derive_seed(seed, ENCODER_STREAM)),
        )?;
        let fusion = FusionWeights::init(&mut store, config.fusion_window, config.encoder.num_layers)?;
        let head = AnswerHead::init(
            &mut store,
            config.encoder.hidden_size,
            &mut seeded(derive_seed(seed, HEAD_STREAM)),
        );
        Ok(Self {
            task,
            config: config.clone(),
            vocab,
            encoder,
            fusion,
            head,
            store,
        })
    }

    fn max_len(&self) -> usize {
        self.config.encoder.max_position
    }

    /// `[CLS] s1 [SEP] s2 [SEP]` and `[CLS] s2 [SEP] s1 [SEP]`.
    pub fn dual_order_inputs(&self, s1: &str, s2: &str) -> Result<Vec<TokenSequence>> {
        Ok(alloc::vec![
            encode_pair(s1, s2, &self.vocab, self.max_len())?,
            encode_pair(s2, s1, &self.vocab, self.max_len())?,
        ])
    }

    /// `[CLS] s1 [SEP]` and `[CLS] s2 [SEP]`.
    pub fn independent_inputs(&self, s1: &str, s2: &str) -> Result<Vec<TokenSequence>> {
        Ok(alloc::vec![
            encode_single(s1, &self.vocab, self.max_len())?,
            encode_single(s2, &self.vocab, self.max_len())?,
        ])
    }

    /// `[CLS] statement [SEP] hint [SEP] option [SEP]` for each of the three options.
    pub fn explanation_inputs(&self, statement: &str, hint: &str, options: &[&str]) -> Result<Vec<TokenSequence>> {
        if options.len() != 3 {
            return Err(Error::Arity {
                expected: 3,
                got: options.len(),
            });
        }
        options
            .iter()
            .map(|o| encode_triple(statement, hint, o, &self.vocab, self.max_len()))
            .collect()
    }

    /// Records the candidate probabilities of several groups in one encoder
    /// pass. Every group must hold the same number of candidates; the result
    /// is a `[groups, candidates]` matrix of row-wise softmaxed scores.
    pub fn probabilities_on_tape(
        &self,
        tape: &mut Tape<'_>,
        groups: &[&[TokenSequence]],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let scores = self.scores_on_tape(tape, groups, mode)?;
        tape.softmax(scores, 1)
    }

    /// Pre-softmax scores as a `[groups, candidates]` matrix.
    pub fn scores_on_tape(
        &self,
        tape: &mut Tape<'_>,
        groups: &[&[TokenSequence]],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let width = groups.first().map_or(0, |g| g.len());
        if width == 0 || groups.iter().any(|g| g.len() != width) {
            return Err(Error::Input("candidate groups must be non-empty and equally sized".into()));
        }
        let flat: Vec<&TokenSequence> = groups.iter().flat_map(|g| g.iter()).collect();
        let batch = self.encoder.forward_batch(tape, &flat, mode)?;
        let omega = tape.param(self.fusion.omega);
        let alphas = tape.softmax(omega, 0)?;
        let fused = batch
            .starts
            .iter()
            .map(|&start| fuse_on_tape(tape, &batch.states, start, alphas))
            .collect::<Result<Vec<_>>>()?;
        let x = tape.concat_rows(&fused)?;
        let w = tape.param(self.head.weight);
        let b = tape.param(self.head.bias);
        let s = tape.matmul(x, w)?;
        let s = tape.add_row(s, b)?;
        tape.reshape(s, &[groups.len(), width])
    }

    /// Eval-mode probabilities over one group of candidates.
    pub fn candidate_probabilities(&self, candidates: &[TokenSequence]) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.store);
        let p = self.probabilities_on_tape(&mut tape, &[candidates], &mut Mode::Eval)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Eval-mode pre-softmax scores over one group of candidates.
    pub fn candidate_scores(&self, candidates: &[TokenSequence]) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.store);
        let s = self.scores_on_tape(&mut tape, &[candidates], &mut Mode::Eval)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Probability that each statement is the sensible one, from the two
    /// concatenation orders.
    pub fn senmaking_forward(&self, s1: &str, s2: &str) -> Result<[f64; 2]> {
        two(self.candidate_probabilities(&self.dual_order_inputs(s1, s2)?)?)
    }

    /// As [`Self::senmaking_forward`] but scoring each statement alone.
    pub fn baseline_senmaking_forward(&self, s1: &str, s2: &str) -> Result<[f64; 2]> {
        two(self.candidate_probabilities(&self.independent_inputs(s1, s2)?)?)
    }

    /// Probability that each option explains why `statement` is nonsensical.
    pub fn explanation_forward(&self, statement: &str, hint: &str, options: &[&str]) -> Result<Vec<f64>> {
        self.candidate_probabilities(&self.explanation_inputs(statement, hint, options)?)
    }

    /// Eval-mode encoder states for one sequence.
    pub fn encode(&self, tokens: &TokenSequence) -> Result<LayerStack> {
        self.encoder.encode(&self.store, tokens)
    }

    /// Parameter names grouped by partition, in registration order.
    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.store
            .entries()
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.name.clone())
            .collect()
    }
}

fn two(p: Vec<f64>) -> Result<[f64; 2]> {
    match p.as_slice() {
        &[a, b] => Ok([a, b]),
        _ => Err(Error::Arity {
            expected: 2,
            got: p.len(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_vocab;

    fn tiny_model(task: Task, layers: usize, window: usize) -> ComveModel {
        let vocab = train_vocab(
            &[
                "he drinks a cup of tea in the morning",
                "he drinks a book in the morning",
                "a book is a kind of document",
                "to drink something it must be a beverage",
            ],
            80,
        )
        .unwrap();
        let config = ModelConfig {
            encoder: EncoderConfig {
                vocab_size: vocab.len(),
                hidden_size: 16,
                embedding_size: 8,
                num_layers: layers,
                num_heads: 2,
                ffn_size: 32,
                max_position: 32,
                share_parameters: false,
                dropout: 0.0,
            },
            fusion_window: window,
        };
        ComveModel::init(task, &config, vocab, 3).unwrap()
    }

    #[test]
    fn window_must_fit_depth() {
        let mut store = ParamStore::new();
        assert!(matches!(FusionWeights::init(&mut store, 3, 2), Err(Error::Config(_))));
        assert!(matches!(FusionWeights::init(&mut store, 0, 2), Err(Error::Config(_))));
        let m = tiny_model(Task::SenMaking, 2, 2);
        let stack = m.encode(&m.dual_order_inputs("he drinks tea", "he drinks a book").unwrap()[0]).unwrap();
        assert!(matches!(fuse(&stack, &[0.0; 3]), Err(Error::Config(_))));
    }

    #[test]
    fn single_window_is_last_cls() {
        let m = tiny_model(Task::SenMaking, 3, 1);
        let stack = m.encode(&m.independent_inputs("he drinks tea", "x").unwrap()[0]).unwrap();
        assert_eq!(fuse(&stack, &[0.7]).unwrap(), stack.cls(3));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = tiny_model(Task::Explanation, 2, 2);
        let p = m
            .explanation_forward(
                "he drinks a book",
                "he drinks tea",
                &["a book is a kind of document", "to drink something", "tea"],
            )
            .unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let [a, b] = m.senmaking_forward("he drinks tea", "he drinks a book").unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn explanation_needs_three_options() {
        let m = tiny_model(Task::Explanation, 2, 2);
        for n in [2usize, 4] {
            let opts = alloc::vec!["tea"; n];
            assert_eq!(
                m.explanation_forward("a", "b", &opts),
                Err(Error::Arity { expected: 3, got: n })
            );
        }
    }

    #[test]
    fn baseline_score_ignores_partner() {
        let m = tiny_model(Task::BaselineSenMaking, 2, 2);
        let a = m.candidate_scores(&m.independent_inputs("he drinks tea", "he drinks a book").unwrap()).unwrap();
        let b = m.candidate_scores(&m.independent_inputs("he drinks tea", "a kind of document").unwrap()).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_ne!(a[1], b[1]);
    }

    #[test]
    fn identical_candidates_are_uniform() {
        let m = tiny_model(Task::SenMaking, 2, 2);
        assert_eq!(m.senmaking_forward("he drinks tea", "he drinks tea").unwrap(), [0.5, 0.5]);
        assert_eq!(m.baseline_senmaking_forward("a book", "a book").unwrap(), [0.5, 0.5]);
        let p = m.explanation_forward("s", "h", &["tea"; 3]).unwrap();
        assert!(p.iter().all(|&x| x == 1.0 / 3.0));
    }
}
