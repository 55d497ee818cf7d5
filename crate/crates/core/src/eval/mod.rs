//! Perplexity, cloze accuracy, parameter counting, weight tracing, ablations.

pub mod ablation;
pub mod counting;
pub mod synthetic;
pub mod trace;

use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{LayerState, PerspectiveModel, PerspectiveState, RwkvModel};

pub use ablation::{
    run_ablation, run_ablations, AblationArm, AblationAxis, AblationReport, AblationSettings,
    ArmResult,
};
pub use counting::{
    count_allocated, count_parameters, count_parameters_against, ParamCountReport, PUBLISHED_ROWS,
};
pub use synthetic::{CopyCorpusSpec, SyntheticCorpus};
pub use trace::{
    parse_trace_csv, render_trace_svg, trace_decode, trace_to_csv, trace_weights, TraceRecord,
};

/// Anything that turns a token stream into next-token logits, one step at a time.
pub trait LanguageModel {
    type State;
    type Scalar: Real;

    fn vocab(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    /// Logits for the token following `token`.
    fn next_logits(&self, token: u32, state: &mut Self::State) -> Result<Vec<Self::Scalar>>;
}

impl<F: Real> LanguageModel for RwkvModel<F> {
    type State = Vec<LayerState<F>>;
    type Scalar = F;

    fn vocab(&self) -> usize {
        self.shared.vocab()
    }

    fn initial_state(&self) -> Self::State {
        self.new_state()
    }

    fn next_logits(&self, token: u32, state: &mut Self::State) -> Result<Vec<F>> {
        self.step(token, state)
    }
}

impl<F: Real> LanguageModel for PerspectiveModel<F> {
    type State = PerspectiveState<F>;
    type Scalar = F;

    fn vocab(&self) -> usize {
        self.shared.vocab()
    }

    fn initial_state(&self) -> Self::State {
        self.new_state()
    }

    fn next_logits(&self, token: u32, state: &mut Self::State) -> Result<Vec<F>> {
        Ok(self.step(token, state)?.logits)
    }
}

/// `-log softmax(logits)[target]`, evaluated in 64-bit.
pub fn token_nll<F: Real>(logits: &[F], target: u32) -> Result<f64> {
    let vocab = logits.len();
    if target as usize >= vocab {
        return Err(Error::TokenOutOfRange {
            token: target,
            vocab,
        });
    }
    let wide: Vec<f64> = logits.iter().map(|x| x.to_f64().unwrap()).collect();
    Ok(kernels::log_sum_exp(&wide) - wide[target as usize])
}

/// Running next-token log-likelihood over a stream fed in arbitrary chunks.
/// The prediction made by the last token of one chunk is scored against the
/// first token of the next, so chunking never changes the result.
pub struct NllStream<'m, M: LanguageModel> {
    model: &'m M,
    state: M::State,
    pending: Option<Vec<M::Scalar>>,
    total: f64,
    count: usize,
}

impl<'m, M: LanguageModel> NllStream<'m, M> {
    pub fn new(model: &'m M) -> Self {
        Self {
            model,
            state: model.initial_state(),
            pending: None,
            total: 0.0,
            count: 0,
        }
    }

    pub fn feed(&mut self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if let Some(logits) = self.pending.take() {
                self.total += token_nll(&logits, t)?;
                self.count += 1;
            }
            self.pending = Some(self.model.next_logits(t, &mut self.state)?);
        }
        Ok(())
    }

    /// Total negative log-likelihood and number of scored predictions.
    pub fn totals(&self) -> (f64, usize) {
        (self.total, self.count)
    }

    pub fn perplexity(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyInput("no scored predictions"));
        }
        Ok((self.total / self.count as f64).exp())
    }
}

/// `exp(mean NLL)` of every next-token prediction along one stream.
pub fn perplexity<M: LanguageModel>(model: &M, tokens: &[u32]) -> Result<f64> {
    let mut stream = NllStream::new(model);
    stream.feed(tokens)?;
    stream.perplexity()
}

/// Perplexity over independent contexts, each started from an empty state and
/// pooled over all of their predictions.
pub fn perplexity_contexts<M: LanguageModel>(model: &M, contexts: &[Vec<u32>]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0);
    for c in contexts {
        let mut stream = NllStream::new(model);
        stream.feed(c)?;
        let (t, n) = stream.totals();
        total += t;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyInput("no scored predictions"));
    }
    Ok((total / count as f64).exp())
}

/// A context and the single token that should follow it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClozeItem {
    pub context: Vec<u32>,
    pub answer: u32,
}

/// Fraction of items whose argmax next-token logit is the answer.
pub fn cloze_accuracy<M: LanguageModel>(model: &M, items: &[ClozeItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::EmptyInput("cloze dataset"));
    }
    let mut correct = 0usize;
    for item in items {
        let mut state = model.initial_state();
        let mut logits = None;
        for &t in &item.context {
            logits = Some(model.next_logits(t, &mut state)?);
        }
        let logits = logits.ok_or(Error::EmptyInput("cloze context"))?;
        if kernels::argmax(&logits) == item.answer as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token distributions indexed by step count.
    struct Scripted {
        vocab: usize,
        logits: Box<dyn Fn(usize, u32) -> Vec<f64>>,
    }

    impl LanguageModel for Scripted {
        type State = usize;
        type Scalar = f64;

        fn vocab(&self) -> usize {
            self.vocab
        }

        fn initial_state(&self) -> usize {
            0
        }

        fn next_logits(&self, token: u32, state: &mut usize) -> Result<Vec<f64>> {
            let out = (self.logits)(*state, token);
            *state += 1;
            Ok(out)
        }
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let m = Scripted {
            vocab: 256,
            logits: Box::new(|_, _| vec![0.0; 256]),
        };
        let tokens: Vec<u32> = (0..50).map(|i| (i * 37) % 256).collect();
        assert!((perplexity(&m, &tokens).unwrap() - 256.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_gives_perplexity_one() {
        let tokens = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let m = Scripted {
            vocab: 10,
            logits: Box::new(move |step, _| {
                let mut l = vec![-1e4; 10];
                if let Some(next) = tokens.get(step + 1) {
                    l[*next as usize] = 0.0;
                }
                l
            }),
        };
        assert_eq!(perplexity(&m, &tokens).unwrap(), 1.0);
    }

    #[test]
    fn two_predictions_at_half_and_quarter() {
        let m = Scripted {
            vocab: 4,
            logits: Box::new(|step, _| {
                let p: [f64; 4] = if step == 0 {
                    [0.5, 0.5 / 3.0, 0.5 / 3.0, 0.5 / 3.0]
                } else {
                    [0.25; 4]
                };
                p.iter().map(|x| x.ln()).collect()
            }),
        };
        let ppl = perplexity(&m, &[2, 0, 3]).unwrap();
        assert!((ppl - 8f64.sqrt()).abs() < 1e-12, "{ppl}");
    }

    #[test]
    fn empty_inputs_are_errors() {
        let m = Scripted {
            vocab: 2,
            logits: Box::new(|_, _| vec![0.0; 2]),
        };
        assert!(perplexity(&m, &[1]).is_err());
        assert!(cloze_accuracy(&m, &[]).is_err());
    }

    #[test]
    fn cloze_against_enumerated_argmaxes() {
        // Logits depend on the last token only: argmax is (token * 7 + 3) % 11.
        let m = Scripted {
            vocab: 11,
            logits: Box::new(|_, t| {
                (0..11)
                    .map(|j| if j == (t * 7 + 3) % 11 { 1.0 } else { 0.0 })
                    .collect()
            }),
        };
        let items: Vec<ClozeItem> = (0..20u32)
            .map(|i| ClozeItem {
                context: vec![i % 11, (i * 3) % 11],
                answer: if i % 4 == 0 {
                    (((i * 3) % 11) * 7 + 3) % 11
                } else {
                    0
                },
            })
            .collect();
        let expected = items
            .iter()
            .filter(|it| it.answer == (it.context[1] * 7 + 3) % 11)
            .count() as f64
            / 20.0;
        assert_eq!(cloze_accuracy(&m, &items).unwrap(), expected);
        let always_right: Vec<ClozeItem> = items
            .iter()
            .map(|it| ClozeItem {
                answer: (it.context[1] * 7 + 3) % 11,
                ..it.clone()
            })
            .collect();
        assert_eq!(cloze_accuracy(&m, &always_right).unwrap(), 1.0);
        let always_wrong: Vec<ClozeItem> = always_right
            .iter()
            .map(|it| ClozeItem {
                answer: (it.answer + 1) % 11,
                ..it.clone()
            })
            .collect();
        assert_eq!(cloze_accuracy(&m, &always_wrong).unwrap(), 0.0);
    }
}
