//! Loss construction, the AdamW training step, epochs and evaluation.

use serde::{Deserialize, Serialize};

use crate::numerics::{argmax, Graph, SeedRng, Var};
use crate::tasks::Example;
use crate::Scalar;

use super::{AdaptedModel, AdamW, ModelError, ModelVars, Result, TrainConfig};

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const EVAL_CHUNK: usize = 64;

/// Loss nodes of one batch.
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub aux: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub ce: f64,
    pub aux: f64,
}

/// Keeps the last `limit` tokens.
pub fn truncate_prompt(prompt: &[u32], limit: usize) -> &[u32] {
    &prompt[prompt.len().saturating_sub(limit)..]
}

impl<T: Scalar> AdaptedModel<T> {
    /// Cross-entropy of each prompt's label at its last position, plus
    /// `lambda_aux` times the router-averaged balance loss.
    pub fn loss_graph(
        &self,
        g: &Graph<T>,
        vars: &ModelVars,
        batch: &[Example],
        cutoff: usize,
        dropout: Option<&SeedRng>,
    ) -> Result<LossVars> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let seqs: Vec<&[u32]> = batch.iter().map(|e| truncate_prompt(&e.prompt, cutoff)).collect();
        let targets: Vec<usize> = batch
            .iter()
            .map(|e| {
                let t = e.label as usize;
                if t < self.config.vocab_size {
                    Ok(t)
                } else {
                    Err(ModelError::TokenOutOfRange {
                        token: e.label,
                        vocab: self.config.vocab_size,
                    })
                }
            })
            .collect::<Result<_>>()?;
        let fwd = self.forward_graph(g, vars, &seqs, dropout, true)?;
        let last = g.select_rows(fwd.hidden, &fwd.last_rows())?;
        let logits = g.matmul_nt(last, vars.head)?;
        let ce = g.cross_entropy(logits, &targets)?;
        let total = match fwd.aux {
            Some(aux) if self.config.lambda_aux != 0.0 => {
                let weighted = g.scale(aux, T::of(self.config.lambda_aux));
                g.add(ce, weighted)?
            }
            _ => ce,
        };
        if !g.scalar(total).is_finite() {
            let culprit = fwd.routing.iter().find(|r| {
                r.outcomes
                    .iter()
                    .any(|o| o.full_softmax.iter().chain(&o.weights).any(|v| !v.is_finite()))
            });
            let location = match culprit {
                Some(r) => format!("layer {} router {}", r.layer, r.tag),
                None if !g.scalar(ce).is_finite() => "cross-entropy".to_string(),
                None => "auxiliary loss".to_string(),
            };
            return Err(ModelError::NonFiniteLoss { location });
        }
        Ok(LossVars { total, ce, aux: fwd.aux })
    }
}

/// One AdamW update of the trainable parameters on `batch`.
pub fn train_step<T: Scalar>(
    model: &mut AdaptedModel<T>,
    batch: &[Example],
    opt: &mut AdamW<T>,
    lr: f64,
    cutoff: usize,
) -> Result<StepLoss> {
    let g = Graph::new();
    let vars = model.bind(&g);
    let rng = model.dropout_rng();
    let loss = model.loss_graph(&g, &vars, batch, cutoff, Some(&rng))?;
    let mut grads = g.backward(loss.total)?;
    let handles = vars.trainable();
    let grads: Vec<_> = handles
        .iter()
        .zip(model.trainable())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| crate::numerics::Tensor::zeros(p.shape())))
        .collect();
    if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
        let name = model
            .named_parameters()
            .into_iter()
            .filter(|(n, _)| AdaptedModel::<T>::is_trainable_name(n))
            .nth(i)
            .map(|(n, _)| n)
            .unwrap_or_default();
        return Err(ModelError::NonFiniteLoss {
            location: format!("gradient of {name}"),
        });
    }
    opt.step(model.trainable_mut(), &grads, lr);
    model.step += 1;
    Ok(StepLoss {
        total: g.scalar(loss.total).to_f64_lossy(),
        ce: g.scalar(loss.ce).to_f64_lossy(),
        aux: loss.aux.map(|a| g.scalar(a).to_f64_lossy()).unwrap_or(0.0),
    })
}

/// Anything that produces next-token scores for a batch of prompts.
pub trait Scorer {
    fn score(&self, prompts: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> Scorer for AdaptedModel<T> {
    fn score(&self, prompts: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let limit = self.config.max_seq_len;
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(EVAL_CHUNK) {
            let cut: Vec<&[u32]> = chunk.iter().map(|p| truncate_prompt(p, limit)).collect();
            for row in self.last_logits(&cut)? {
                out.push(row.into_iter().map(|v| v.to_f64_lossy()).collect());
            }
        }
        Ok(out)
    }
}

/// Highest-scoring choice, or highest-scoring token without choices. Ties
/// go to the earlier candidate.
pub fn predict(scores: &[f64], ex: &Example) -> u32 {
    match &ex.choices {
        Some(choices) => {
            let mut best = choices[0];
            let mut best_score = f64::NEG_INFINITY;
            for &c in choices {
                let s = scores.get(c as usize).copied().unwrap_or(f64::NEG_INFINITY);
                if s > best_score {
                    best = c;
                    best_score = s;
                }
            }
            best
        }
        None => argmax(scores) as u32,
    }
}

/// Fraction of examples whose prediction equals the label.
pub fn evaluate<S: Scorer + ?Sized>(model: &S, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let prompts: Vec<&[u32]> = data.iter().map(|e| e.prompt.as_slice()).collect();
    let scores = model.score(&prompts)?;
    let correct = data
        .iter()
        .zip(&scores)
        .filter(|(ex, s)| predict(s, ex) == ex.label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    pub ce: f64,
    pub aux: f64,
    pub train_accuracy: f64,
}

/// Model, optimizer state and schedule.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: AdaptedModel<T>,
    pub opt: AdamW<T>,
    pub config: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: AdaptedModel<T>, config: TrainConfig) -> Self {
        Self {
            opt: AdamW::new((&config).into()),
            model,
            config,
        }
    }

    /// Shuffled minibatches of `data` for `epoch`.
    pub fn batches<'a>(&self, data: &'a [Example], epoch: usize) -> Vec<Vec<&'a Example>> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        SeedRng::new(self.model.config.seed)
            .split(SHUFFLE_STREAM)
            .split(epoch as u64)
            .shuffle(&mut order);
        order
            .chunks(self.config.batch_size)
            .map(|c| c.iter().map(|&i| &data[i]).collect())
            .collect()
    }

    pub fn step(&mut self, batch: &[Example]) -> Result<StepLoss> {
        train_step(&mut self.model, batch, &mut self.opt, self.config.lr, self.config.cutoff_len)
    }

    /// One pass over `data`; `max_steps` caps the total step count.
    pub fn run_epoch(&mut self, data: &[Example], epoch: usize, max_steps: Option<u64>) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let mut sums = (0.0, 0.0, 0.0);
        let mut n = 0usize;
        for batch in self.batches(data, epoch) {
            if max_steps.is_some_and(|m| self.model.step >= m) {
                break;
            }
            let owned: Vec<Example> = batch.into_iter().cloned().collect();
            let l = self.step(&owned)?;
            sums.0 += l.total;
            sums.1 += l.ce;
            sums.2 += l.aux;
            n += 1;
        }
        let d = n.max(1) as f64;
        Ok(EpochStats {
            epoch,
            steps: self.model.step,
            loss: sums.0 / d,
            ce: sums.1 / d,
            aux: sums.2 / d,
            train_accuracy: evaluate(&self.model, data)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::AllocationPlan;
    use crate::model::ToyTransformerConfig;

    struct Fixed(Vec<f64>);

    impl Scorer for Fixed {
        fn score(&self, prompts: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![self.0.clone(); prompts.len()])
        }
    }

    fn ex(label: u32) -> Example {
        Example::new(vec![1, 2], label, Some(vec![10, 11, 12, 13]))
    }

    #[test]
    fn always_first_choice_on_all_first() {
        let mut scores = vec![0.0; 16];
        scores[10] = 5.0;
        let data = vec![ex(10); 8];
        assert_eq!(evaluate(&Fixed(scores.clone()), &data).unwrap(), 1.0);
        let mixed: Vec<Example> = (0..8).map(|i| ex(10 + i % 4)).collect();
        assert_eq!(evaluate(&Fixed(scores), &mixed).unwrap(), 0.25);
        assert!(matches!(evaluate(&Fixed(vec![]), &[]), Err(ModelError::EmptyDataset)));
    }

    #[test]
    fn ties_prefer_earlier_choice() {
        let e = Example::new(vec![1], 4, Some(vec![4, 2]));
        assert_eq!(predict(&[0.0; 8], &e), 4);
        assert_eq!(predict(&[0.0, 3.0, 1.0], &Example::new(vec![1], 1, None)), 1);
    }

    #[test]
    fn lr_zero_leaves_parameters() {
        let mut c = ToyTransformerConfig::desk(AllocationPlan::new(vec![2, 2], 2));
        c.d_model = 8;
        c.d_ffn = 12;
        c.num_heads = 2;
        c.vocab_size = 16;
        c.max_seq_len = 6;
        c.rank = 2;
        let mut m = AdaptedModel::<f64>::build(&c).unwrap();
        let before = m.clone();
        let mut opt = AdamW::new(Default::default());
        let batch = vec![Example::new(vec![1, 2, 3], 4, None)];
        train_step(&mut m, &batch, &mut opt, 0.0, 64).unwrap();
        assert_eq!(m.named_parameters(), before.named_parameters());
        assert_eq!(m.step, 1);
        assert!(opt.m.iter().any(|t| t.data().iter().any(|&x| x != 0.0)));
        assert!(matches!(train_step(&mut m, &[], &mut opt, 0.0, 64), Err(ModelError::EmptyBatch)));
    }
}
