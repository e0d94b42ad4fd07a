//! Pre-LN decoder-only transformer with every linear map adapted.
//!
//! Block: `h += O(attn(LN1 h))`, `h += Down(silu(Gate m) * Up m)` with
//! `m = LN2 h`, then a final LN and an untied LM head. Embeddings, norms,
//! frozen matrices and the head are constants on the tape.

use crate::adapters::{load_balance_graph, AdaptedLinear, LinearVars, MatrixTag, RoutingOutcome};
use crate::numerics::{Graph, SeedRng, Tensor, Var};
use crate::Scalar;

use super::{ModelError, Result, ToyTransformerConfig};

const LN_EPS: f64 = 1e-5;
const DROPOUT_STREAM: u64 = 0x64726f70;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    /// Indexed by [`MatrixTag::index`].
    pub linears: Vec<AdaptedLinear<T>>,
}

impl<T> DecoderBlock<T> {
    pub fn linear(&self, tag: MatrixTag) -> &AdaptedLinear<T> {
        &self.linears[tag.index()]
    }

    pub fn linear_mut(&mut self, tag: MatrixTag) -> &mut AdaptedLinear<T> {
        &mut self.linears[tag.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel<T> {
    pub config: ToyTransformerConfig,
    pub tok_embed: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<DecoderBlock<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
    pub lm_head: Tensor<T>,
    /// Number of optimizer steps taken.
    pub step: u64,
}

/// Routing decisions of one router over every token of a pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterRecord<T> {
    pub layer: usize,
    pub tag: MatrixTag,
    pub outcomes: Vec<RoutingOutcome<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    /// `tokens x vocab`, causal next-token logits.
    pub logits: Tensor<T>,
    pub aux_loss: T,
    pub routing: Vec<RouterRecord<T>>,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
    pub linears: Vec<LinearVars>,
}

/// Tape handles for a whole model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub tok: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: (Var, Var),
    pub head: Var,
}

impl ModelVars {
    /// Trainable handles in [`AdaptedModel::trainable`] order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for l in &b.linears {
                for &(a, bb) in &l.experts {
                    out.push(a);
                    out.push(bb);
                }
                out.push(l.router);
            }
        }
        out
    }
}

/// Result of a batched pass on the tape.
pub struct GraphForward<T> {
    /// `tokens x d_model` after the final norm, sequences stacked.
    pub hidden: Var,
    /// Row of the first token of each sequence.
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
    /// Balance loss averaged over routers (`1 x 1`), when adapters ran.
    pub aux: Option<Var>,
    pub routing: Vec<RouterRecord<T>>,
}

impl<T> GraphForward<T> {
    pub fn last_rows(&self) -> Vec<usize> {
        self.offsets.iter().zip(&self.lens).map(|(o, l)| o + l - 1).collect()
    }
}

fn ones<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::filled(&[1, n], T::one())
}

fn zeros<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::zeros(&[1, n])
}

impl<T: Scalar> AdaptedModel<T> {
    /// Seeded frozen base with fresh zero-delta adapters.
    pub fn build(config: &ToyTransformerConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let root = SeedRng::new(c.seed);
        let lora = c.lora();
        let mut blocks = Vec::with_capacity(c.num_layers);
        for (j, &n) in c.allocation.counts().iter().enumerate() {
            let lrng = root.split(100 + j as u64);
            let mut linears = Vec::with_capacity(MatrixTag::ALL.len());
            for tag in MatrixTag::ALL {
                let (in_dim, out_dim) = tag.dims(c.d_model, c.d_ffn);
                let base = lrng
                    .split(tag.index() as u64)
                    .normal_tensor(&[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt());
                let mut arng = lrng.split(50 + tag.index() as u64);
                let mut lin = AdaptedLinear::init(base, n, c.top_k(), &lora, j, tag, &mut arng)
                    .map_err(|source| ModelError::Adapter { layer: j, tag, source })?;
                lin.router.mode = c.routing;
                linears.push(lin);
            }
            blocks.push(DecoderBlock {
                ln1_gain: ones(c.d_model),
                ln1_bias: zeros(c.d_model),
                ln2_gain: ones(c.d_model),
                ln2_bias: zeros(c.d_model),
                linears,
            });
        }
        Ok(Self {
            config: c.clone(),
            tok_embed: root.split(1).normal_tensor(&[c.vocab_size, c.d_model], 1.0),
            pos_embed: root.split(2).normal_tensor(&[c.max_seq_len, c.d_model], 1.0),
            blocks,
            final_gain: ones(c.d_model),
            final_bias: zeros(c.d_model),
            lm_head: root
                .split(3)
                .normal_tensor(&[c.vocab_size, c.d_model], 1.0 / (c.d_model as f64).sqrt()),
            step: 0,
        })
    }

    /// Every parameter with its checkpoint name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_embed".to_string(), &self.tok_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (j, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{j}.ln1.gain"), &b.ln1_gain));
            out.push((format!("layers.{j}.ln1.bias"), &b.ln1_bias));
            out.push((format!("layers.{j}.ln2.gain"), &b.ln2_gain));
            out.push((format!("layers.{j}.ln2.bias"), &b.ln2_bias));
            for (tag, l) in MatrixTag::ALL.iter().zip(&b.linears) {
                out.push((format!("layers.{j}.{tag}.base"), &l.base));
                for (i, e) in l.experts.iter().enumerate() {
                    out.push((format!("layers.{j}.{tag}.expert{i}.a"), &e.a));
                    out.push((format!("layers.{j}.{tag}.expert{i}.b"), &e.b));
                }
                out.push((format!("layers.{j}.{tag}.router"), &l.router.weight));
            }
        }
        out.push(("final_norm.gain".to_string(), &self.final_gain));
        out.push(("final_norm.bias".to_string(), &self.final_bias));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable view in [`Self::named_parameters`] order.
    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_embed".to_string(), &mut self.tok_embed),
            ("pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (j, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("layers.{j}.ln1.gain"), &mut b.ln1_gain));
            out.push((format!("layers.{j}.ln1.bias"), &mut b.ln1_bias));
            out.push((format!("layers.{j}.ln2.gain"), &mut b.ln2_gain));
            out.push((format!("layers.{j}.ln2.bias"), &mut b.ln2_bias));
            for (tag, l) in MatrixTag::ALL.iter().zip(b.linears.iter_mut()) {
                out.push((format!("layers.{j}.{tag}.base"), &mut l.base));
                for (i, e) in l.experts.iter_mut().enumerate() {
                    out.push((format!("layers.{j}.{tag}.expert{i}.a"), &mut e.a));
                    out.push((format!("layers.{j}.{tag}.expert{i}.b"), &mut e.b));
                }
                out.push((format!("layers.{j}.{tag}.router"), &mut l.router.weight));
            }
        }
        out.push(("final_norm.gain".to_string(), &mut self.final_gain));
        out.push(("final_norm.bias".to_string(), &mut self.final_bias));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    /// Expert factors and router weights: the only trainable parameters.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for l in &b.linears {
                for e in &l.experts {
                    out.push(&e.a);
                    out.push(&e.b);
                }
                out.push(&l.router.weight);
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for l in &mut b.linears {
                for e in &mut l.experts {
                    out.push(&mut e.a);
                    out.push(&mut e.b);
                }
                out.push(&mut l.router.weight);
            }
        }
        out
    }

    pub fn num_trainable(&self) -> u64 {
        self.trainable().iter().map(|t| t.len() as u64).sum()
    }

    pub fn is_trainable_name(name: &str) -> bool {
        name.ends_with(".router") || name.ends_with(".a") || name.ends_with(".b")
    }

    /// FNV-1a over the bits of every frozen parameter.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.named_parameters() {
            if Self::is_trainable_name(&name) {
                continue;
            }
            for &v in t.data() {
                for byte in v.to_f64_lossy().to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Frozen tensors become constants, trainable ones tracked leaves.
    pub fn bind(&self, g: &Graph<T>) -> ModelVars {
        let vars: Vec<Var> = self.trainable().into_iter().map(|t| g.param(t.clone())).collect();
        self.bind_with(g, &vars)
    }

    /// Like [`Self::bind`] but with caller-provided trainable handles, in
    /// [`Self::trainable`] order.
    pub fn bind_with(&self, g: &Graph<T>, trainable: &[Var]) -> ModelVars {
        let mut it = trainable.iter().copied();
        let mut next = || it.next().expect("one handle per trainable tensor");
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1: (g.constant(b.ln1_gain.clone()), g.constant(b.ln1_bias.clone())),
                ln2: (g.constant(b.ln2_gain.clone()), g.constant(b.ln2_bias.clone())),
                linears: b
                    .linears
                    .iter()
                    .map(|l| LinearVars {
                        base: g.constant(l.base.clone()),
                        experts: l.experts.iter().map(|_| (next(), next())).collect(),
                        router: next(),
                    })
                    .collect(),
            })
            .collect();
        ModelVars {
            tok: g.constant(self.tok_embed.clone()),
            pos: g.constant(self.pos_embed.clone()),
            blocks,
            final_norm: (g.constant(self.final_gain.clone()), g.constant(self.final_bias.clone())),
            head: g.constant(self.lm_head.clone()),
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Dropout stream for the current step.
    pub fn dropout_rng(&self) -> SeedRng {
        SeedRng::new(self.config.seed).split(DROPOUT_STREAM).split(self.step)
    }

    /// Batched pass over stacked sequences. With `adapters = false` only
    /// the frozen path runs.
    pub fn forward_graph(
        &self,
        g: &Graph<T>,
        vars: &ModelVars,
        seqs: &[&[u32]],
        dropout: Option<&SeedRng>,
        adapters: bool,
    ) -> Result<GraphForward<T>> {
        if seqs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check_tokens(s)?;
            offsets.push(ids.len());
            lens.push(s.len());
            ids.extend(s.iter().map(|&t| t as usize));
            positions.extend(0..s.len());
        }
        let c = &self.config;
        let eps = T::of(LN_EPS);
        let tok = g.select_rows(vars.tok, &ids)?;
        let pos = g.select_rows(vars.pos, &positions)?;
        let mut h = g.add(tok, pos)?;
        let mut routing = Vec::new();
        let mut aux_terms = Vec::new();

        for (j, (block, bv)) in self.blocks.iter().zip(&vars.blocks).enumerate() {
            let mut lin = |tag: MatrixTag, x: Var| -> Result<Var> {
                let lv = &bv.linears[tag.index()];
                if !adapters {
                    return Ok(g.matmul_nt(x, lv.base)?);
                }
                let stream = dropout.map(|r| r.split((j * MatrixTag::ALL.len() + tag.index()) as u64));
                let (y, routed) = block.linears[tag.index()]
                    .forward_graph(g, lv, x, stream.as_ref())
                    .map_err(|source| ModelError::Adapter { layer: j, tag, source })?;
                let aux = load_balance_graph(g, &routed)
                    .map_err(|source| ModelError::Adapter { layer: j, tag, source })?;
                aux_terms.push(aux);
                routing.push(RouterRecord {
                    layer: j,
                    tag,
                    outcomes: routed.outcomes,
                });
                Ok(y)
            };

            let a = g.layer_norm(h, bv.ln1.0, bv.ln1.1, eps)?;
            let q = lin(MatrixTag::Q, a)?;
            let k = lin(MatrixTag::K, a)?;
            let v = lin(MatrixTag::V, a)?;
            let ctx = attention(g, q, k, v, &offsets, &lens, c.num_heads, c.d_model)?;
            let o = lin(MatrixTag::O, ctx)?;
            h = g.add(h, o)?;

            let m = g.layer_norm(h, bv.ln2.0, bv.ln2.1, eps)?;
            let gate = lin(MatrixTag::Gate, m)?;
            let up = lin(MatrixTag::Up, m)?;
            let act = g.mul(g.silu(gate), up)?;
            let down = lin(MatrixTag::Down, act)?;
            h = g.add(h, down)?;
        }
        let hidden = g.layer_norm(h, vars.final_norm.0, vars.final_norm.1, eps)?;
        let aux = match aux_terms.split_first() {
            None => None,
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = g.add(acc, t)?;
                }
                Some(g.scale(acc, T::one() / T::of_usize(aux_terms.len())))
            }
        };
        Ok(GraphForward {
            hidden,
            offsets,
            lens,
            aux,
            routing,
        })
    }

    /// Causal logits for one sequence. `train_mode` enables expert-input
    /// dropout drawn from the step's stream.
    pub fn forward(&self, tokens: &[u32], train_mode: bool) -> Result<ForwardOutput<T>> {
        let g = Graph::new();
        let vars = self.bind_frozen(&g);
        let rng = train_mode.then(|| self.dropout_rng());
        let out = self.forward_graph(&g, &vars, &[tokens], rng.as_ref(), true)?;
        let logits = g.matmul_nt(out.hidden, vars.head)?;
        Ok(ForwardOutput {
            logits: g.value(logits),
            aux_loss: out.aux.map(|a| g.scalar(a)).unwrap_or_else(T::zero),
            routing: out.routing,
        })
    }

    /// Logits of the frozen base alone.
    pub fn forward_base(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let g = Graph::new();
        let vars = self.bind_frozen(&g);
        let out = self.forward_graph(&g, &vars, &[tokens], None, false)?;
        Ok(g.value(g.matmul_nt(out.hidden, vars.head)?))
    }

    /// Eval-mode next-token logits at the last position of each prompt.
    pub fn last_logits(&self, prompts: &[&[u32]]) -> Result<Vec<Vec<T>>> {
        let g = Graph::new();
        let vars = self.bind_frozen(&g);
        let out = self.forward_graph(&g, &vars, prompts, None, true)?;
        let last = g.select_rows(out.hidden, &out.last_rows())?;
        let logits = g.value(g.matmul_nt(last, vars.head)?);
        Ok((0..logits.rows()).map(|r| logits.row_slice(r).to_vec()).collect())
    }

    /// Eval-mode routing of every token of every prompt.
    pub fn route_tokens(&self, prompts: &[&[u32]]) -> Result<Vec<RouterRecord<T>>> {
        let g = Graph::new();
        let vars = self.bind_frozen(&g);
        Ok(self.forward_graph(&g, &vars, prompts, None, true)?.routing)
    }

    fn bind_frozen(&self, g: &Graph<T>) -> ModelVars {
        let vars: Vec<Var> = self.trainable().into_iter().map(|t| g.constant(t.clone())).collect();
        self.bind_with(g, &vars)
    }
}

/// Causal multi-head self-attention, run per sequence.
#[allow(clippy::too_many_arguments)]
fn attention<T: Scalar>(
    g: &Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    offsets: &[usize],
    lens: &[usize],
    heads: usize,
    d_model: usize,
) -> Result<Var> {
    let dh = d_model / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let mut seqs = Vec::with_capacity(offsets.len());
    for (&start, &len) in offsets.iter().zip(lens) {
        let (qs, ks, vs) = (g.slice_rows(q, start, len)?, g.slice_rows(k, start, len)?, g.slice_rows(v, start, len)?);
        let mut parts = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice_cols(qs, hd * dh, dh)?;
            let kh = g.slice_cols(ks, hd * dh, dh)?;
            let vh = g.slice_cols(vs, hd * dh, dh)?;
            let scores = g.scale(g.matmul_nt(qh, kh)?, scale);
            let p = g.causal_softmax(scores)?;
            parts.push(g.matmul(p, vh)?);
        }
        seqs.push(if heads == 1 { parts[0] } else { g.concat_cols(&parts)? });
    }
    Ok(if seqs.len() == 1 { seqs[0] } else { g.concat_rows(&seqs)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::AllocationPlan;

    fn tiny(counts: Vec<usize>, k: usize) -> ToyTransformerConfig {
        let mut c = ToyTransformerConfig::desk(AllocationPlan::new(counts, k));
        c.d_model = 16;
        c.d_ffn = 24;
        c.num_heads = 2;
        c.vocab_size = 32;
        c.max_seq_len = 8;
        c.rank = 4;
        c.seed = 9;
        c
    }

    #[test]
    fn same_seed_same_logits() {
        let c = tiny(vec![2, 2], 2);
        let a = AdaptedModel::<f64>::build(&c).unwrap();
        let b = AdaptedModel::<f64>::build(&c).unwrap();
        assert_eq!(a, b);
        let toks = [1, 5, 7];
        assert_eq!(a.forward(&toks, false).unwrap().logits, b.forward(&toks, false).unwrap().logits);
    }

    #[test]
    fn zero_init_matches_base() {
        let m = AdaptedModel::<f64>::build(&tiny(vec![1, 3], 1)).unwrap();
        let toks = [3, 1, 4, 1, 5];
        let out = m.forward(&toks, false).unwrap();
        assert_eq!(out.logits, m.forward_base(&toks).unwrap());
        assert!(out.aux_loss.is_finite());
        assert_eq!(out.routing.len(), 2 * 7);
    }

    #[test]
    fn construction_follows_counts() {
        let m = AdaptedModel::<f64>::build(&tiny(vec![1, 2], 1)).unwrap();
        for tag in MatrixTag::ALL {
            assert_eq!(m.blocks[0].linear(tag).experts.len(), 1);
            assert_eq!(m.blocks[1].linear(tag).experts.len(), 2);
        }
        let expected = crate::allocation::trainable_param_count(&m.config.allocation, &m.config.dims());
        assert_eq!(m.num_trainable(), expected);
    }

    #[test]
    fn rejects_bad_sequences() {
        let m = AdaptedModel::<f64>::build(&tiny(vec![2, 2], 2)).unwrap();
        assert!(matches!(m.forward(&[1; 9], false), Err(ModelError::SequenceTooLong { .. })));
        assert!(matches!(m.forward(&[40], false), Err(ModelError::TokenOutOfRange { .. })));
        assert!(matches!(m.forward(&[], false), Err(ModelError::EmptySequence)));
    }

    #[test]
    fn batched_last_logits_match_single() {
        let m = AdaptedModel::<f64>::build(&tiny(vec![2, 2], 2)).unwrap();
        let (a, b): (&[u32], &[u32]) = (&[1, 2, 3], &[4, 5]);
        let both = m.last_logits(&[a, b]).unwrap();
        let single = m.forward(b, false).unwrap().logits;
        for (x, y) in both[1].iter().zip(single.row_slice(1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
