use mola::adapters::{AdaptedLinear, MatrixTag};
use mola::allocation::{plan_from_shape, trainable_param_count, AllocationPlan, AllocationShape};
use mola::model::{evaluate, train_step, AdamW, AdamWConfig, AdaptedModel, ToyTransformerConfig, TrainConfig, Trainer};
use mola::numerics::{grad_check, GradCheckConfig, Graph, Tensor};
use mola::tasks::{gen_task, Example, TaskKind};
use mola::AdaptedModel64;
use proptest::prelude::*;

fn small(counts: Vec<usize>, k: usize, seed: u64) -> ToyTransformerConfig {
    let mut c = ToyTransformerConfig::desk(AllocationPlan::new(counts, k));
    c.d_model = 16;
    c.d_ffn = 24;
    c.num_heads = 2;
    c.vocab_size = 32;
    c.max_seq_len = 8;
    c.rank = 4;
    c.seed = seed;
    c
}

/// Gives every expert a distinct non-zero delta and sharper routers.
fn perturb(m: &mut AdaptedModel64) {
    for (i, t) in m.trainable_mut().into_iter().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.3 * ((i * 131 + j * 17) as f64 * 0.61).sin();
        }
    }
}

fn layer_norm(x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * g.data()[i] + b.data()[i]).collect()
}

fn matvec(w: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| (0..w.cols()).map(|c| w.get(r, c) * x[c]).sum()).collect()
}

fn reference_linear(l: &AdaptedLinear<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = matvec(&l.base, x);
    let logits = matvec(&l.router.weight, x);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let chosen = &order[..l.router.top_k];
    let mass: f64 = chosen.iter().map(|&i| probs[i]).sum();
    for &i in chosen {
        let e = &l.experts[i];
        let hidden = matvec(&e.b, x);
        let delta = matvec(&e.a, &hidden);
        let s = probs[i] / mass * e.alpha / e.rank as f64;
        for (o, d) in out.iter_mut().zip(delta) {
            *o += s * d;
        }
    }
    out
}

/// Independent per-token loop implementation of the whole network.
fn reference_forward(m: &AdaptedModel64, toks: &[u32]) -> Vec<Vec<f64>> {
    let c = &m.config;
    let (d, heads) = (c.d_model, c.num_heads);
    let dh = d / heads;
    let mut h: Vec<Vec<f64>> = toks
        .iter()
        .enumerate()
        .map(|(p, &t)| (0..d).map(|i| m.tok_embed.get(t as usize, i) + m.pos_embed.get(p, i)).collect())
        .collect();
    for b in &m.blocks {
        let a: Vec<Vec<f64>> = h.iter().map(|x| layer_norm(x, &b.ln1_gain, &b.ln1_bias)).collect();
        let q: Vec<_> = a.iter().map(|x| reference_linear(b.linear(MatrixTag::Q), x)).collect();
        let k: Vec<_> = a.iter().map(|x| reference_linear(b.linear(MatrixTag::K), x)).collect();
        let v: Vec<_> = a.iter().map(|x| reference_linear(b.linear(MatrixTag::V), x)).collect();
        for i in 0..toks.len() {
            let mut ctx = vec![0.0; d];
            for hd in 0..heads {
                let r = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    for c in r.clone() {
                        ctx[c] += e[j] / z * v[j][c];
                    }
                }
            }
            let o = reference_linear(b.linear(MatrixTag::O), &ctx);
            for (x, y) in h[i].iter_mut().zip(o) {
                *x += y;
            }
        }
        for hi in h.iter_mut() {
            let mm = layer_norm(hi, &b.ln2_gain, &b.ln2_bias);
            let gate = reference_linear(b.linear(MatrixTag::Gate), &mm);
            let up = reference_linear(b.linear(MatrixTag::Up), &mm);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = reference_linear(b.linear(MatrixTag::Down), &act);
            for (x, y) in hi.iter_mut().zip(down) {
                *x += y;
            }
        }
    }
    h.iter()
        .map(|x| matvec(&m.lm_head, &layer_norm(x, &m.final_gain, &m.final_bias)))
        .collect()
}

#[test]
fn forward_matches_loop_reference() {
    let mut m = AdaptedModel64::build(&small(vec![3, 3], 2, 4)).unwrap();
    perturb(&mut m);
    let toks = [3, 17, 9, 30];
    let got = m.forward(&toks, false).unwrap().logits;
    let want = reference_forward(&m, &toks);
    let mut worst = 0.0f64;
    for (r, row) in want.iter().enumerate() {
        for (c, &w) in row.iter().enumerate() {
            worst = worst.max((got.get(r, c) - w).abs());
        }
    }
    assert!(worst < 1e-10, "max deviation {worst:e}");
}

#[test]
fn relabeling_experts_leaves_logits_unchanged() {
    let mut m = AdaptedModel64::build(&small(vec![3, 3], 2, 5)).unwrap();
    perturb(&mut m);
    let toks = [1, 2, 3, 4, 5];
    let before = m.forward(&toks, false).unwrap().logits;
    let perm = [2, 0, 1];
    let mut p = m.clone();
    for lin in p.blocks[1].linears.iter_mut() {
        let experts = lin.experts.clone();
        let w = lin.router.weight.clone();
        let cols = w.cols();
        let mut data = Vec::with_capacity(w.len());
        for (new, &old) in perm.iter().enumerate() {
            lin.experts[new] = experts[old].clone();
            data.extend_from_slice(w.row_slice(old));
        }
        lin.router.weight = Tensor::new(vec![perm.len(), cols], data).unwrap();
    }
    assert_ne!(p, m);
    let after = p.forward(&toks, false).unwrap().logits;
    for (a, b) in before.data().iter().zip(after.data()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut c = small(vec![3], 2, 11);
    c.d_model = 8;
    c.d_ffn = 12;
    c.rank = 2;
    c.vocab_size = 16;
    c.lambda_aux = 0.5;
    let mut m = AdaptedModel64::build(&c).unwrap();
    perturb(&mut m);
    let batch = vec![Example::new(vec![1, 5, 7], 3, None), Example::new(vec![2, 2], 9, None)];
    let params: Vec<Tensor<f64>> = m.trainable().into_iter().cloned().collect();
    let report = grad_check(
        |g, vars| {
            let mv = m.bind_with(g, vars);
            Ok(m.loss_graph(g, &mv, &batch, 64, None).expect("loss").total)
        },
        &params,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "max rel error {:e}", report.max_rel_error());
    assert!(report.params.iter().all(|p| !p.gradient_absent));

    let g = Graph::new();
    let mv = m.bind(&g);
    let loss = m.loss_graph(&g, &mv, &batch, 64, None).unwrap();
    let grads = g.backward(loss.total).unwrap();
    let frozen = [mv.tok, mv.pos, mv.head, mv.final_norm.0, mv.blocks[0].ln1.0, mv.blocks[0].linears[0].base];
    for v in frozen {
        assert!(grads.get(v).is_none());
    }
}

#[test]
fn trainable_enumeration_matches_accounting() {
    for shape in AllocationShape::ALL {
        let plan = plan_from_shape(shape, shape.default_groups(), 4, 2).unwrap();
        let mut c = small(plan.counts().to_vec(), 2, 0);
        c.allocation = plan;
        let m = AdaptedModel64::build(&c).unwrap();
        assert_eq!(m.num_trainable(), trainable_param_count(&c.allocation, &c.dims()));
    }
}

#[test]
fn cross_entropy_decreases_on_one_example() {
    let mut c = small(vec![2, 2], 2, 2);
    c.d_model = 32;
    c.d_ffn = 48;
    c.lambda_aux = 0.0;
    c.dropout = 0.0;
    let mut m = AdaptedModel64::build(&c).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let batch = vec![Example::new(vec![4, 8, 15], 16, None)];
    let mut last = f64::INFINITY;
    for step in 0..50 {
        let l = train_step(&mut m, &batch, &mut opt, 1e-3, 64).unwrap();
        assert!(l.ce < last, "step {step}: {} >= {last}", l.ce);
        assert_eq!(l.total, l.ce);
        last = l.ce;
    }
}

#[test]
fn base_is_frozen_through_training() {
    let c = small(vec![1, 2], 1, 3);
    let mut m = AdaptedModel64::build(&c).unwrap();
    let (checksum, trainable) = (m.frozen_checksum(), m.trainable().into_iter().cloned().collect::<Vec<_>>());
    let data: Vec<Example> = (0..32u32).map(|i| Example::new(vec![i, (i * 7) % 32, 3], (i * 5) % 32, None)).collect();
    let mut opt = AdamW::new(AdamWConfig::default());
    for chunk in data.chunks(8).cycle().take(100) {
        train_step(&mut m, chunk, &mut opt, 1e-2, 8).unwrap();
    }
    assert_eq!(m.step, 100);
    assert_eq!(m.frozen_checksum(), checksum);
    assert_ne!(m.trainable().into_iter().cloned().collect::<Vec<_>>(), trainable);
}

#[test]
fn seeded_training_is_reproducible() {
    let run = || {
        let mut c = small(vec![2, 2], 2, 8);
        c.vocab_size = 64;
        let data = gen_task(TaskKind::modular_add(), 40, 8).unwrap();
        let tc = TrainConfig {
            lr: 3e-3,
            batch_size: 8,
            ..Default::default()
        };
        let mut t = Trainer::new(AdaptedModel64::build(&c).unwrap(), tc);
        let stats: Vec<_> = (0..3).map(|e| t.run_epoch(&data.train, e, None).unwrap()).collect();
        (stats, evaluate(&t.model, &data.eval).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}

#[test]
fn f32_model_tracks_f64_model() {
    let c = small(vec![2, 2], 2, 6);
    let m64 = AdaptedModel::<f64>::build(&c).unwrap();
    let m32 = AdaptedModel::<f32>::build(&c).unwrap();
    let toks = [1, 2, 3];
    let (a, b) = (m64.forward(&toks, false).unwrap(), m32.forward(&toks, false).unwrap());
    for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
        assert!((x - *y as f64).abs() < 1e-3, "{x} vs {y}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn zero_init_identity_any_seed(seed in 0u64..1000, toks in prop::collection::vec(0u32..32, 1..8)) {
        for shape in AllocationShape::ALL {
            let plan = plan_from_shape(shape, shape.default_groups(), 4, 2).unwrap();
            let mut c = small(plan.counts().to_vec(), 2, seed);
            c.allocation = plan;
            let m = AdaptedModel64::build(&c).unwrap();
            prop_assert_eq!(m.forward(&toks, false).unwrap().logits, m.forward_base(&toks).unwrap());
        }
    }

    #[test]
    fn parameter_count_matches_for_any_counts(counts in prop::collection::vec(1usize..5, 1..4)) {
        let c = small(counts, 1, 0);
        let m = AdaptedModel64::build(&c).unwrap();
        prop_assert_eq!(m.num_trainable(), trainable_param_count(&c.allocation, &c.dims()));
    }
}
