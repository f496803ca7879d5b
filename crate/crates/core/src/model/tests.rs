use super::*;
use crate::gating::FusionEntry::{Attend, Skip};
use rand::Rng;

fn cfg(strategy: FusionStrategy) -> ModelConfig {
    let mut c = ModelConfig::new(11, 8, 2, 1, 5);
    c.fusion_strategy = strategy;
    c.ffn_dim = 12;
    c.max_len = 16;
    c
}

fn images(n: usize, p: usize, d: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Matrix::random_normal(p, d, 1.0, &mut rng)).collect()
}

fn example() -> (Vec<u32>, FusionAssignment, Vec<Matrix>) {
    let src = vec![1, 5, 6, 7, 8, 2];
    let assign = FusionAssignment {
        entries: vec![Skip, Attend(0), Attend(0), Attend(1), Attend(1), Skip],
        image_count: 2,
    };
    (src, assign, images(2, 3, 5, 9))
}

fn set(model: &mut Model, name: &str, rows: &[Vec<f64>]) {
    let p = model.params_mut().get_mut(name).unwrap_or_else(|| panic!("no param {name}"));
    let m = Matrix::from_rows(rows);
    assert_eq!(m.shape(), p.value.shape(), "{name}");
    p.value = m;
}

#[test]
fn config_validation_and_kv_roundtrip() {
    let mut c = cfg(FusionStrategy::CrossAttention);
    c.fusion_layers = vec![0];
    c.fusion_norm = FusionNorm::Post;
    let map: BTreeMap<String, String> = c.to_kv().into_iter().collect();
    assert_eq!(ModelConfig::from_kv(&map).unwrap(), c);

    let mut bad = c.clone();
    bad.heads = 3;
    assert!(bad.validate().is_err());
    let mut bad = c.clone();
    bad.fusion_layers = vec![1];
    assert!(bad.validate().is_err());
}

#[test]
fn partitions_are_total_and_fusion_only_in_fusion_layers() {
    let mut c = ModelConfig::new(11, 8, 2, 3, 5);
    c.fusion_layers = vec![1];
    let m = Model::new(c, InitOptions::default(), 0).unwrap();
    let fusion: Vec<&str> = m
        .params()
        .iter()
        .filter(|p| p.partition == Partition::Fusion)
        .map(|p| p.name.as_str())
        .collect();
    assert!(!fusion.is_empty());
    assert!(fusion.iter().all(|n| n.starts_with("enc.1.fusion.")));
    assert!(m.params().iter().any(|p| p.partition == Partition::Projection));

    let none = Model::new(cfg(FusionStrategy::None), InitOptions::default(), 0).unwrap();
    assert!(none.params().iter().all(|p| p.partition == Partition::Backbone));
}

#[test]
fn projection_zero_input_zero_bias_gives_zero() {
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions::default(), 1).unwrap();
    let out = m.project_patches(&Matrix::zeros(4, 5)).unwrap();
    assert_eq!(out.shape(), (4, 8));
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn projection_rejects_wrong_width() {
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions::default(), 1).unwrap();
    assert!(matches!(
        m.project_patches(&Matrix::zeros(4, 6)),
        Err(ModelError::ShapeMismatch { .. })
    ));
}

#[test]
fn projection_default_shape() {
    let c = ModelConfig::new(11, 16, 2, 1, 768);
    let m = Model::new(c, InitOptions::default(), 2).unwrap();
    let raw = images(1, 50, 768, 3).pop().unwrap();
    assert_eq!(m.project_patches(&raw).unwrap().shape(), (50, 16));
}

#[test]
fn projection_hand_computed_on_two_dim_toy() {
    let mut c = ModelConfig::new(11, 2, 1, 1, 2);
    c.projection_hidden = 2;
    let mut m = Model::new(c, InitOptions::default(), 0).unwrap();
    set(&mut m, "proj.in.w", &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    set(&mut m, "proj.in.b", &[vec![0.0, 1.0]]);
    set(&mut m, "proj.out.w", &[vec![2.0, 0.0], vec![0.0, -1.0]]);
    set(&mut m, "proj.out.b", &[vec![0.5, 0.0]]);
    let out = m.project_patches(&Matrix::from_rows(&[vec![1.0, -1.0]])).unwrap();
    // hidden = gelu([1, 0]); gelu(0) = 0, gelu(1) (tanh form) = 0.8411919906
    let g1 = 0.5 * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (1.0 + 0.044715)).tanh());
    assert!((g1 - 0.841_191_990_6).abs() < 1e-9);
    assert!((out.get(0, 0) - (2.0 * g1 + 0.5)).abs() < 1e-12);
    assert_eq!(out.get(0, 1), 0.0);
}

#[test]
fn fusion_all_skip_is_exact_bypass() {
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions { zero_fusion_output: false }, 4).unwrap();
    let s = images(1, 6, 8, 5).pop().unwrap();
    let proj = images(2, 3, 8, 6);
    let out = m.fusion_layer_forward(0, &s, &proj, &FusionAssignment::all_skip(6, 2)).unwrap();
    assert_eq!(out, s);
}

#[test]
fn fusion_zero_output_projection_is_identity_for_attend_tokens() {
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions::default(), 4).unwrap();
    let s = images(1, 6, 8, 5).pop().unwrap();
    let (_, assign, _) = example();
    let proj = images(2, 3, 8, 6);
    let out = m.fusion_layer_forward(0, &s, &proj, &assign).unwrap();
    assert_eq!(out, s);
}

#[test]
fn fusion_skip_rows_untouched_and_attend_rows_change() {
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions { zero_fusion_output: false }, 4).unwrap();
    let s = images(1, 6, 8, 5).pop().unwrap();
    let (_, assign, _) = example();
    let proj = images(2, 3, 8, 6);
    let out = m.fusion_layer_forward(0, &s, &proj, &assign).unwrap();
    for r in 0..6 {
        let same = out.row(r) == s.row(r);
        assert_eq!(same, assign.entries[r] == Skip, "row {r}");
    }
}

#[test]
fn fusion_missing_image_is_an_error() {
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions::default(), 4).unwrap();
    let s = Matrix::zeros(6, 8);
    let (_, assign, _) = example();
    assert!(matches!(
        m.fusion_layer_forward(0, &s, &images(1, 3, 8, 6), &assign),
        Err(ModelError::UnprojectedImage(1))
    ));
}

#[test]
fn fusion_single_head_hand_computed() {
    let mut c = ModelConfig::new(11, 2, 1, 1, 2);
    c.fusion_norm = FusionNorm::Post;
    let mut m = Model::new(c, InitOptions::default(), 0).unwrap();
    let eye = [vec![1.0, 0.0], vec![0.0, 1.0]];
    for w in ["q", "k", "v", "o"] {
        set(&mut m, &format!("enc.0.fusion.attn.{w}.w"), &eye);
    }
    set(&mut m, "enc.0.fusion.attn.v.b", &[vec![0.0, 1.0]]);
    let s = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 1.0]]);
    let image = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
    let assign = FusionAssignment {
        entries: vec![Skip, Attend(0)],
        image_count: 1,
    };
    let out = m.fusion_layer_forward(0, &s, &[image], &assign).unwrap();

    // q = (3, 1); scores = (3, 2)/sqrt(2); values = (1, 1), (0, 3)
    let (a, b) = ((3.0f64 / 2f64.sqrt()).exp(), (2.0f64 / 2f64.sqrt()).exp());
    let (w0, w1) = (a / (a + b), b / (a + b));
    let r = [3.0 + w0, 1.0 + w0 + 3.0 * w1];
    let mean = (r[0] + r[1]) / 2.0;
    let var = ((r[0] - mean).powi(2) + (r[1] - mean).powi(2)) / 2.0;
    let expect: Vec<f64> = r.iter().map(|x| (x - mean) / (var + 1e-5).sqrt()).collect();
    assert_eq!(out.row(0), &[1.0, 0.0]);
    for j in 0..2 {
        assert!((out.get(1, j) - expect[j]).abs() < 1e-12, "{j}: {} vs {}", out.get(1, j), expect[j]);
    }
}

#[test]
fn encoder_shape_and_identity_at_init() {
    let (src, assign, imgs) = example();
    let fused = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions::default(), 7).unwrap();
    let plain = Model::assemble(cfg(FusionStrategy::None), fused.params(), InitOptions::default(), 0).unwrap();
    let a = fused.encoder_forward(&src, &imgs, &assign).unwrap();
    let b = plain.encoder_forward(&src, &imgs, &assign).unwrap();
    assert_eq!(a.shape(), (6, 8));
    assert_eq!(a, b);
}

#[test]
fn single_layer_encoder_image_locality() {
    let (src, assign, mut imgs) = example();
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions { zero_fusion_output: false }, 8).unwrap();
    let before = m.encoder_forward(&src, &imgs, &assign).unwrap();
    imgs[1].data_mut()[0] += 1.0;
    let after = m.encoder_forward(&src, &imgs, &assign).unwrap();
    for r in 0..src.len() {
        let changed = before.row(r) != after.row(r);
        assert_eq!(changed, assign.entries[r] == Attend(1), "row {r}");
    }
}

#[test]
fn decoder_is_causal() {
    let (src, assign, imgs) = example();
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions { zero_fusion_output: false }, 10).unwrap();
    let a = m.seq2seq_forward(&src, &imgs, &assign, &[1, 5, 6, 7]).unwrap();
    let b = m.seq2seq_forward(&src, &imgs, &assign, &[1, 5, 9, 9]).unwrap();
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn padding_target_does_not_leak_backwards() {
    let (src, assign, imgs) = example();
    let m = Model::new(cfg(FusionStrategy::None), InitOptions::default(), 10).unwrap();
    let a = m.seq2seq_forward(&src, &imgs, &assign, &[1, 5]).unwrap();
    let b = m.seq2seq_forward(&src, &imgs, &assign, &[1, 5, PAD, PAD]).unwrap();
    assert_eq!(a.row(1), b.row(1));
}

#[test]
fn concat_strategies_without_gated_images_match_none() {
    let (src, _, imgs) = example();
    let skip = FusionAssignment::all_skip(src.len(), 2);
    let base = Model::new(cfg(FusionStrategy::None), InitOptions::default(), 11).unwrap();
    let expect = base.seq2seq_forward(&src, &imgs, &skip, &[1, 5, 6]).unwrap();
    for s in [
        FusionStrategy::ConcatEncoderOutput,
        FusionStrategy::SelfAttentionConcat,
        FusionStrategy::CrossAttention,
    ] {
        let m = Model::assemble(cfg(s), base.params(), InitOptions { zero_fusion_output: false }, 3).unwrap();
        assert_eq!(m.seq2seq_forward(&src, &imgs, &skip, &[1, 5, 6]).unwrap(), expect, "{s:?}");
    }
}

#[test]
fn concat_strategies_use_gated_images() {
    let (src, assign, mut imgs) = example();
    for s in [FusionStrategy::ConcatEncoderOutput, FusionStrategy::SelfAttentionConcat] {
        let m = Model::new(cfg(s), InitOptions::default(), 12).unwrap();
        let a = m.seq2seq_forward(&src, &imgs, &assign, &[1, 5]).unwrap();
        imgs[0].data_mut()[0] += 1.0;
        let b = m.seq2seq_forward(&src, &imgs, &assign, &[1, 5]).unwrap();
        assert_ne!(a, b, "{s:?}");
    }
}

#[test]
fn length_overflow() {
    let m = Model::new(cfg(FusionStrategy::None), InitOptions::default(), 0).unwrap();
    let src = vec![5u32; 17];
    assert!(matches!(
        m.encode(&src, &[], &FusionAssignment::all_skip(17, 0)),
        Err(ModelError::LengthOverflow { len: 17, max: 16 })
    ));
}

#[test]
fn loss_fixtures() {
    let uniform = Matrix::zeros(3, 4);
    for eps in [0.0, 0.1, 0.5] {
        assert!((smoothed_loss(&uniform, &[1, 2, 3], eps) - 4f64.ln()).abs() < 1e-12);
    }
    // V=2, logits (0,0), gold 0: -(0.9 ln 0.5 + 0.1 ln 0.5) = ln 2
    let l = smoothed_loss(&Matrix::zeros(1, 2), &[1], 0.1);
    assert!((l - 0.693_147_180_559_945_3).abs() < 1e-12);

    let logits = Matrix::from_rows(&[vec![2.0, -1.0, 0.5], vec![0.0, 3.0, 1.0]]);
    let nll = |r: usize, g: usize| logits.row(r).iter().map(|v| v.exp()).sum::<f64>().ln() - logits.get(r, g);
    let plain = (nll(0, 1) + nll(1, 2)) / 2.0;
    assert!((smoothed_loss(&logits, &[1, 2], 0.0) - plain).abs() < 1e-12);
    // pad positions are excluded from the mean
    assert!((smoothed_loss(&logits, &[PAD, 2], 0.0) - nll(1, 2)).abs() < 1e-12);
}

fn batch(strategy: FusionStrategy, seed: u64) -> Vec<Example> {
    let (src, assign, imgs) = example();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|_| {
            let mut tgt = vec![1];
            tgt.extend((0..3).map(|_| rng.random_range(5..11u32)));
            tgt.push(2);
            Example {
                src: src.clone(),
                tgt,
                assign: if strategy == FusionStrategy::None {
                    FusionAssignment::all_skip(src.len(), 2)
                } else {
                    assign.clone()
                },
                images: imgs.clone(),
            }
        })
        .collect()
}

#[test]
fn all_skip_gives_zero_fusion_gradients() {
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions { zero_fusion_output: false }, 13).unwrap();
    let b = batch(FusionStrategy::None, 1);
    let (_, grads) = m.param_gradients(&b, 0.1, &[]).unwrap();
    for (p, g) in m.params().iter().zip(&grads) {
        if p.partition != Partition::Backbone {
            assert!(g.data().iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }
}

#[test]
fn frozen_backbone_gradients_are_zero() {
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions { zero_fusion_output: false }, 13).unwrap();
    let b = batch(FusionStrategy::CrossAttention, 1);
    let (_, grads) = m.param_gradients(&b, 0.1, &[Partition::Backbone]).unwrap();
    let mut fusion_nonzero = false;
    for (p, g) in m.params().iter().zip(&grads) {
        if p.partition == Partition::Backbone {
            assert!(g.data().iter().all(|&v| v == 0.0), "{}", p.name);
        } else {
            fusion_nonzero |= g.data().iter().any(|&v| v != 0.0);
        }
    }
    assert!(fusion_nonzero);
}

#[test]
fn gradients_match_central_differences_for_sampled_entries() {
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions { zero_fusion_output: false }, 14).unwrap();
    let b = batch(FusionStrategy::CrossAttention, 2);
    let (_, grads) = m.param_gradients(&b, 0.1, &[]).unwrap();
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (i, p) in m.params().iter().enumerate() {
        let j = rng.random_range(0..p.value.data().len());
        let mut plus = m.clone();
        plus.params_mut().iter_mut().nth(i).unwrap().value.data_mut()[j] += h;
        let mut minus = m.clone();
        minus.params_mut().iter_mut().nth(i).unwrap().value.data_mut()[j] -= h;
        let num = (plus.batch_loss(&b, 0.1).unwrap() - minus.batch_loss(&b, 0.1).unwrap()) / (2.0 * h);
        let ana = grads[i].data()[j];
        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
        assert!(rel < 1e-4, "{}[{j}]: analytic {ana} numeric {num}", p.name);
    }
}

#[test]
fn losses_are_deterministic() {
    let b = batch(FusionStrategy::CrossAttention, 3);
    let l1 = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions::default(), 5)
        .unwrap()
        .batch_loss(&b, 0.1)
        .unwrap();
    let l2 = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions::default(), 5)
        .unwrap()
        .batch_loss(&b, 0.1)
        .unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
}

#[test]
fn checkpoint_roundtrip_and_partition_labels() {
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions { zero_fusion_output: false }, 15).unwrap();
    let vocab: Vec<String> = (0..11).map(|i| format!("t{i}")).collect();
    let ck = Checkpoint::from_model(&m, &vocab);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.vocab, vocab);
    assert_eq!(back.config, *m.config());
    let loaded = back.model().unwrap();
    for (a, b) in m.params().iter().zip(loaded.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.partition, b.partition);
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    // f32-representable values survive exactly, so a second trip is bit-identical
    assert_eq!(Checkpoint::from_model(&loaded, &vocab).to_bytes(), bytes);

    for cut in [0, 3, 10, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }

    // relabel one backbone tensor as fusion; loading must refuse it
    let mut tampered = back.clone();
    let first = tampered.params.iter_mut().next().unwrap();
    first.partition = Partition::Fusion;
    let tampered = Checkpoint::from_bytes(&tampered.to_bytes()).unwrap();
    assert!(matches!(tampered.model(), Err(ModelError::Checkpoint(_))));
}

/// Straight-line forward pass written against plain vectors, no tape.
mod reference {
    use super::*;

    type M = Vec<Vec<f64>>;

    fn get(m: &Model, name: &str) -> M {
        let p = &m.params().get(name).unwrap().value;
        (0..p.rows()).map(|r| p.row(r).to_vec()).collect()
    }

    fn lin(m: &Model, x: &M, name: &str) -> M {
        let w = get(m, &format!("{name}.w"));
        let b = get(m, &format!("{name}.b"));
        x.iter()
            .map(|row| {
                (0..w[0].len())
                    .map(|j| b[0][j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn ln(m: &Model, x: &M, name: &str) -> M {
        let g = get(m, &format!("{name}.g"));
        let b = get(m, &format!("{name}.b"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[0][j] + b[0][j])
                    .collect()
            })
            .collect()
    }

    fn add(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    fn attn(m: &Model, q_in: &M, kv: &M, name: &str, causal: bool) -> M {
        let heads = m.config().heads;
        let dh = m.config().model_dim / heads;
        let q = lin(m, q_in, &format!("{name}.q"));
        let k = lin(m, kv, &format!("{name}.k"));
        let v = lin(m, kv, &format!("{name}.v"));
        let mut cat = vec![vec![0.0; heads * dh]; q.len()];
        for h in 0..heads {
            for i in 0..q.len() {
                let keys = if causal { i + 1 } else { k.len() };
                let s: Vec<f64> = (0..keys)
                    .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    cat[i][h * dh + c] = (0..keys).map(|j| e[j] / z * v[j][h * dh + c]).sum();
                }
            }
        }
        lin(m, &cat, &format!("{name}.o"))
    }

    fn ffn(m: &Model, x: &M, name: &str) -> M {
        let h = lin(m, x, &format!("{name}.up"));
        let h: M = h
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh()))
                    .collect()
            })
            .collect();
        lin(m, &h, &format!("{name}.down"))
    }

    fn embed(m: &Model, ids: &[u32], pos: &str) -> M {
        let tok = get(m, "tok_emb");
        let p = get(m, pos);
        ids.iter()
            .enumerate()
            .map(|(i, &t)| tok[t as usize].iter().zip(&p[i]).map(|(a, b)| a + b).collect())
            .collect()
    }

    pub fn forward(m: &Model, src: &[u32], tgt: &[u32]) -> M {
        let mut x = embed(m, src, "enc_pos");
        for l in 0..m.config().encoder_layers {
            let a = attn(m, &x, &x, &format!("enc.{l}.self_attn"), false);
            let h = ln(m, &add(&x, &a), &format!("enc.{l}.norm1"));
            let f = ffn(m, &h, &format!("enc.{l}.ffn"));
            x = ln(m, &add(&h, &f), &format!("enc.{l}.norm2"));
        }
        let mut y = embed(m, tgt, "dec_pos");
        for l in 0..m.config().decoder_layers {
            let a = attn(m, &y, &y, &format!("dec.{l}.self_attn"), true);
            let h = ln(m, &add(&y, &a), &format!("dec.{l}.norm1"));
            let c = attn(m, &h, &x, &format!("dec.{l}.cross_attn"), false);
            let h = ln(m, &add(&h, &c), &format!("dec.{l}.norm2"));
            let f = ffn(m, &h, &format!("dec.{l}.ffn"));
            y = ln(m, &add(&h, &f), &format!("dec.{l}.norm3"));
        }
        lin(m, &y, "out")
    }
}

#[test]
fn forward_matches_straight_line_reference() {
    let m = Model::new(cfg(FusionStrategy::None), InitOptions::default(), 21).unwrap();
    let src = [1, 6, 7, 2];
    let tgt = [1, 9];
    let got = m
        .seq2seq_forward(&src, &[], &FusionAssignment::all_skip(4, 0), &tgt)
        .unwrap();
    let want = reference::forward(&m, &src, &tgt);
    assert_eq!(got.shape(), (2, 11));
    for (r, row) in want.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((got.get(r, c) - v).abs() < 1e-10);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one_everywhere() {
    let (src, assign, imgs) = example();
    let m = Model::new(cfg(FusionStrategy::CrossAttention), InitOptions { zero_fusion_output: false }, 16).unwrap();
    let mut tape = Tape::new();
    let enc = m.encode_on(&mut tape, &src, &imgs, &assign).unwrap();
    m.decode_on(&mut tape, &enc, &[1, 5, 6]).unwrap();
    let mut rows = 0;
    for s in tape.softmax_outputs() {
        for r in 0..s.rows() {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            rows += 1;
        }
    }
    assert!(rows > 0);
}
