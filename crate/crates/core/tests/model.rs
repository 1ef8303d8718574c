use epistyle::corpus::{day_of_week, Post};
use epistyle::model::{EpisodeInput, EpisodeModel, HeadKind, ModelConfig, Pooling, PostInput};
use epistyle::tokenize::{train_char_vocab, PAD_ID};
use epistyle_numcore::{grad_check_params, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(pooling: Pooling, loss: HeadKind) -> ModelConfig {
    ModelConfig {
        token_dim: 4,
        text_dim: 6,
        time_dim: 3,
        context_dim: 5,
        filter_sizes: vec![2, 3],
        filters: 3,
        pooling,
        transformer_dim: 8,
        transformer_layers: 2,
        transformer_heads: 2,
        transformer_ff: 6,
        output_dim: 4,
        loss,
        ..Default::default()
    }
}

fn random_episode(rng: &mut ChaCha8Rng, vocab: usize, posts: usize) -> EpisodeInput {
    EpisodeInput {
        market: 0,
        posts: (0..posts)
            .map(|_| PostInput {
                tokens: (0..rng.gen_range(3..8)).map(|_| rng.gen_range(2..vocab)).collect(),
                weekday: rng.gen_range(0..7),
                context_row: rng.gen_range(0..3),
            })
            .collect(),
    }
}

fn batch_loss(model: &EpisodeModel, g: &mut Graph<'_>, eps: &[EpisodeInput], labels: &[usize]) -> epistyle_numcore::Result<Var> {
    let e = model.config().episode_dim();
    let mut rows = Vec::new();
    for ep in eps {
        let v = model.embed_episode(g, ep).map_err(|err| epistyle_numcore::NumError::Invalid {
            op: "embed",
            msg: err.to_string(),
        })?;
        rows.push(g.reshape(v, &[1, e])?);
    }
    let x = g.concat(&rows, 0)?;
    model.head_loss(g, 0, x, labels).map_err(|err| epistyle_numcore::NumError::Invalid {
        op: "loss",
        msg: err.to_string(),
    })
}

#[test]
fn end_to_end_gradients_for_every_head_and_pooling() {
    for pooling in [Pooling::Mean, Pooling::Transformer] {
        for kind in [HeadKind::Sm, HeadKind::Cf, HeadKind::Af, HeadKind::Ms] {
            let mut model = EpisodeModel::new(toy(pooling, kind), 12, 5).unwrap();
            model.add_market("M", &["a".into(), "b".into()], None).unwrap();
            model.add_head("M", kind, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let eps: Vec<EpisodeInput> = (0..4).map(|_| random_episode(&mut rng, 12, 2)).collect();
            let labels = [0, 1, 0, 1];
            let ids: Vec<_> = model.store().ids().collect();
            let err = grad_check_params(model.store(), &ids, |g| batch_loss(&model, g, &eps, &labels), 1e-5, Some(6)).unwrap();
            assert!(err <= 1e-3, "{pooling:?}/{kind:?}: relative error {err}");
        }
    }
}

fn vocab() -> epistyle::tokenize::Vocab {
    train_char_vocab(&["the quick brown fox jumps over the lazy dog £..."], 100).unwrap()
}

fn post(body: &str, ts: i64, sub: &str) -> Post {
    Post {
        market: "M".into(),
        subforum: sub.into(),
        thread_id: "t".into(),
        post_id: "p".into(),
        author: "a".into(),
        timestamp: ts,
        is_thread_start: false,
        body: body.into(),
    }
}

fn default_model(pooling: Pooling) -> (EpisodeModel, epistyle::tokenize::Vocab) {
    let v = vocab();
    let cfg = ModelConfig {
        pooling,
        ..Default::default()
    };
    let mut m = EpisodeModel::new(cfg, v.len(), 11).unwrap();
    m.add_market("M", &["drugs".into(), "guns".into()], None).unwrap();
    (m, v)
}

fn text_vector(m: &EpisodeModel, tokens: &[usize]) -> Vec<f64> {
    let mut g = Graph::new(m.store());
    let x = m.token_embeddings(&mut g, tokens).unwrap();
    let t = m.text_from_embeddings(&mut g, x).unwrap();
    g.value(t).data().to_vec()
}

#[test]
fn text_embedding_examples() {
    let (m, v) = default_model(Pooling::Mean);
    let short = m.prepare_post(&v, &post("ab", 1, "drugs"), 0);
    assert_eq!(short.tokens.len(), 5);
    assert_eq!(short.tokens[2..], [PAD_ID as usize; 3]);
    let empty = m.prepare_post(&v, &post("", 1, "drugs"), 0);
    assert!(text_vector(&m, &empty.tokens).iter().all(|x| x.is_finite()));
    let a = m.prepare_post(&v, &post("the lazy dog", 1, "drugs"), 0);
    let out = text_vector(&m, &a.tokens);
    assert_eq!(out.len(), 128);
    assert_eq!(out, text_vector(&m, &a.tokens));
    let mut rev = a.tokens.clone();
    rev.reverse();
    assert_ne!(out, text_vector(&m, &rev));
    let long = m.prepare_post(&v, &post(&"fox ".repeat(300), 1, "drugs"), 0);
    assert_eq!(long.tokens.len(), 512);
}

#[test]
fn out_of_range_tokens_are_rejected() {
    let (m, _) = default_model(Pooling::Mean);
    let ep = EpisodeInput {
        market: 0,
        posts: vec![PostInput {
            tokens: vec![m.vocab_size(); 5],
            weekday: 0,
            context_row: 0,
        }],
    };
    assert!(m.embed(&ep).is_err());
}

#[test]
fn time_embedding_examples() {
    // 2013-01-01 00:00 UTC was a Tuesday.
    assert_eq!(day_of_week(1_356_998_400), 1);
    assert_eq!(day_of_week(1_356_998_400 + 7 * 86_400), 1);
    let (m, _) = default_model(Pooling::Mean);
    let table = m.store().get(m.store().id("time.weekday").unwrap());
    assert_eq!(table.shape(), &[7, 64]);
    for i in 0..7 {
        for j in i + 1..7 {
            assert_ne!(table.row(i), table.row(j));
        }
    }
}

fn post_rows(m: &EpisodeModel, ep: &EpisodeInput) -> Tensor {
    let mut g = Graph::new(m.store());
    let r = m.embed_posts(&mut g, ep, None).unwrap();
    g.value(r).clone()
}

#[test]
fn context_and_post_embedding_examples() {
    let v = vocab();
    let mut m = EpisodeModel::new(ModelConfig::default(), v.len(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let init = Tensor::randn(&[2, 128], 0.3, &mut rng);
    m.add_market("M", &["drugs".into(), "guns".into()], Some(&init)).unwrap();
    let posts = [
        post("the fox", 1_356_998_400, "guns"),
        post("lazy dog", 1_357_084_800, "guns"),
        post("the fox", 1_356_998_400, "unseen"),
        post("the fox", 1_356_998_400, "guns"),
    ];
    let refs: Vec<&Post> = posts.iter().collect();
    let ep = m.prepare_episode(&v, &refs, 0);
    let rows = post_rows(&m, &ep);
    assert_eq!(rows.shape(), &[4, 320]);
    assert_eq!(&rows.row(0)[192..], init.row(1));
    assert_eq!(&rows.row(0)[192..], &rows.row(1)[192..]);
    let table = m.store().get(m.markets()[0].table());
    assert_eq!(&rows.row(2)[192..], table.row(2));
    assert_eq!(rows.row(0), rows.row(3));

    let fc = m.store().id("text.fc.w").unwrap();
    let zeros = Tensor::zeros(m.store().get(fc).shape());
    m.store_mut().set(fc, zeros).unwrap();
    let after = post_rows(&m, &ep);
    for r in 0..4 {
        assert_eq!(&after.row(r)[128..], &rows.row(r)[128..]);
    }
}

fn episode_from_rows(m: &EpisodeModel, rows: &Tensor) -> Vec<f64> {
    let mut g = Graph::new(m.store());
    let x = g.input(rows.clone());
    let out = m.pool(&mut g, x).unwrap();
    g.value(out).data().to_vec()
}

#[test]
fn mean_pooling_examples() {
    let (m, _) = default_model(Pooling::Mean);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let one = Tensor::randn(&[1, 320], 1.0, &mut rng);
    assert_eq!(episode_from_rows(&m, &one), one.data());
    let opposite: Vec<f64> = one.data().iter().chain(one.data()).enumerate().map(|(i, x)| if i < 320 { *x } else { -x }).collect();
    let pair = Tensor::new(vec![2, 320], opposite).unwrap();
    assert!(episode_from_rows(&m, &pair).iter().all(|x| x.abs() < 1e-12));
}

fn permuted(rows: &Tensor, order: &[usize]) -> Tensor {
    let data: Vec<f64> = order.iter().flat_map(|&i| rows.row(i).to_vec()).collect();
    Tensor::new(rows.shape().to_vec(), data).unwrap()
}

#[test]
fn pooling_is_exactly_permutation_invariant() {
    for pooling in [Pooling::Mean, Pooling::Transformer] {
        let (m, _) = default_model(pooling);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows = Tensor::randn(&[5, 320], 1.0, &mut rng);
        let base = episode_from_rows(&m, &rows);
        assert_eq!(base.len(), m.config().episode_dim());
        for order in [[4, 3, 2, 1, 0], [1, 0, 3, 2, 4], [2, 4, 1, 0, 3]] {
            assert_eq!(episode_from_rows(&m, &permuted(&rows, &order)), base, "{pooling:?}");
        }
        let single = Tensor::randn(&[1, 320], 1.0, &mut rng);
        assert!(episode_from_rows(&m, &single).iter().all(|x| x.is_finite()));
    }
    let (m, _) = default_model(Pooling::Transformer);
    assert_eq!(m.config().episode_dim(), 32);
}

/// Head with explicitly set weights, evaluated on explicit embeddings.
fn head_value(cfg: ModelConfig, kind: HeadKind, w: Option<Tensor>, x: Tensor, labels: &[usize]) -> f64 {
    let classes = w.as_ref().map_or(labels.iter().max().unwrap() + 1, |w| w.rows());
    let mut m = EpisodeModel::new(ModelConfig { loss: kind, ..cfg }, 4, 0).unwrap();
    let h = m.add_head("T", kind, classes).unwrap();
    if let Some(w) = w {
        let id = m.heads()[h].weight().unwrap();
        m.store_mut().set(id, w).unwrap();
    }
    let mut g = Graph::new(m.store());
    let xv = g.input(x);
    let loss = m.head_loss(&mut g, h, xv, labels).unwrap();
    g.value(loss).item()
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        text_dim: 1,
        time_dim: 1,
        context_dim: 1,
        ..Default::default()
    }
}

#[test]
fn softmax_head_examples() {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let loss = head_value(cfg.clone(), HeadKind::Sm, Some(Tensor::zeros(&[5, 3])), x, &[0, 1, 2, 4]);
    assert!((loss - 5f64.ln()).abs() < 1e-12);
    // Logits (1, 0) via W = [[1,0,0],[0,0,0]] and x = e1.
    let w = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
    let loss = head_value(cfg, HeadKind::Sm, Some(w), x, &[0]);
    assert!((loss - 0.3133).abs() < 1e-4, "{loss}");
    assert!((loss + (1f64.exp() / (1f64.exp() + 1.0)).ln()).abs() < 1e-12);
}

#[test]
fn margin_head_examples() {
    // cos = (1, 0) for label 0.
    let w = Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 3.0, 0.0]]).unwrap();
    let x = Tensor::from_rows(&[vec![5.0, 0.0, 0.0]]).unwrap();
    let cf = head_value(small_cfg(), HeadKind::Cf, Some(w.clone()), x.clone(), &[0]);
    let expected = -((64.0 * 0.65f64).exp() / ((64.0 * 0.65f64).exp() + 1.0)).ln();
    assert!((cf - expected).abs() < 1e-12 && cf < 1e-12, "{cf}");
    let zero = ModelConfig {
        cf_margin: 0.0,
        af_margin_degrees: 0.0,
        ..small_cfg()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let labels = [0, 2, 1, 1];
    let cf0 = head_value(zero.clone(), HeadKind::Cf, Some(w.clone()), x.clone(), &labels);
    let af0 = head_value(zero, HeadKind::Af, Some(w), x, &labels);
    assert!((cf0 - af0).abs() < 1e-12);
}

#[test]
fn multi_similarity_examples() {
    let cfg = small_cfg();
    // Orthogonal rows of different classes: no anchor has a positive.
    let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    assert_eq!(head_value(cfg.clone(), HeadKind::Ms, None, x, &[0, 1]), 0.0);

    // Same-class pair far from a well-separated negative: nothing mined.
    let x = Tensor::from_rows(&[vec![1.0, 0.1, 0.0], vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(head_value(cfg.clone(), HeadKind::Ms, None, x, &[0, 0, 1]), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[6, 3], 1.0, &mut rng);
    let labels = [0, 0, 1, 1, 2, 2];
    let loss = head_value(cfg.clone(), HeadKind::Ms, None, x.clone(), &labels);
    let scaled = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * 7.3).collect()).unwrap();
    let again = head_value(cfg, HeadKind::Ms, None, scaled, &labels);
    assert!((loss - again).abs() < 1e-12);
}

#[test]
fn single_positive_at_base_contributes_half_ln_two() {
    // Labels [0, 0, 1]. Anchor 0: positive at S = λ = 0.5, negative at 0.45,
    // both mined. Anchor 1: its negative sits at -1, nothing mined. Anchor 2
    // has no positive.
    let sim = Tensor::from_rows(&[
        vec![1.0, 0.5, 0.45],
        vec![0.5, 1.0, -1.0],
        vec![0.45, -1.0, 1.0],
    ])
    .unwrap();
    let store = epistyle_numcore::ParamStore::new();
    let mut g = Graph::new(&store);
    let s = g.input(sim);
    let loss = g.multi_similarity(s, &[0, 0, 1], Default::default()).unwrap();
    let expected = 2f64.ln() / 2.0 + (1.0 + (50.0 * (0.45f64 - 0.5)).exp()).ln() / 50.0;
    assert!((g.value(loss).item() - expected).abs() < 1e-12);
}

#[test]
fn trained_margin_heads_align_class_rows() {
    for kind in [HeadKind::Cf, HeadKind::Af] {
        let cfg = ModelConfig {
            loss: kind,
            ..small_cfg()
        };
        let mut m = EpisodeModel::new(cfg, 4, 0).unwrap();
        let h = m.add_head("T", kind, 3).unwrap();
        let wid = m.heads()[h].weight().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let centers = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let c = i % 3;
            rows.push(centers.row(c).iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect::<Vec<f64>>());
            labels.push(c);
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let mut adam = epistyle_numcore::Adam::default();
        for _ in 0..300 {
            let grads = {
                let mut g = Graph::new(m.store());
                let xv = g.input(x.clone());
                let loss = m.head_loss(&mut g, h, xv, &labels).unwrap();
                g.backward(loss).unwrap().into_params()
            };
            adam.step(m.store_mut(), &grads, 0.05).unwrap();
        }
        let w = m.store().get(wid);
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        for c in 0..3 {
            let best = (0..3)
                .max_by(|&a, &b| cos(w.row(a), centers.row(c)).total_cmp(&cos(w.row(b), centers.row(c))))
                .unwrap();
            assert_eq!(best, c, "{kind:?}");
        }
    }
}

#[test]
fn softmax_over_cosines_matches_margin_free_cosface() {
    let cfg = ModelConfig {
        cf_margin: 0.0,
        scale: 1.0,
        ..small_cfg()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..20 {
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
        let cf = head_value(cfg.clone(), HeadKind::Cf, Some(w.clone()), x.clone(), &labels);
        let norm = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..t.rows())
                .map(|r| {
                    let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    t.row(r).iter().map(|v| v / n).collect()
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let sm = head_value(cfg.clone(), HeadKind::Sm, Some(norm(&w)), norm(&x), &labels);
        assert!((cf - sm).abs() < 1e-6);
    }
}
