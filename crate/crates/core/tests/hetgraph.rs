use epistyle::corpus::Post;
use epistyle::hetgraph::{
    build_graph, pair_loss_and_grad, sample_walks, train_skipgram, walk_from, HetGraph, MetapathScheme, NodeType,
    SkipGramConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn post(author: &str, sub: &str, thread: &str, id: &str, start: bool) -> Post {
    Post {
        market: "M".into(),
        subforum: sub.into(),
        thread_id: thread.into(),
        post_id: id.into(),
        author: author.into(),
        timestamp: 1_000,
        is_thread_start: start,
        body: String::new(),
    }
}

/// A small forum with uneven degrees: 6 users, 3 subforums, 9 threads.
fn forum() -> HetGraph {
    forum_of(6, 3, 9)
}

fn forum_of(users: usize, subs: usize, threads: usize) -> HetGraph {
    let mut posts = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in 0..threads {
        let sub = format!("s{}", t % subs);
        let starter = format!("u{}", t % users);
        posts.push(post(&starter, &sub, &format!("t{t}"), &format!("p{t}_0"), true));
        for r in 1..(2 + t % 4) {
            let who = format!("u{}", rng.gen_range(0..users));
            posts.push(post(&who, &sub, &format!("t{t}"), &format!("p{t}_{r}"), false));
        }
    }
    let refs: Vec<&Post> = posts.iter().collect();
    build_graph(&refs)
}

#[test]
fn pair_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 6;
    for _ in 0..10 {
        let mut v: Vec<Vec<f64>> = (0..5).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let loss = |v: &[Vec<f64>]| {
            let negs: Vec<&[f64]> = v[2..].iter().map(Vec::as_slice).collect();
            pair_loss_and_grad(&v[0], &v[1], &negs).loss
        };
        let negs: Vec<&[f64]> = v[2..].iter().map(Vec::as_slice).collect();
        let g = pair_loss_and_grad(&v[0], &v[1], &negs);
        let analytic: Vec<Vec<f64>> = [vec![g.center, g.context], g.negatives].concat();
        let eps = 1e-5;
        for i in 0..v.len() {
            for k in 0..d {
                let x = v[i][k];
                v[i][k] = x + eps;
                let up = loss(&v);
                v[i][k] = x - eps;
                let down = loss(&v);
                v[i][k] = x;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[i][k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-4 || (a - numeric).abs() < 1e-9, "vector {i} coord {k}: {a} vs {numeric}");
            }
        }
    }
}

#[test]
fn walk_types_follow_the_cycled_scheme() {
    let g = forum();
    let schemes = MetapathScheme::defaults();
    let walks = sample_walks(&g, &schemes, 14, 40, 5).unwrap();
    let users: Vec<u32> = g.nodes_of(NodeType::U).collect();
    for (idx, w) in walks.iter().enumerate() {
        let (ui, j) = (idx / 14, idx % 14);
        assert_eq!(w[0], users[ui]);
        let s = &schemes[(ui + j) % schemes.len()];
        for (step, &v) in w.iter().enumerate() {
            assert_eq!(g.node_type(v), s.type_at(step));
        }
        for pair in w.windows(2) {
            assert!(g.neighbors(pair[0], g.node_type(pair[1])).contains(&pair[1]));
        }
    }
}

#[test]
fn walks_are_reproducible() {
    let g = forum();
    let a = sample_walks(&g, &MetapathScheme::defaults(), 10, 30, 42).unwrap();
    let b = sample_walks(&g, &MetapathScheme::defaults(), 10, 30, 42).unwrap();
    let c = sample_walks(&g, &MetapathScheme::defaults(), 10, 30, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn two_way_choice_is_balanced() {
    // One user posting in two threads: the next hop from U along UPTPU is
    // one of two posts.
    let posts = [post("u", "s", "t1", "p1", false), post("u", "s", "t2", "p2", false)];
    let refs: Vec<&Post> = posts.iter().collect();
    let g = build_graph(&refs);
    let scheme: MetapathScheme = "UPTPU".parse().unwrap();
    let u = g.lookup(NodeType::U, "u").unwrap();
    let p1 = g.lookup(NodeType::P, "p1").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 10_000;
    let hits = (0..n)
        .filter(|_| walk_from(&g, &scheme, u, 2, &mut rng)[1] == p1)
        .count();
    let frac = hits as f64 / n as f64;
    assert!((frac - 0.5).abs() < 0.03, "{frac}");
}

#[test]
fn next_hops_are_uniform_over_typed_neighbours() {
    let g = forum();
    let walks = sample_walks(&g, &MetapathScheme::defaults(), 100, 80, 1).unwrap();
    let mut counts: std::collections::HashMap<(u32, u32), u64> = Default::default();
    let mut steps = 0;
    let schemes = MetapathScheme::defaults();
    let users: Vec<u32> = g.nodes_of(NodeType::U).collect();
    for (idx, w) in walks.iter().enumerate() {
        let s = &schemes[(idx / 100 + idx % 100) % 7];
        for (step, pair) in w.windows(2).enumerate() {
            let want = s.type_at(step + 1);
            if g.neighbors(pair[0], want).len() > 1 {
                *counts.entry((pair[0], pair[1])).or_default() += 1;
            }
            steps += 1;
        }
    }
    assert_eq!(users.len(), 6);
    assert!(steps > 30_000);
    // Pool by (source, required type): chi-square over the neighbours.
    let mut stat = 0.0;
    let mut dof = 0usize;
    let mut grouped: std::collections::BTreeMap<(u32, NodeType), Vec<u64>> = Default::default();
    for src in 0..g.num_nodes() as u32 {
        for t in NodeType::ALL {
            let nb = g.neighbors(src, t);
            if nb.len() < 2 {
                continue;
            }
            let obs: Vec<u64> = nb.iter().map(|&d| counts.get(&(src, d)).copied().unwrap_or(0)).collect();
            if obs.iter().sum::<u64>() > 0 {
                grouped.insert((src, t), obs);
            }
        }
    }
    for obs in grouped.values() {
        let total: u64 = obs.iter().sum();
        let expected = total as f64 / obs.len() as f64;
        if expected < 5.0 {
            continue;
        }
        stat += obs.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum::<f64>();
        dof += obs.len() - 1;
    }
    assert!(dof > 0);
    let p = 1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 = {stat}, dof = {dof}, p = {p}");
}

#[test]
fn epoch_loss_decreases_on_tiny_graph() {
    // One user, subforum, thread and post.
    let posts = [post("a", "s", "t1", "p1", true)];
    let refs: Vec<&Post> = posts.iter().collect();
    let g = build_graph(&refs);
    assert_eq!(g.num_nodes(), 4);
    let walks = sample_walks(&g, &MetapathScheme::defaults(), 20, 20, 7).unwrap();
    let cfg = SkipGramConfig {
        dim: 16,
        epochs: 2,
        seed: 7,
        ..Default::default()
    };
    let e = train_skipgram(&g, &walks, &cfg).unwrap();
    assert!(e.epoch_losses[1] < e.epoch_losses[0], "{:?}", e.epoch_losses);
    let again = train_skipgram(&g, &walks, &cfg).unwrap();
    assert_eq!(again.vectors, e.vectors);
}

#[test]
fn epoch_loss_is_non_increasing_over_three_epochs() {
    let g = forum_of(40, 6, 120);
    let walks = sample_walks(&g, &MetapathScheme::defaults(), 14, 40, 7).unwrap();
    for typed in [true, false] {
        let cfg = SkipGramConfig {
            dim: 16,
            epochs: 3,
            seed: 7,
            typed_negatives: typed,
            ..Default::default()
        };
        let e = train_skipgram(&g, &walks, &cfg).unwrap();
        let l = &e.epoch_losses;
        assert!(l[1] <= l[0] && l[2] <= l[1], "typed={typed}: {l:?}");
        assert!(e.vectors.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn bad_skipgram_config_is_rejected() {
    let g = forum();
    let walks = sample_walks(&g, &MetapathScheme::defaults(), 2, 5, 0).unwrap();
    for cfg in [
        SkipGramConfig { dim: 0, ..Default::default() },
        SkipGramConfig { window: 0, ..Default::default() },
    ] {
        assert!(train_skipgram(&g, &walks, &cfg).is_err());
    }
}
