use icct_autodiff::optim::ParamStore;
use icct_autodiff::{Graph, Tensor};
use icct_core::baselines::{Cddt, LeafKind};
use icct_core::envs::make_env;
use icct_core::icct::{Icct, IcctConfig, Variant};
use icct_core::policy::{act_batch, states_tensor, Policy};
use icct_core::sac::{ReplayBuffer, Transition};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_icct(env: &str, depth: usize, e: usize, seed: u64) -> Icct {
    let env = make_env(env).unwrap();
    let spec = env.spec();
    let cfg = IcctConfig {
        depth,
        m: spec.obs_dim,
        action_dim: spec.action_dim,
        e: e.min(spec.obs_dim),
        variant: Variant::StraightThrough,
        shared_std: false,
        l1: 0.0,
        bounds: spec.action_bounds.clone(),
    };
    let mut model = Icct::init(cfg, seed).unwrap();
    // Spread the thresholds so that every leaf is reachable.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for slot in 0..3 {
        for v in model.params_mut().get_mut(slot).data_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
    }
    model
}

fn states(rng: &mut impl Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

fn transition(r: f64) -> Transition {
    Transition {
        state: vec![r],
        action: vec![0.0],
        raw_action: vec![0.0],
        reward: r,
        next_state: vec![r],
        done: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn deterministic_actions_match_the_crisp_tree(
        env in prop::sample::select(vec!["pendulum", "lane", "ring", "plateau"]),
        depth in 1usize..=5,
        e in 0usize..=6,
        seed in any::<u64>(),
    ) {
        let model = random_icct(env, depth, e, seed);
        let tree = model.to_crisp().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = states(&mut rng, 64, model.obs_dim());
        let out = act_batch(&model, &xs, false, &mut rng).unwrap();
        for (x, o) in xs.iter().zip(&out) {
            let crisp = tree.predict(x).unwrap();
            for (a, c) in o.action.iter().zip(&crisp) {
                prop_assert!((a - c).abs() <= 1e-9, "{a} vs {c}");
            }
            prop_assert_eq!(o.leaf, Some(tree.leaf_index(x)));
        }
    }

    #[test]
    fn every_leaf_keeps_exactly_e_terms(
        env in prop::sample::select(vec!["pendulum", "lane", "ring"]),
        depth in 1usize..=4,
        e in 0usize..=6,
        seed in any::<u64>(),
    ) {
        let model = random_icct(env, depth, e, seed);
        let want = model.config().e;
        let tree = model.to_crisp().unwrap();
        for leaf in tree.active_coefficients() {
            for n in leaf {
                prop_assert_eq!(n, want);
            }
        }
        let counts = model.count_params();
        prop_assert!(counts.active <= counts.total);
    }

    #[test]
    fn wider_leaves_never_lose_active_parameters(depth in 1usize..=3, seed in any::<u64>()) {
        let counts: Vec<usize> = (0..=5)
            .map(|e| random_icct("lane", depth, e, seed).count_params().active)
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    }

    #[test]
    fn replay_buffer_keeps_the_newest_items(capacity in 1usize..40, pushes in 0usize..120) {
        let mut buf = ReplayBuffer::new(capacity).unwrap();
        for i in 0..pushes {
            buf.push(transition(i as f64)).unwrap();
        }
        prop_assert_eq!(buf.len(), pushes.min(capacity));
        let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        let want: Vec<f64> = (pushes.saturating_sub(capacity)..pushes).map(|i| i as f64).collect();
        prop_assert_eq!(kept, want);
        if !buf.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(pushes as u64);
            let b = buf.sample(buf.len(), &mut rng).unwrap();
            let mut r = b.rewards.clone();
            r.sort_by(f64::total_cmp);
            r.dedup();
            prop_assert_eq!(r.len(), buf.len());
        }
    }

    #[test]
    fn soft_update_is_a_convex_combination(
        a in prop::collection::vec(-10.0f64..10.0, 1..20),
        shift in -5.0f64..5.0,
        tau in 0.0f64..=1.0,
    ) {
        let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let mut target = ParamStore::new();
        target.push(Tensor::new(vec![a.len()], a.clone()).unwrap());
        let mut online = ParamStore::new();
        online.push(Tensor::new(vec![b.len()], b.clone()).unwrap());
        target.soft_update(&online, tau);
        for ((t, x), y) in target.get(0).data().iter().zip(&a).zip(&b) {
            prop_assert!(*t >= x.min(*y) - 1e-12 && *t <= x.max(*y) + 1e-12);
            prop_assert!((t - (tau * y + (1.0 - tau) * x)).abs() <= 1e-12);
        }
    }

    #[test]
    fn cddt_path_weights_form_a_distribution(depth in 1usize..=4, seed in any::<u64>()) {
        let env = make_env("lane").unwrap();
        let model = Cddt::init(depth, env.spec(), LeafKind::Controller, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = states(&mut rng, 16, env.spec().obs_dim);
        let mut g = Graph::new();
        let p = model.params().bind_frozen(&mut g);
        let x = g.constant(states_tensor(&xs, env.spec().obs_dim).unwrap());
        let w = model.path_weights(&mut g, &p, x).unwrap();
        let w = g.value(w);
        prop_assert_eq!(w.shape(), &[16, 1 << depth][..]);
        for row in w.data().chunks(1 << depth) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
