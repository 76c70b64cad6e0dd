//! Region enumeration checked against brute-force sampling.

use icct_core::crisp::{CrispNode, CrispTree, Direction, LeafController, Term};
use icct_core::envs::make_env;
use icct_core::icct::{Icct, IcctConfig, Variant};
use icct_core::verify::{enumerate_regions, enumerate_regions_counted, verify_bounds, PropertySpec, Region};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tree(rng: &mut impl Rng, m: usize, depth: usize) -> CrispTree {
    let l = 1 << depth;
    let nodes = (0..l - 1)
        .map(|_| CrispNode {
            k: rng.random_range(0..m),
            threshold: rng.random_range(-1.0..1.0),
            dir: if rng.random_bool(0.5) {
                Direction::Greater
            } else {
                Direction::Less
            },
        })
        .collect();
    let leaves = (0..l)
        .map(|_| {
            let e = rng.random_range(0..=m);
            let terms = sample(rng, m, e)
                .into_iter()
                .map(|idx| Term {
                    idx,
                    coef: rng.random_range(-2.0..2.0),
                })
                .collect();
            vec![LeafController {
                terms,
                bias: rng.random_range(-0.5..0.5),
                std: 1.0,
            }]
        })
        .collect();
    CrispTree {
        depth,
        m,
        nodes,
        leaves,
        bounds: vec![[-2.0, 2.0]],
    }
}

fn domain(m: usize) -> (Region, Vec<[f64; 2]>) {
    let b = vec![[-1.0, 1.0]; m];
    (Region::closed(&b).unwrap(), b)
}

#[test]
fn regions_partition_the_domain() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let m = rng.random_range(1..=6);
        let depth = rng.random_range(1..=4);
        let tree = random_tree(&mut rng, m, depth);
        let (dom, bounds) = domain(m);
        let regions = enumerate_regions(&tree, &dom).unwrap();
        assert_eq!(regions.len(), tree.num_leaves());
        let total: f64 = regions
            .iter()
            .filter_map(|r| r.region.as_ref())
            .map(Region::volume)
            .sum();
        assert!((total - dom.volume()).abs() <= 1e-9, "{total}");

        for _ in 0..2000 {
            let x: Vec<f64> = bounds.iter().map(|[lo, hi]| rng.random_range(*lo..=*hi)).collect();
            let hits: Vec<usize> = regions
                .iter()
                .filter(|r| r.region.as_ref().is_some_and(|g| g.contains(&x)))
                .map(|r| r.leaf)
                .collect();
            assert_eq!(hits, vec![tree.leaf_index(&x)]);
            let r = &regions[hits[0]];
            let [lo, hi] = r.action_range.as_ref().unwrap()[0];
            let a = tree.predict(&x).unwrap()[0];
            assert!(lo - 1e-12 <= a && a <= hi + 1e-12);
        }
    }
}

#[test]
fn thresholds_on_the_boundary_land_in_one_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let tree = random_tree(&mut rng, 2, 3);
        let (dom, _) = domain(2);
        let regions = enumerate_regions(&tree, &dom).unwrap();
        for n in &tree.nodes {
            let mut x = vec![0.3, -0.2];
            x[n.k] = n.threshold;
            let hits = regions
                .iter()
                .filter(|r| r.region.as_ref().is_some_and(|g| g.contains(&x)))
                .count();
            assert_eq!(hits, 1);
        }
    }
}

#[test]
fn operation_count_is_linear_in_tree_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for depth in 1..=8 {
        let m = 4;
        let tree = random_tree(&mut rng, m, depth);
        let (dom, _) = domain(m);
        let (regions, ops) = enumerate_regions_counted(&tree, &dom).unwrap();
        assert_eq!(ops.predicates, tree.num_leaves() * depth);
        let terms: usize = regions
            .iter()
            .filter(|r| r.feasible)
            .map(|r| tree.leaves[r.leaf][0].terms.len())
            .sum();
        assert_eq!(ops.terms, terms);
        assert!(ops.terms <= tree.num_leaves() * m);
    }
}

#[test]
fn verdicts_agree_with_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut fails = 0;
    for _ in 0..60 {
        let m = rng.random_range(1..=4);
        let depth = rng.random_range(1..=3);
        let tree = random_tree(&mut rng, m, depth);
        let (dom, bounds) = domain(m);
        let limit = rng.random_range(0.5..2.0);
        let limits = [[-limit, limit]];
        let v = verify_bounds(&tree, &dom, &limits).unwrap();
        let sampled_violation = (0..5000).any(|_| {
            let x: Vec<f64> = bounds.iter().map(|[lo, hi]| rng.random_range(*lo..=*hi)).collect();
            tree.predict(&x).unwrap()[0].abs() > limit
        });
        if sampled_violation {
            assert!(!v.pass);
        }
        if !v.pass {
            fails += 1;
            // Every listed leaf must actually leave the limits.
            for &i in &v.violations {
                let r = &v.regions[i];
                let [lo, hi] = r.action_range.as_ref().unwrap()[0];
                assert!(lo < -limit || hi > limit);
            }
        }
    }
    assert!(fails > 0);
}

#[test]
fn trained_shape_trees_export_valid_dot() {
    let env = make_env("lane").unwrap();
    let spec = env.spec().clone();
    for (depth, e) in [(1, 0), (2, 1), (3, 2)] {
        let cfg = IcctConfig {
            depth,
            m: spec.obs_dim,
            action_dim: spec.action_dim,
            e,
            variant: Variant::StraightThrough,
            shared_std: false,
            l1: 0.0,
            bounds: spec.action_bounds.clone(),
        };
        let tree = Icct::init(cfg, depth as u64).unwrap().to_crisp().unwrap();
        for dot in [tree.to_dot(Some(&spec)), tree.to_dot(None)] {
            let graph = dot_parser::ast::Graph::try_from(dot.as_str());
            assert!(graph.is_ok(), "{dot}");
        }
    }
}

#[test]
fn property_domains_use_physical_units() {
    let env = make_env("lane").unwrap();
    let spec = env.spec().clone();
    let name = spec.feature_names[0].clone();
    let prop: PropertySpec = serde_json::from_value(serde_json::json!({
        "domain": { name: [spec.obs_offset[0], spec.obs_offset[0] + spec.obs_scale[0]] },
        "limits": [[-1.0, 1.0]]
    }))
    .unwrap();
    let r = prop.region(&spec).unwrap();
    assert!((r.dims[0].lo - 0.0).abs() < 1e-12 && (r.dims[0].hi - 1.0).abs() < 1e-12);
    assert!(r.dims[1].hi.is_infinite());
}
