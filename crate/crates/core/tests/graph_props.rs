use std::collections::{BTreeSet, HashMap};

use fixcon_core::ir::{
    load_model, save_model, topo_order, Anchor, AttrValue, Dominators, GraphModel, InputSpec,
    Layout, NodeDef, Op, PreprocessingConfig, Tensor,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random DAG: node `i` reads one or two of the values defined before it.
/// Declaration order is shuffled so topological sorting has work to do.
fn random_dag(picks: &[(usize, Option<usize>)], shuffle_seed: u64) -> GraphModel {
    let mut values = vec!["x".to_string()];
    let mut nodes = Vec::new();
    for (i, &(a, b)) in picks.iter().enumerate() {
        let first = values[a % values.len()].clone();
        let out = format!("v{i}");
        let node = match b {
            Some(b) => {
                let second = values[b % values.len()].clone();
                NodeDef::new(format!("n{i}"), Op::Add, &[&first, &second], &out)
            }
            None => NodeDef::new(format!("n{i}"), Op::Relu, &[&first], &out),
        };
        nodes.push(node);
        values.push(out);
    }
    nodes.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    GraphModel {
        name: "dag".into(),
        input: InputSpec {
            name: "x".into(),
            shape: vec![1, 3, 2, 2],
            layout: Layout::Nchw,
        },
        output_name: values.last().unwrap().clone(),
        nodes,
        preproc: PreprocessingConfig::imagenet(Layout::Nchw),
    }
}

/// Nodes reachable from the input when `removed` is deleted.
fn reachable_without(model: &GraphModel, removed: Option<&str>) -> BTreeSet<String> {
    let mut live: BTreeSet<String> = BTreeSet::new();
    let mut defined: BTreeSet<&str> = BTreeSet::from([model.input.name.as_str()]);
    loop {
        let before = live.len();
        for n in &model.nodes {
            if Some(n.id.as_str()) == removed || live.contains(&n.id) {
                continue;
            }
            if n.inputs.iter().any(|i| defined.contains(i.as_str())) {
                live.insert(n.id.clone());
                defined.insert(n.output());
            }
        }
        if live.len() == before {
            return live;
        }
    }
}

/// Strict dominators of every node by deletion: `d` dominates `v` iff
/// removing `d` cuts `v` off from the input.
fn brute_force_dominators(model: &GraphModel) -> HashMap<String, BTreeSet<String>> {
    let all = reachable_without(model, None);
    let mut doms: HashMap<String, BTreeSet<String>> =
        all.iter().map(|v| (v.clone(), BTreeSet::new())).collect();
    for d in &all {
        let alive = reachable_without(model, Some(d));
        for v in &all {
            if v != d && !alive.contains(v) {
                doms.get_mut(v).unwrap().insert(d.clone());
            }
        }
    }
    doms
}

fn dag_strategy() -> impl Strategy<Value = (Vec<(usize, Option<usize>)>, u64)> {
    (
        prop::collection::vec((0usize..64, prop::option::of(0usize..64)), 1..12),
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn idom_matches_deletion_oracle((picks, seed) in dag_strategy()) {
        let m = random_dag(&picks, seed);
        let doms = Dominators::compute(&m).unwrap();
        let oracle = brute_force_dominators(&m);
        for (v, strict) in &oracle {
            // The immediate dominator is the strict dominator that all others dominate.
            let expected = strict
                .iter()
                .find(|d| strict.iter().all(|o| o == *d || oracle[*d].contains(o)))
                .map_or(Anchor::Input, |d| Anchor::Node(d.clone()));
            prop_assert_eq!(doms.idom(v).unwrap(), expected.clone(), "node {}", v);
            for d in strict {
                prop_assert!(doms.dominates(&Anchor::Node(d.clone()), v).unwrap());
            }
            prop_assert!(doms.dominates(&Anchor::Input, v).unwrap());
        }
    }

    #[test]
    fn topo_order_is_min_index_kahn((picks, seed) in dag_strategy()) {
        let m = random_dag(&picks, seed);
        let order = topo_order(&m).unwrap();
        // Oracle: repeatedly take the first declared node whose inputs exist.
        let mut defined: BTreeSet<&str> = BTreeSet::from(["x"]);
        let mut done: BTreeSet<&str> = BTreeSet::new();
        let mut expected = Vec::new();
        while expected.len() < m.nodes.len() {
            let n = m
                .nodes
                .iter()
                .find(|n| !done.contains(n.id.as_str()) && n.inputs.iter().all(|i| defined.contains(i.as_str())))
                .unwrap();
            done.insert(&n.id);
            defined.insert(n.output());
            expected.push(n.id.clone());
        }
        prop_assert_eq!(order, expected);
    }
}

#[test]
fn diamond_dominators() {
    let m = random_dag(&[(0, None), (1, None), (1, None), (2, Some(3))], 0);
    let doms = Dominators::compute(&m).unwrap();
    assert_eq!(doms.idom("n3").unwrap(), Anchor::Node("n0".into()));
    assert_eq!(doms.idom("n0").unwrap(), Anchor::Input);
    let sub = doms.subgraph("n3", &Anchor::Node("n0".into())).unwrap();
    let ids: BTreeSet<&str> = sub.node_ids.iter().map(String::as_str).collect();
    assert_eq!(ids, BTreeSet::from(["n0", "n1", "n2", "n3"]));
}

#[test]
fn five_node_round_trip_is_bit_exact() {
    let w = Tensor::from_f32(
        vec![2, 3, 1, 1],
        vec![0.1, -0.0, f32::MIN_POSITIVE, 3.5e-8, -7.25, 1.0 / 3.0],
    )
    .unwrap();
    let m = GraphModel {
        name: "five".into(),
        input: InputSpec {
            name: "x".into(),
            shape: vec![1, 3, 4, 4],
            layout: Layout::Nchw,
        },
        output_name: "p".into(),
        nodes: vec![
            NodeDef::new("c", Op::Conv, &["x"], "c_out")
                .with_attr("strides", AttrValue::Ints(vec![1, 1]))
                .with_weight("weight", w)
                .with_weight("bias", Tensor::vector(vec![0.5, -0.5])),
            NodeDef::new("r", Op::Relu, &["c_out"], "r_out"),
            NodeDef::new("g", Op::GlobalAveragePool, &["r_out"], "g_out"),
            NodeDef::new("f", Op::Flatten, &["g_out"], "f_out"),
            NodeDef::new("s", Op::Softmax, &["f_out"], "p"),
        ],
        preproc: PreprocessingConfig::inception(Layout::Nchw),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("five.json");
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, m);
    let (a, b) = (
        m.node("c").unwrap().weight("weight").unwrap(),
        back.node("c").unwrap().weight("weight").unwrap(),
    );
    assert!(a.bit_eq(b));
    // Saving the loaded model reproduces both files byte for byte.
    let again = dir.path().join("again.json");
    save_model(&back, &again).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("five.bin")).unwrap(),
        std::fs::read(dir.path().join("again.bin")).unwrap()
    );
}
