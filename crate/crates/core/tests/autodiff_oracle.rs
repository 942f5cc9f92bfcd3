//! Every differentiable primitive checked against central differences.

use proptest::prelude::*;
use unlearnlab::autodiff::{forward_backward, lookup, Graph, Var, VarMap};
use unlearnlab::gradcheck::{compare_gradients, finite_difference_gradient};
use unlearnlab::rng::SeededRng;
use unlearnlab::{ParamStore, Result, Tensor};

fn random_store(seed: u64, shapes: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut rng = SeededRng::new(seed);
    shapes
        .iter()
        .map(|(n, s)| (n.to_string(), rng.normal_tensor(s, 0.7).unwrap()))
        .collect()
}

/// A composite touching every primitive once.
fn composite(g: &mut Graph<f64>, v: &VarMap) -> Result<Var> {
    let x = lookup(v, "x")?;
    let w = lookup(v, "w")?;
    let b = lookup(v, "b")?;
    let table = lookup(v, "table")?;
    let h = g.matmul(x, w)?; // [3,4]
    let h = g.add(h, b)?;
    let e = g.embedding(table, &[2, 0, 2])?; // [3,4]
    let h = g.mul(h, e)?;
    let h = g.layer_norm(h, 1e-5)?;
    let h = g.gelu(h)?;
    let t = g.transpose(h)?; // [4,3]
    let t = g.reshape(t, &[3, 4])?;
    let s = g.softmax(t)?;
    let left = g.slice(s, 1, 0, 2)?;
    let right = g.slice(h, 1, 1, 2)?;
    let cat = g.concat(&[left, right], 0)?; // [6,2]
    let row = g.slice(right, 0, 1, 1)?; // [1,2]
    let row = g.reshape(row, &[2])?;
    let cat = g.sub(cat, row)?;
    let d = g.scale(cat, 1.5)?;
    let ss = g.sum_squares(d)?;
    let logits = g.slice(h, 1, 0, 3)?;
    let ce = g.cross_entropy(logits, &[0, 2, 1])?;
    let m = g.mean(s)?;
    let total = g.add(ss, ce)?;
    g.add(total, m)
}

#[test]
fn composite_matches_finite_differences() {
    let p = random_store(11, &[("x", &[3, 5]), ("w", &[5, 4]), ("b", &[4]), ("table", &[3, 4])]);
    let (_, analytic) = forward_backward(&p, composite).unwrap();
    let numeric =
        finite_difference_gradient(|q| Ok(forward_backward(q, composite)?.0), &p, 1e-5).unwrap();
    let report = compare_gradients(&analytic, &numeric, 1e-5).unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn sub_with_broadcast_matches_finite_differences() {
    let p = random_store(5, &[("a", &[4, 3]), ("b", &[3])]);
    let f = |g: &mut Graph<f64>, v: &VarMap| {
        let d = g.sub(lookup(v, "a")?, lookup(v, "b")?)?;
        let d = g.mul(d, lookup(v, "b")?)?;
        g.sum_squares(d)
    };
    let (_, analytic) = forward_backward(&p, f).unwrap();
    let numeric = finite_difference_gradient(|q| Ok(forward_backward(q, f)?.0), &p, 1e-5).unwrap();
    assert!(compare_gradients(&analytic, &numeric, 1e-6).unwrap().pass);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_block_gradients(seed in 0u64..10_000) {
        let p = random_store(seed, &[("q", &[4, 3]), ("k", &[5, 3]), ("v", &[5, 2])]);
        let f = |g: &mut Graph<f64>, vars: &VarMap| {
            let kt = g.transpose(lookup(vars, "k")?)?;
            let s = g.matmul(lookup(vars, "q")?, kt)?;
            let s = g.scale(s, 0.5)?;
            let a = g.softmax(s)?;
            let o = g.matmul(a, lookup(vars, "v")?)?;
            let o = g.gelu(o)?;
            g.mean(o)
        };
        let (_, analytic) = forward_backward(&p, f).unwrap();
        let numeric = finite_difference_gradient(|q| Ok(forward_backward(q, f)?.0), &p, 1e-5).unwrap();
        let report = compare_gradients(&analytic, &numeric, 1e-5).unwrap();
        prop_assert!(report.pass, "{:?}", report);
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let s = g.softmax(a).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
