use indexmap::IndexMap;
use proptest::prelude::*;
use simhub_campaign::{expand, Axis, AxisValue, CampaignSpec};
use simhub_core::{Capacity, Scalar, SystemId};

const KEYS: [&str; 4] = ["a", "b", "c", "d"];

fn value() -> impl Strategy<Value = AxisValue> {
    prop::collection::vec((0..KEYS.len(), any::<i32>(), any::<bool>()), 0..3).prop_map(|sets| {
        let mut v = AxisValue::default();
        for (k, x, build) in sets {
            let m = if build { &mut v.build_parameters } else { &mut v.run_parameters };
            m.insert(KEYS[k].to_string(), Scalar::Int(x as i64));
        }
        v
    })
}

fn spec() -> impl Strategy<Value = CampaignSpec> {
    prop::collection::vec(prop::collection::vec(value(), 0..4), 1..4).prop_map(|axes| CampaignSpec {
        system: SystemId::new("s", "1"),
        backend: None,
        parallelism: Capacity::Unbounded,
        per_run_timeout_s: 10.0,
        retries: 1,
        axes: axes
            .into_iter()
            .enumerate()
            .map(|(i, values)| Axis {
                name: format!("axis{i}"),
                values,
            })
            .collect(),
    })
}

/// Nested-loop product, overrides applied axis by axis.
fn oracle(spec: &CampaignSpec) -> Vec<(Vec<usize>, IndexMap<String, Scalar>, IndexMap<String, Scalar>)> {
    let mut acc: Vec<(Vec<usize>, IndexMap<String, Scalar>, IndexMap<String, Scalar>)> =
        vec![(Vec::new(), IndexMap::new(), IndexMap::new())];
    for axis in &spec.axes {
        let mut next = Vec::new();
        for (coords, b, r) in &acc {
            for (i, v) in axis.values.iter().enumerate() {
                let mut c = coords.clone();
                c.push(i);
                let mut b = b.clone();
                let mut r = r.clone();
                b.extend(v.build_parameters.clone());
                r.extend(v.run_parameters.clone());
                next.push((c, b, r));
            }
        }
        acc = next;
    }
    acc
}

proptest! {
    #[test]
    fn expansion_equals_nested_product(spec in spec()) {
        let points = expand(&spec, None).unwrap();
        let expected = oracle(&spec);
        prop_assert_eq!(points.len(), spec.axes.iter().map(|a| a.values.len()).product::<usize>());
        prop_assert_eq!(points.len(), expected.len());
        for (i, (p, (coords, b, r))) in points.iter().zip(&expected).enumerate() {
            prop_assert_eq!(p.index, i);
            prop_assert_eq!(&p.coords, coords);
            prop_assert_eq!(&p.syscfg.build_overrides, b);
            prop_assert_eq!(&p.syscfg.run_overrides, r);
        }
    }
}
