use proptest::prelude::*;

use scaa_core::io::{decode_payload, parse_header, Payload};
use scaa_core::metrics::{dsc, hd95};
use scaa_core::synth::PhantomSpec;
use scaa_core::{Graph, Tensor};

fn mask(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(prop::bool::weighted(0.3), n)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_ignores_shifts(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let mut g = Graph::<f64>::new();
        let n = logits.len();
        let a = g.constant(Tensor::new(vec![n], logits.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![n], logits.iter().map(|l| l + shift).collect()).unwrap());
        let (sa, sb) = (g.softmax(a, 0).unwrap(), g.softmax(b, 0).unwrap());
        let (pa, pb) = (g.value(sa).data(), g.value(sb).data());
        prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in pa.iter().zip(pb) {
            prop_assert!(*x >= 0.0);
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn overlap_metrics_are_symmetric(a in mask(4 * 5 * 6), b in mask(4 * 5 * 6)) {
        let shape = [4, 5, 6];
        let d = dsc(&a, &b).unwrap();
        prop_assert_eq!(d, dsc(&b, &a).unwrap());
        prop_assert!((0.0..=100.0).contains(&d));
        prop_assert_eq!(hd95(&a, &b, shape, [1.0, 2.0, 0.5]).unwrap(), hd95(&b, &a, shape, [1.0, 2.0, 0.5]).unwrap());
        let own = hd95(&a, &a, shape, [1.0; 3]).unwrap();
        prop_assert!(own.is_none() || own == Some(0.0));
    }

    #[test]
    fn f32_payloads_round_trip(dims in prop::array::uniform3(1usize..5), seed in any::<u32>()) {
        let n = dims.iter().product::<usize>();
        let values: Vec<f32> = (0..n).map(|i| (i as f32 - seed as f32).sin()).collect();
        let header = parse_header(&format!(
            r#"{{"version":1,"id":"p","dims":[{},{},{}],"spacing":[1.0,1.0,1.0],"dtype":"f32","num_classes":2}}"#,
            dims[0], dims[1], dims[2]
        )).unwrap();
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        prop_assert_eq!(decode_payload(&header, &bytes).unwrap(), Payload::F32(values));
        prop_assert!(decode_payload(&header, &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn phantom_configs_round_trip(seed in any::<u64>(), noise in 0.0f64..100.0, body in -200.0f64..200.0) {
        let mut spec = PhantomSpec::default().with_seed(seed);
        spec.noise = noise;
        spec.body_hu = body;
        let parsed = PhantomSpec::parse(&spec.to_config()).unwrap();
        prop_assert_eq!(parsed, spec);
    }
}
