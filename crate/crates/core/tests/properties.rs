use blockqnn::agent::{sample_trajectory, ActionSpace, Prefix, QTable, Trajectory};
use blockqnn::graph::{build_block, build_connection_network, Template};
use blockqnn::nsc::{parse_block, serialize_block, validate_block, NscCode, OpType};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn any_code() -> impl Strategy<Value = NscCode> {
    (any::<u8>(), 1u32..=7, any::<u16>(), any::<u8>(), any::<u8>())
        .prop_map(|(i, op, k, p1, p2)| NscCode::new(i, OpType::from_code(op).unwrap(), k, p1, p2))
}

/// Codes that look plausible: small indices and kernels, predecessors that may dangle.
fn near_code() -> impl Strategy<Value = NscCode> {
    (0u8..30, 1u32..=7, prop_oneof![Just(0u16), Just(1), Just(3), Just(5), 0u16..9], 0u8..30, 0u8..30)
        .prop_map(|(i, op, k, p1, p2)| NscCode::new(i, OpType::from_code(op).unwrap(), k, p1, p2))
}

fn uniform() -> QTable {
    QTable::new(0.01, 1.0).unwrap()
}

proptest! {
    #[test]
    fn text_form_round_trips(codes in prop::collection::vec(any_code(), 1..40)) {
        let text = serialize_block(&codes);
        prop_assert_eq!(parse_block(&text).unwrap(), codes.clone());
        prop_assert_eq!(parse_block(&format!("{text}\n")).unwrap(), codes);
    }

    #[test]
    fn parser_rejects_rather_than_panics(text in "[0-9,;a ]{0,60}") {
        if let Ok(codes) = parse_block(&text) {
            prop_assert_eq!(serialize_block(&codes).len() <= text.len(), true);
        }
    }

    #[test]
    fn block_builder_never_panics(codes in prop::collection::vec(near_code(), 0..30), width in 0u64..300) {
        let _ = build_block(&codes, width);
    }

    #[test]
    fn sampled_blocks_are_legal_and_build(seed in any::<u64>()) {
        let space = ActionSpace::block();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_trajectory(&uniform(), 1.0, &space, &mut rng);
        let codes = t.codes().to_vec();
        prop_assert!(codes.last().unwrap().is_terminal());
        prop_assert!(codes.len() <= space.max_position() as usize);
        prop_assert!(validate_block(&codes, space.limits()).is_ok());
        prop_assert!(Trajectory::new(codes.clone(), &space).is_ok());
        let g = build_block(&codes, 32);
        prop_assert!(g.is_ok(), "{}: {:?}", serialize_block(&codes), g.err());
    }

    #[test]
    fn sampled_connections_respect_the_pool_cap_and_build(seed in any::<u64>()) {
        let space = ActionSpace::connection();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_trajectory(&uniform(), 1.0, &space, &mut rng);
        let pools = t.codes().iter().filter(|c| c.op.is_pooling()).count();
        prop_assert!(pools <= 5);
        let template = Template::cifar();
        let block = build_block(&parse_block("1,1,3,0,0;2,7,0,0,0").unwrap(), template.base_width).unwrap();
        let net = build_connection_network(t.codes(), &block, &template);
        prop_assert!(net.is_ok(), "{}: {:?}", serialize_block(t.codes()), net.err());
    }

    #[test]
    fn every_offered_action_extends_to_a_buildable_block(seed in any::<u64>(), steps in 0usize..12) {
        let space = ActionSpace::block();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codes: Vec<NscCode> = sample_trajectory(&uniform(), 1.0, &space, &mut rng)
            .into_codes()
            .into_iter()
            .filter(|c| !c.is_terminal())
            .take(steps)
            .collect();
        codes.truncate(space.max_position() as usize - 2);
        let prefix = Prefix::from_codes(&codes);
        for a in space.legal(&prefix).filter(|a| !a.is_terminal()) {
            let mut block = codes.clone();
            block.push(*a);
            block.push(NscCode::terminal(block.len() as u8 + 1));
            let g = build_block(&block, 16);
            prop_assert!(g.is_ok(), "{}: {:?}", serialize_block(&block), g.err());
        }
    }
}

#[test]
fn first_actions_are_uniform_when_exploring() {
    let space = ActionSpace::block();
    let q = uniform();
    let legal: Vec<NscCode> = space.legal(&Prefix::new()).copied().collect();
    let k = legal.len();
    let n = 400 * k;
    let mut counts = vec![0usize; k];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..n {
        let first = sample_trajectory(&q, 1.0, &space, &mut rng).codes()[0];
        counts[legal.iter().position(|c| *c == first).expect("first action is legal")] += 1;
    }
    let expected = n as f64 / k as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Wilson-Hilferty upper 0.1% point of chi-squared with k-1 degrees of freedom
    let dof = (k - 1) as f64;
    let h = 2.0 / (9.0 * dof);
    let critical = dof * (1.0 - h + 3.09 * h.sqrt()).powi(3);
    assert!(chi2 < critical, "chi2 {chi2:.2} >= {critical:.2} over {k} actions: {counts:?}");
}
