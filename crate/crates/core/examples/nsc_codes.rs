//! Parse, validate and enumerate Network Structure Codes.

use blockqnn::agent::{ActionSpace, Prefix};
use blockqnn::nsc::{enumerate_actions, parse_block, serialize_block, validate_code, CodeSpaceLimits, NscCode, OpType};

fn main() {
    // a residual-style block: conv, conv, add(input, conv), terminal
    let text = "1,1,3,0,0;2,1,3,1,0;3,5,0,0,2;4,7,0,0,0";
    let codes = parse_block(text).expect("valid text");
    for c in &codes {
        println!("{c}  ({})", c.op);
    }
    assert_eq!(serialize_block(&codes), text);
    println!("json: {}", serde_json::to_string(&codes).unwrap());

    let limits = CodeSpaceLimits::block_search();
    let bad = NscCode::new(2, OpType::ElementalAdd, 0, 1, 1);
    match validate_code(&bad, 2, &limits) {
        Ok(()) => unreachable!(),
        Err(r) => println!("rejected {bad}: {r} [{}]", r.kind()),
    }
    match parse_block("1,1,3,0") {
        Ok(_) => unreachable!(),
        Err(e) => println!("parse error: {e}"),
    }

    for position in [1, 2, 5, 23] {
        let n = enumerate_actions(position, &limits).unwrap().len();
        println!("position {position:>2}: {n} codes");
    }

    // masking: layer 3 concatenates two convs, so it is twice as wide as
    // either and cannot be added to one of them
    let space = ActionSpace::block();
    let mut prefix = Prefix::new();
    for c in parse_block("1,1,3,0,0;2,1,1,0,0;3,6,0,1,2").unwrap() {
        prefix.push(&c);
    }
    println!("legal actions at position 4: {} of {}", space.legal_count(&prefix), space.actions_at(4).len());
    for add in [NscCode::new(4, OpType::ElementalAdd, 0, 2, 1), NscCode::new(4, OpType::ElementalAdd, 0, 3, 1)] {
        println!("{add} allowed: {}", space.is_allowed(&prefix, &add));
    }
}
