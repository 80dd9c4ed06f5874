mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reslab::mir::{parse_module, validate};

#[test]
fn random_cfgs_match_the_path_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut looping = 0;
    for _ in 0..300 {
        let text = common::random_cfg(&mut rng, 4, 12);
        let m = parse_module(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
        assert!(validate(&m).is_empty(), "{:?}\n{text}", validate(&m));
        let f = &m.functions[0];
        assert!(f.num_insts() <= 12, "{text}");
        let bad = common::liveness_mismatches(f);
        assert!(bad.is_empty(), "{bad:?}\n{text}");
        looping += !reslab::analysis::find_loops(f).is_empty() as usize;
    }
    assert!(looping >= 60, "only {looping} CFGs with loops");
}

#[test]
fn oracle_sees_loop_carried_uses() {
    let m = parse_module(
        "fn main(%a: i64, %b: i64) -> i64 {
b0:
  br b1
b1:
  %p1 = phi i64 [%a, b0], [%v1_0, b1]
  %v1_0 = add %p1, %b
  %c1 = icmp lt %v1_0, 9
  condbr %c1, b1, b2
b2:
  ret %v1_0
}",
    )
    .unwrap();
    let f = &m.functions[0];
    let b = f.value_by_name("b").unwrap();
    let v = f.value_by_name("v1_0").unwrap();
    let cond = f.inst(reslab::mir::InstId(4));
    assert!(common::brute_live_out(f, cond.id, b));
    assert!(common::brute_live_out(f, cond.id, v));
    assert!(common::liveness_mismatches(f).is_empty());
}
