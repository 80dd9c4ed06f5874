mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reslab::campaign::{CampaignConfig, Mode, Prepared};
use reslab::injector::{flip_bit, OutcomeClass};
use reslab::kernels::KERNELS;
use reslab::mir::{parse_module, print_module};
use reslab::recovery::recover_iv;
use reslab::transforms::{run_pipeline, Pass};
use reslab::vm::{run, Program, RunConfig};

fn pipeline() -> impl Strategy<Value = Vec<Pass>> {
    (any::<bool>(), prop_oneof![Just(None), Just(Some(2)), Just(Some(4))], any::<bool>(), any::<bool>()).prop_map(
        |(sr, unroll, icp, mck)| {
            let mut p = Vec::new();
            if icp {
                p.push(Pass::Icp);
            }
            if let Some(f) = unroll {
                p.push(Pass::Unroll(f));
            }
            if mck {
                p.push(Pass::MicroCheckpoint);
            }
            if sr {
                p.push(Pass::StrengthReduce);
            }
            p
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn printing_round_trips(seed in any::<u64>()) {
        let text = common::random_cfg(&mut ChaCha8Rng::seed_from_u64(seed), 4, 12);
        let m = parse_module(&text).unwrap();
        prop_assert_eq!(parse_module(&print_module(&m)).unwrap(), m);
    }

    #[test]
    fn liveness_matches_paths(seed in any::<u64>()) {
        let text = common::random_cfg(&mut ChaCha8Rng::seed_from_u64(seed), 4, 12);
        let m = parse_module(&text).unwrap();
        prop_assert!(common::liveness_mismatches(&m.functions[0]).is_empty(), "{}", text);
    }

    #[test]
    fn recover_iv_inverts_the_recurrence(
        i0 in -1_000_000i64..1_000_000,
        k0 in -1_000_000i64..1_000_000,
        s_i in prop_oneof![-64i64..-1, 1i64..64],
        s_k in prop_oneof![-4096i64..-1, 1i64..4096],
        n in 0i64..100_000,
    ) {
        let (i, k) = (i0 + n * s_i, k0 + n * s_k);
        prop_assert_eq!(recover_iv(k, k0, s_k, i0, s_i), Some(i));
        prop_assert_eq!(recover_iv(i, i0, s_i, k0, s_k), Some(k));
        if s_k.abs() > 1 {
            prop_assert_eq!(recover_iv(k + 1, k0, s_k, i0, s_i), None);
        }
    }

    #[test]
    fn single_bit_flips(payload in any::<u64>(), bit in 0u32..64) {
        let f = flip_bit(payload, bit);
        prop_assert_eq!((f ^ payload).count_ones(), 1);
        prop_assert_eq!(flip_bit(f, bit), payload);
    }

    #[test]
    fn pipelines_preserve_outputs(k in 0..KERNELS.len(), passes in pipeline(), seed in any::<u64>()) {
        let k = &KERNELS[k];
        let m = k.module().unwrap();
        let input = k.random_input(&mut ChaCha8Rng::seed_from_u64(seed));
        let golden = run(&Program::new(m.clone()).unwrap(), &input, RunConfig::default()).unwrap();
        let (t, _) = run_pipeline(&m, &passes).unwrap();
        let r = run(&Program::new(t).unwrap(), &input, RunConfig::default()).unwrap();
        prop_assert_eq!(r.status, golden.status);
        prop_assert_eq!(r.output, golden.output);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn campaigns_partition_and_replay(k in 0..KERNELS.len(), seed in any::<u64>(), mode in 0usize..3) {
        let mode = [Mode::None, Mode::Care, Mode::IterPro][mode];
        let p = Prepared::from_kernel(&KERNELS[k], mode).unwrap();
        let cfg = CampaignConfig { runs: 40, seed, mode, ..Default::default() };
        let c = p.campaign(&cfg).unwrap();
        let r = c.report();
        prop_assert_eq!(OutcomeClass::ALL.iter().map(|x| r.count(*x)).sum::<u64>(), 40);
        prop_assert_eq!(r.buckets.iter().sum::<u64>(), r.first_traps.values().sum::<u64>());
        if let Some(rate) = r.recovery_rate() {
            prop_assert!((0.0..=1.0).contains(&rate));
        }
        // Replaying any plan reproduces its record.
        for rec in c.records.iter().take(10) {
            let again = p.run_plan(&rec.plan).unwrap();
            prop_assert_eq!(again.outcome, rec.outcome);
            let decisions = |a: &[reslab::runtime::RecoveryAction]| a.iter().map(|x| (x.decision, x.attempts)).collect::<Vec<_>>();
            prop_assert_eq!(decisions(&again.actions), decisions(&rec.actions));
        }
    }
}
