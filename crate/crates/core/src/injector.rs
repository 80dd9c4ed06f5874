//! Single-bit fault injection: execution-weighted plan sampling and outcome
//! classification against a golden run.

use std::fmt;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::mir::{FuncId, InstId, Module, Op};
use crate::vm::{Injection, RunResult, Status, TrapKind};

/// One injection: flip `bit` of the result of `inst` after its
/// `occurrence`-th execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectionPlan {
    pub id: u64,
    pub func: FuncId,
    pub inst: InstId,
    pub occurrence: u64,
    pub bit: u32,
    /// Seed of the campaign that produced the plan.
    pub seed: u64,
}

impl InjectionPlan {
    pub fn injection(&self) -> Injection {
        Injection {
            func: self.func,
            inst: self.inst,
            occurrence: self.occurrence,
            bit: self.bit,
        }
    }
}

pub fn flip_bit(payload: u64, bit: u32) -> u64 {
    payload ^ (1u64 << bit)
}

/// Instructions a flip can land in: those producing a value, and stores
/// (whose written cell is flipped).
pub fn is_injectable(op: &Op, has_result: bool) -> bool {
    has_result || matches!(op, Op::Store { .. })
}

/// Execution counts of the injectable instructions of `m`, flattened.
pub fn injection_sites(m: &Module, profile: &[Vec<u64>]) -> Vec<(FuncId, InstId, u64)> {
    let mut sites = Vec::new();
    for (fi, f) in m.functions.iter().enumerate() {
        for inst in f.insts() {
            let count = profile[fi][inst.id.index()];
            if count > 0 && is_injectable(&inst.op, inst.result.is_some()) {
                sites.push((FuncId(fi as u32), inst.id, count));
            }
        }
    }
    sites
}

/// Picks an instruction with probability proportional to its execution
/// count, then a uniform occurrence and bit.
pub struct PlanSampler {
    sites: Vec<(FuncId, InstId, u64)>,
    dist: WeightedIndex<u64>,
}

impl PlanSampler {
    /// `None` when no site ever executed.
    pub fn new(sites: Vec<(FuncId, InstId, u64)>) -> Option<PlanSampler> {
        let dist = WeightedIndex::new(sites.iter().map(|s| s.2)).ok()?;
        Some(PlanSampler { sites, dist })
    }

    pub fn sample(&self, id: u64, seed: u64, rng: &mut impl Rng) -> InjectionPlan {
        let (func, inst, count) = self.sites[self.dist.sample(rng)];
        InjectionPlan {
            id,
            func,
            inst,
            occurrence: rng.gen_range(1..=count),
            bit: rng.gen_range(0..64),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OutcomeClass {
    Benign,
    Crash,
    Sdc,
    Hang,
}

impl OutcomeClass {
    pub const ALL: [OutcomeClass; 4] = [
        OutcomeClass::Benign,
        OutcomeClass::Crash,
        OutcomeClass::Sdc,
        OutcomeClass::Hang,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeClass::Benign => "Benign",
            OutcomeClass::Crash => "Crash",
            OutcomeClass::Sdc => "SDC",
            OutcomeClass::Hang => "Hang",
        }
    }
}

impl fmt::Display for OutcomeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Crash latency buckets, in dynamic instructions.
pub const BUCKETS: [&str; 4] = ["<=10", "11-50", "51-400", ">400"];

pub fn bucket(latency: u64) -> usize {
    match latency {
        0..=10 => 0,
        11..=50 => 1,
        51..=400 => 2,
        _ => 3,
    }
}

/// How one run ended relative to the golden run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub class: OutcomeClass,
    /// Kind of the first trap, recovered or not.
    pub trap: Option<TrapKind>,
    /// Instructions from the flip to the first trap.
    pub latency: Option<u64>,
    /// The first trap was an invalid access and the run went on to finish.
    pub recovered: bool,
}

impl Outcome {
    pub fn bucket(&self) -> Option<usize> {
        self.latency.map(bucket)
    }
}

pub fn classify(run: &RunResult, golden: &RunResult) -> Outcome {
    debug_assert_eq!(golden.status, Status::Completed);
    let first = run.first_trap();
    let class = match run.status {
        Status::Trapped(_) => OutcomeClass::Crash,
        Status::HangBudgetExceeded => OutcomeClass::Hang,
        Status::Completed if run.output == golden.output => OutcomeClass::Benign,
        Status::Completed => OutcomeClass::Sdc,
    };
    let latency = match (first, run.injected) {
        (Some(t), Some(i)) => Some(t.dyn_count.saturating_sub(i.dyn_count)),
        _ => None,
    };
    Outcome {
        class,
        trap: first.map(|t| t.kind),
        latency,
        recovered: first.is_some_and(|t| t.kind == TrapKind::InvalidAccess)
            && run.status == Status::Completed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::{InjectRecord, Output, TrapRecord};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flips() {
        assert_eq!(flip_bit(0, 0), 1);
        assert_eq!(flip_bit(flip_bit(0xdead_beef, 17), 17), 0xdead_beef);
        assert_eq!(f64::from_bits(flip_bit(2.5f64.to_bits(), 63)), -2.5);
    }

    #[test]
    fn sampling_is_deterministic_and_weighted() {
        let a = (FuncId(0), InstId(0), 1);
        let s = PlanSampler::new(vec![a]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..20 {
            let p = s.sample(i, 0, &mut rng);
            assert_eq!((p.inst, p.occurrence), (InstId(0), 1));
            assert!(p.bit < 64);
        }
        let s = PlanSampler::new(vec![(FuncId(0), InstId(0), 75), (FuncId(0), InstId(1), 25)]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10_000).map(|i| s.sample(i, seed, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        let plans = draw(9);
        let a = plans.iter().filter(|p| p.inst == InstId(0)).count() as f64;
        // Chi-square goodness of fit with one degree of freedom.
        let (ea, eb) = (7500.0, 2500.0);
        let chi2 = (a - ea).powi(2) / ea + ((10_000.0 - a) - eb).powi(2) / eb;
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let critical = ChiSquared::new(1.0).unwrap().inverse_cdf(0.99);
        assert!(chi2 < critical, "chi2 = {chi2}, critical = {critical}");
        assert!((a / 10_000.0 - 0.75).abs() <= 0.02);
        assert!(plans.iter().all(|p| p.occurrence >= 1 && p.occurrence <= if p.inst == InstId(0) { 75 } else { 25 }));
    }

    fn result(status: Status, ret: u64, inj: Option<u64>, trap: Option<u64>) -> RunResult {
        let trap = trap.map(|d| TrapRecord {
            kind: TrapKind::InvalidAccess,
            func: FuncId(0),
            inst: InstId(0),
            address: Some(0),
            dyn_count: d,
        });
        RunResult {
            status: match (status, trap) {
                (Status::Trapped(_), Some(t)) => Status::Trapped(t),
                (s, _) => s,
            },
            output: Output { ret: Some(ret), globals: vec![] },
            dyn_count: 0,
            traps: trap.into_iter().collect(),
            injected: inj.map(|d| InjectRecord { dyn_count: d, old: 0, new: 1 }),
            trace: vec![],
            profile: None,
        }
    }

    #[test]
    fn classification() {
        let golden = result(Status::Completed, 1, None, None);
        let benign = classify(&result(Status::Completed, 1, Some(5), None), &golden);
        assert_eq!(benign.class, OutcomeClass::Benign);
        assert_eq!(classify(&result(Status::Completed, 2, Some(5), None), &golden).class, OutcomeClass::Sdc);
        assert_eq!(classify(&result(Status::HangBudgetExceeded, 2, Some(5), None), &golden).class, OutcomeClass::Hang);
        let crash = classify(
            &result(Status::Trapped(TrapRecord { kind: TrapKind::InvalidAccess, func: FuncId(0), inst: InstId(0), address: None, dyn_count: 0 }), 1, Some(1000), Some(1007)),
            &golden,
        );
        assert_eq!(crash.class, OutcomeClass::Crash);
        assert_eq!(crash.latency, Some(7));
        assert_eq!(crash.bucket(), Some(0));
        assert!(!crash.recovered);
        let recovered = classify(&result(Status::Completed, 1, Some(10), Some(70)), &golden);
        assert_eq!(recovered.class, OutcomeClass::Benign);
        assert!(recovered.recovered);
        assert_eq!(recovered.bucket(), Some(2));
        assert_eq!([bucket(10), bucket(11), bucket(50), bucket(51), bucket(400), bucket(401)], [0, 1, 1, 2, 2, 3]);
    }
}
