//! Cross-module invariants.

use num_rational::BigRational;
use proptest::prelude::*;

use planforge_core::sampler::project;
use planforge_core::shardstore::write_shards;
use planforge_core::{Cursor, SamplerState, ShardReader, TaskType};

fn ratio(n: u32, d: u32) -> BigRational {
    BigRational::new(n.into(), d.into())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_feasible(raw in prop::collection::vec(1u32..1000, 2..7), lo_n in 0u32..10, hi_n in 40u32..101) {
        let k = raw.len() as u32;
        let lo = ratio(lo_n, 100 * k);
        let hi = ratio(hi_n, 100);
        prop_assume!(hi.clone() * BigRational::from_integer(k.into()) >= BigRational::from_integer(1.into()));
        let r: Vec<BigRational> = raw.iter().map(|&x| BigRational::from_integer(x.into())).collect();
        let w = project(&r, &lo, &hi);
        let sum: BigRational = w.iter().sum();
        prop_assert_eq!(sum, BigRational::from_integer(1.into()));
        for x in &w {
            prop_assert!(*x >= lo && *x <= hi);
        }
        // order preserving
        for i in 0..w.len() {
            for j in 0..w.len() {
                if raw[i] < raw[j] {
                    prop_assert!(w[i] <= w[j]);
                }
            }
        }
    }

    #[test]
    fn sampler_replays_from_serialized_state(seed in any::<u64>(), split in 1usize..200) {
        let tasks = [TaskType::PlanningQa, TaskType::EgoViewOpen, TaskType::VisualGroundingPoint];
        let mut s = SamplerState::init(&tasks, 0.05, 0.8, seed).unwrap();
        let mut draws = Vec::new();
        let mut saved = None;
        for i in 0..200 {
            if i == split {
                saved = Some(serde_json::to_string(&s).unwrap());
            }
            let (t, next) = s.draw();
            draws.push(t);
            s = next;
        }
        let mut r: SamplerState = serde_json::from_str(&saved.unwrap()).unwrap();
        for want in &draws[split..] {
            let (t, next) = r.draw();
            prop_assert_eq!(t, *want);
            r = next;
        }
    }

    #[test]
    fn reading_from_any_cursor_yields_the_suffix(n in 1u64..300, shard_size in 1usize..40, skip in 0usize..300) {
        let dir = tempfile::tempdir().unwrap();
        write_shards(0..n, shard_size, dir.path(), 0).unwrap();
        let mut reader = ShardReader::<u64>::open(dir.path()).unwrap();
        let all: Vec<(u64, Cursor)> = reader.epoch_from(Cursor::default()).map(|r| r.unwrap()).collect();
        prop_assert_eq!(all.iter().map(|x| x.0).collect::<Vec<_>>(), (0..n).collect::<Vec<_>>());
        let skip = skip % n as usize;
        let from = all[skip].1;
        let tail: Vec<u64> = reader.epoch_from(from).map(|r| r.unwrap().0).collect();
        prop_assert_eq!(tail, ((skip as u64 + 1)..n).collect::<Vec<_>>());
    }
}
