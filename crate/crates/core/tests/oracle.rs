//! Property tests against an independent exact-arithmetic AP oracle.

use std::collections::{BTreeMap, BTreeSet};

use arena_core::config::{ListFilter, MapParams, ObjectiveSense, RelevanceUniverse};
use arena_core::instance::{best_known, evaluate_instance_log, InstanceLog, InstanceRow, InstanceStatus};
use arena_core::ranking::{average_precision, evaluate_map, GroundTruth, Interaction, RankingSubmission, Split};
use proptest::prelude::*;

/// Reduced fraction over i128.
#[derive(Clone, Copy, Debug)]
struct Frac(i128, i128);

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 { a.abs() } else { gcd(b, a % b) }
}

impl Frac {
    fn new(n: i128, d: i128) -> Self {
        let g = gcd(n, d).max(1);
        Frac(n / g, d / g)
    }
    fn add(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn to_f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// Brute force: for every rank position, recount hits in the prefix from
/// scratch.
fn oracle_ap(ranked: &[u32], relevant: &BTreeSet<u32>, k: usize) -> Frac {
    let cutoff = k.min(ranked.len());
    let mut total = Frac(0, 1);
    for r in 1..=cutoff {
        if relevant.contains(&ranked[r - 1]) {
            let hits = (0..r).filter(|&i| relevant.contains(&ranked[i])).count() as i128;
            total = total.add(Frac::new(hits, r as i128));
        }
    }
    let n = k.min(relevant.len()) as i128;
    Frac::new(total.0, total.1 * n)
}

fn ranked_and_relevant() -> impl Strategy<Value = (Vec<u32>, BTreeSet<u32>, u32)> {
    (
        prop::sample::subsequence((0..50u32).collect::<Vec<_>>(), 0..=20).prop_shuffle(),
        prop::collection::btree_set(0..50u32, 1..15),
        prop::sample::select(vec![1u32, 3, 10]),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn ap_matches_rational_oracle((ranked, relevant, k) in ranked_and_relevant()) {
        let got = average_precision(&ranked, &relevant, k).unwrap();
        let want = oracle_ap(&ranked, &relevant, k as usize).to_f64();
        prop_assert!((got - want).abs() <= 1e-12, "got {got} want {want}");
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn irrelevant_tail_permutation_is_invariant(
        (ranked, relevant, k) in ranked_and_relevant(),
        seed in any::<u64>(),
    ) {
        let last_hit = ranked.iter().rposition(|i| relevant.contains(i));
        let split = last_hit.map_or(0, |p| p + 1);
        let mut permuted = ranked.clone();
        let tail = &mut permuted[split..];
        // deterministic shuffle from seed
        let mut s = seed;
        for i in (1..tail.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            tail.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(
            average_precision(&ranked, &relevant, k).unwrap(),
            average_precision(&permuted, &relevant, k).unwrap()
        );
    }

    #[test]
    fn relevant_at_rank_one_never_decreases((ranked, relevant, k) in ranked_and_relevant()) {
        let missing = relevant.iter().find(|i| !ranked.contains(i)).copied();
        if let Some(item) = missing {
            let mut boosted = vec![item];
            boosted.extend(&ranked);
            let before = average_precision(&ranked, &relevant, k).unwrap();
            let after = average_precision(&boosted, &relevant, k).unwrap();
            prop_assert!(after >= before - 1e-15, "{after} < {before}");
        }
    }

    #[test]
    fn perfect_prefix_scores_one((relevant, k) in (prop::collection::btree_set(0..50u32, 1..15), 1u32..12)) {
        let ranked: Vec<u32> = relevant.iter().copied().collect();
        prop_assert_eq!(average_precision(&ranked, &relevant, k).unwrap(), 1.0);
    }

    #[test]
    fn map_bounds_and_oracle(fixture in map_fixture()) {
        let (gt_rows, lists, k) = fixture;
        let gt = GroundTruth::from_interactions(gt_rows.clone());
        let sub = RankingSubmission::new(lists.clone()).unwrap();
        let params = MapParams { k, relevance_universe: RelevanceUniverse::AllInteractions, list_filter: ListFilter::None };
        let out = evaluate_map(&sub, &gt, &params).unwrap();
        prop_assert!((0.0..=1.0).contains(&out.map));

        // oracle mean over users with positives
        let mut positives: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
        for r in &gt_rows {
            if r.positive {
                positives.entry(r.user.clone()).or_default().insert(r.item[1..].parse().unwrap());
            }
        }
        let listed: BTreeMap<String, Vec<u32>> = lists
            .iter()
            .map(|(u, items)| (u.clone(), items.iter().map(|i| i[1..].parse().unwrap()).collect()))
            .collect();
        let mut sum = Frac(0, 1);
        for (user, rel) in &positives {
            let ranked = listed.get(user).cloned().unwrap_or_default();
            sum = sum.add(oracle_ap(&ranked, rel, k as usize));
        }
        let want = if positives.is_empty() { 0.0 } else { Frac::new(sum.0, sum.1 * positives.len() as i128).to_f64() };
        prop_assert!((out.map - want).abs() <= 1e-12, "got {} want {}", out.map, want);
    }

    #[test]
    fn solving_one_more_instance_always_raises_score(fx in instance_fixture()) {
        let (manifest, rows, unsolved_idx, objective) = fx;
        let before = InstanceLog::new(rows.clone()).unwrap();
        let mut improved = rows;
        let idx = unsolved_idx % improved.len();
        if improved[idx].status == InstanceStatus::Solved {
            return Ok(());
        }
        improved[idx].status = InstanceStatus::Solved;
        improved[idx].objective = Some(objective);
        let after = InstanceLog::new(improved).unwrap();
        let best = best_known([&before, &after], &manifest);
        let s0 = evaluate_instance_log(&before, &manifest, &best).unwrap().primary_score;
        let s1 = evaluate_instance_log(&after, &manifest, &best).unwrap().primary_score;
        prop_assert!(s1 > s0, "{s1} <= {s0}");
    }
}

type MapFixture = (Vec<Interaction>, Vec<(String, Vec<String>)>, u32);

fn map_fixture() -> impl Strategy<Value = MapFixture> {
    let users = 1usize..=20;
    (users, prop::sample::select(vec![1u32, 3, 10])).prop_flat_map(|(n_users, k)| {
        let per_user = (
            prop::collection::vec((0..50u32, any::<bool>(), any::<bool>()), 1..8),
            prop::option::of(
                prop::sample::subsequence((0..50u32).collect::<Vec<_>>(), 0..=k as usize)
                    .prop_shuffle(),
            ),
        );
        prop::collection::vec(per_user, n_users).prop_map(move |users| {
            let mut gt = Vec::new();
            let mut lists = Vec::new();
            for (u, (inter, list)) in users.into_iter().enumerate() {
                let user = format!("u{u}");
                for (item, positive, test) in inter {
                    gt.push(Interaction {
                        user: user.clone(),
                        item: format!("i{item}"),
                        positive,
                        split: if test { Split::Test } else { Split::Train },
                    });
                }
                if let Some(list) = list {
                    lists.push((user, list.into_iter().map(|i| format!("i{i}")).collect()));
                }
            }
            (gt, lists, k)
        })
    })
}

type InstanceFixture = (BTreeMap<String, ObjectiveSense>, Vec<InstanceRow>, usize, f64);

fn instance_fixture() -> impl Strategy<Value = InstanceFixture> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(
                (any::<bool>(), prop::option::of(-1e6..1e6f64), 0.0..1e4f64),
                n,
            ),
            any::<usize>(),
            -1e6..1e6f64,
        )
            .prop_map(move |(specs, idx, objective)| {
                let mut manifest = BTreeMap::new();
                let rows = specs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (max, obj, rt))| {
                        let name = format!("inst{i}");
                        manifest.insert(
                            name.clone(),
                            if max { ObjectiveSense::Max } else { ObjectiveSense::Min },
                        );
                        InstanceRow {
                            instance: name,
                            status: if obj.is_some() { InstanceStatus::Solved } else { InstanceStatus::Unsolved },
                            objective: obj,
                            runtime_s: rt,
                        }
                    })
                    .collect();
                (manifest, rows, idx, objective)
            })
    })
}
