use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 5;

/// What one utterance contributes to fold assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitItem {
    pub id: String,
    pub label: usize,
    pub session: Option<String>,
    pub speaker: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Sessions if every item has one, else speakers, else stratified random.
    Auto,
    Session,
    Speaker,
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold: usize,
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

/// Assigns every item to one of five groups and returns the group index per item.
pub fn assign_groups(items: &[SplitItem], grouping: Grouping, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = |f: fn(&SplitItem) -> &Option<String>| -> Option<Vec<String>> {
        items.iter().map(|it| f(it).clone()).collect()
    };
    let keys = match grouping {
        Grouping::Auto => key(|i| &i.session).or_else(|| key(|i| &i.speaker)),
        Grouping::Session => Some(key(|i| &i.session).ok_or_else(|| missing("session"))?),
        Grouping::Speaker => Some(key(|i| &i.speaker).ok_or_else(|| missing("speaker"))?),
        Grouping::Random => None,
    };
    match keys {
        Some(keys) => {
            let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
            for k in &keys {
                *sizes.entry(k.as_str()).or_default() += 1;
            }
            if sizes.len() < NUM_FOLDS {
                return Err(Error::validation(format!(
                    "{} distinct groups ({}); 5-fold splitting needs at least 5, use random grouping (--grouping random)",
                    sizes.len(),
                    sizes.keys().cloned().collect::<Vec<_>>().join(", ")
                )));
            }
            let bucket = merge_into_folds(&sizes, &mut rng);
            Ok(keys.iter().map(|k| bucket[k.as_str()]).collect())
        }
        None => {
            if items.len() < NUM_FOLDS {
                return Err(Error::validation(format!("{} utterances cannot fill 5 folds", items.len())));
            }
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, it) in items.iter().enumerate() {
                by_class.entry(it.label).or_default().push(i);
            }
            let mut out = vec![0; items.len()];
            let mut next = 0;
            for idx in by_class.values_mut() {
                idx.shuffle(&mut rng);
                for &i in idx.iter() {
                    out[i] = next % NUM_FOLDS;
                    next += 1;
                }
            }
            Ok(out)
        }
    }
}

fn missing(what: &str) -> Error {
    Error::validation(format!("{what} grouping requested but some records have no {what}"))
}

/// Exactly five groups map to themselves in sorted order; more are merged by
/// placing the largest remaining group into the currently smallest fold.
fn merge_into_folds<'a>(sizes: &BTreeMap<&'a str, usize>, rng: &mut ChaCha8Rng) -> BTreeMap<&'a str, usize> {
    if sizes.len() == NUM_FOLDS {
        return sizes.keys().enumerate().map(|(i, &k)| (k, i)).collect();
    }
    let mut groups: Vec<(&str, usize)> = sizes.iter().map(|(&k, &v)| (k, v)).collect();
    groups.shuffle(rng);
    groups.sort_by_key(|g| std::cmp::Reverse(g.1));
    let mut load = [0usize; NUM_FOLDS];
    let mut out = BTreeMap::new();
    for (k, n) in groups {
        let f = (0..NUM_FOLDS).min_by_key(|&f| (load[f], f)).expect("five folds");
        load[f] += n;
        out.insert(k, f);
    }
    out
}

/// Fold `i` trains on groups `i, i+1, i+2`, develops on `i+3` and tests on
/// `i+4` (mod 5).
pub fn kfold_split(items: &[SplitItem], grouping: Grouping, seed: u64) -> Result<Vec<FoldPlan>> {
    let groups = assign_groups(items, grouping, seed)?;
    Ok((0..NUM_FOLDS)
        .map(|i| {
            let pick = |offsets: &[usize]| -> Vec<String> {
                let wanted: Vec<usize> = offsets.iter().map(|o| (i + o) % NUM_FOLDS).collect();
                items
                    .iter()
                    .zip(&groups)
                    .filter(|(_, g)| wanted.contains(g))
                    .map(|(it, _)| it.id.clone())
                    .collect()
            };
            FoldPlan { fold: i, train: pick(&[0, 1, 2]), dev: pick(&[3]), test: pick(&[4]) }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn items(n: usize, sessions: Option<usize>) -> Vec<SplitItem> {
        (0..n)
            .map(|i| SplitItem {
                id: format!("u{i:03}"),
                label: i % 4,
                session: sessions.map(|s| format!("Ses{:02}", i % s + 1)),
                speaker: None,
            })
            .collect()
    }

    #[test]
    fn equal_groups_give_three_one_one() {
        let plans = kfold_split(&items(50, Some(5)), Grouping::Auto, 0).unwrap();
        for p in &plans {
            assert_eq!((p.train.len(), p.dev.len(), p.test.len()), (30, 10, 10));
        }
    }

    #[test]
    fn rotation_uses_consecutive_groups() {
        let its = items(25, Some(5));
        let groups = assign_groups(&its, Grouping::Session, 0).unwrap();
        let plans = kfold_split(&its, Grouping::Session, 0).unwrap();
        let group_of = |id: &str| groups[its.iter().position(|x| x.id == id).unwrap()];
        for p in &plans {
            assert!(p.test.iter().all(|id| group_of(id) == (p.fold + 4) % 5));
            assert!(p.dev.iter().all(|id| group_of(id) == (p.fold + 3) % 5));
        }
    }

    #[test]
    fn too_few_groups_suggests_random() {
        let err = kfold_split(&items(20, Some(4)), Grouping::Auto, 0).unwrap_err();
        assert!(matches!(&err, Error::Validation(m) if m.contains("random")), "{err}");
        assert!(kfold_split(&items(20, Some(4)), Grouping::Random, 0).is_ok());
        assert!(kfold_split(&items(20, None), Grouping::Session, 0).is_err());
    }

    #[test]
    fn speaker_fallback_when_sessions_missing() {
        let mut its = items(30, None);
        for (i, it) in its.iter_mut().enumerate() {
            it.speaker = Some(format!("spk{}", i % 6));
        }
        let groups = assign_groups(&its, Grouping::Auto, 1).unwrap();
        for a in 0..30 {
            for b in 0..30 {
                if its[a].speaker == its[b].speaker {
                    assert_eq!(groups[a], groups[b]);
                }
            }
        }
    }

    #[test]
    fn random_grouping_is_stratified() {
        let groups = assign_groups(&items(40, None), Grouping::Random, 3).unwrap();
        for g in 0..5 {
            for c in 0..4 {
                let n = (0..40).filter(|&i| groups[i] == g && i % 4 == c).count();
                assert_eq!(n, 2);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn folds_partition_and_rotate(n in 5usize..120, sessions in prop::option::of(5usize..9), seed in 0u64..1000) {
            let its = items(n, sessions.map(|s| s.min(n)));
            let plans = kfold_split(&its, Grouping::Auto, seed).unwrap();
            prop_assert_eq!(plans.clone(), kfold_split(&its, Grouping::Auto, seed).unwrap());
            let mut tested = Vec::new();
            for p in &plans {
                let (tr, dv, te): (HashSet<_>, HashSet<_>, HashSet<_>) =
                    (p.train.iter().collect(), p.dev.iter().collect(), p.test.iter().collect());
                prop_assert!(tr.is_disjoint(&dv) && tr.is_disjoint(&te) && dv.is_disjoint(&te));
                prop_assert_eq!(tr.len() + dv.len() + te.len(), n);
                tested.extend(p.test.iter().cloned());
            }
            tested.sort();
            let mut all: Vec<String> = its.iter().map(|i| i.id.clone()).collect();
            all.sort();
            prop_assert_eq!(tested, all);
        }
    }
}
