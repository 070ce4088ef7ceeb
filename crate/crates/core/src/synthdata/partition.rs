use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Subset sizes: `train1`/`eval1`/`test1` split the records, and
/// `train2`/`eval2`/`test2` further split `test1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub train1: usize,
    pub eval1: usize,
    pub test1: usize,
    pub train2: usize,
    pub eval2: usize,
    pub test2: usize,
    pub rng_seed: u64,
}

impl PartitionSpec {
    /// 400/100/1000 with 400/100/500 nested inside the 1000.
    pub fn full_scale(rng_seed: u64) -> Self {
        Self {
            train1: 400,
            eval1: 100,
            test1: 1000,
            train2: 400,
            eval2: 100,
            test2: 500,
            rng_seed,
        }
    }

    pub fn desk_scale(rng_seed: u64) -> Self {
        Self {
            train1: 16,
            eval1: 4,
            test1: 40,
            train2: 16,
            eval2: 4,
            test2: 20,
            rng_seed,
        }
    }

    pub fn required(&self) -> usize {
        self.train1 + self.eval1 + self.test1
    }

    pub fn validate(&self) -> Result<()> {
        let nested = self.train2 + self.eval2 + self.test2;
        if nested > self.test1 {
            return Err(Error::Config(format!(
                "partition: train2 + eval2 + test2 = {nested} exceeds test1 = {}",
                self.test1
            )));
        }
        Ok(())
    }
}

/// Most specific subset a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train1,
    Eval1,
    Train2,
    Eval2,
    Test2,
    /// In `test1` but in none of the nested subsets.
    Test1,
    /// Beyond the counts the partition asks for.
    Unused,
}

impl Subset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::Train1 => "train1",
            Subset::Eval1 => "eval1",
            Subset::Train2 => "train2",
            Subset::Eval2 => "eval2",
            Subset::Test2 => "test2",
            Subset::Test1 => "test1",
            Subset::Unused => "unused",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train1: Vec<String>,
    pub eval1: Vec<String>,
    /// Superset of `train2`, `eval2` and `test2`.
    pub test1: Vec<String>,
    pub train2: Vec<String>,
    pub eval2: Vec<String>,
    pub test2: Vec<String>,
    pub unused: Vec<String>,
}

impl Partition {
    /// Ids of a named split (`train1`, `eval1`, `test1`, `train2`, `eval2`, `test2`).
    pub fn split(&self, name: &str) -> Option<&[String]> {
        Some(match name {
            "train1" => &self.train1,
            "eval1" => &self.eval1,
            "test1" => &self.test1,
            "train2" => &self.train2,
            "eval2" => &self.eval2,
            "test2" => &self.test2,
            _ => return None,
        })
    }

    pub fn assignment(&self) -> BTreeMap<String, Subset> {
        let mut map = BTreeMap::new();
        for id in &self.test1 {
            map.insert(id.clone(), Subset::Test1);
        }
        let groups = [
            (&self.train1, Subset::Train1),
            (&self.eval1, Subset::Eval1),
            (&self.train2, Subset::Train2),
            (&self.eval2, Subset::Eval2),
            (&self.test2, Subset::Test2),
            (&self.unused, Subset::Unused),
        ];
        for (ids, subset) in groups {
            for id in ids {
                map.insert(id.clone(), subset);
            }
        }
        map
    }
}

/// Deterministically shuffles `records` (after sorting) and slices it into
/// the subsets of `spec`.
pub fn partition(records: &[String], spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    if records.len() < spec.required() {
        return Err(Error::Partition {
            required: spec.required(),
            available: records.len(),
        });
    }
    let mut ids = records.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != records.len() {
        return Err(Error::Validation("duplicate record ids".into()));
    }
    Rng::new(spec.rng_seed).shuffle(&mut ids);

    let mut rest = ids.as_slice();
    let mut take = |n: usize| {
        let (head, tail) = rest.split_at(n);
        rest = tail;
        head.to_vec()
    };
    let train1 = take(spec.train1);
    let eval1 = take(spec.eval1);
    let test1 = take(spec.test1);
    let unused = take(records.len() - spec.required());

    let (train2, tail) = test1.split_at(spec.train2);
    let (eval2, tail) = tail.split_at(spec.eval2);
    let test2 = &tail[..spec.test2];

    Ok(Partition {
        train2: train2.to_vec(),
        eval2: eval2.to_vec(),
        test2: test2.to_vec(),
        train1,
        eval1,
        test1,
        unused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i:05}")).collect()
    }

    #[test]
    fn full_scale_sizes() {
        let p = partition(&ids(1500), &PartitionSpec::full_scale(1)).unwrap();
        assert_eq!(
            (p.train1.len(), p.eval1.len(), p.test1.len()),
            (400, 100, 1000)
        );
        assert_eq!(
            (p.train2.len(), p.eval2.len(), p.test2.len()),
            (400, 100, 500)
        );
        let test1: BTreeSet<_> = p.test1.iter().collect();
        for id in p.train2.iter().chain(&p.eval2).chain(&p.test2) {
            assert!(test1.contains(id));
        }
    }

    #[test]
    fn desk_scale_structure() {
        let spec = PartitionSpec {
            train1: 4,
            eval1: 1,
            test1: 10,
            train2: 4,
            eval2: 1,
            test2: 5,
            rng_seed: 3,
        };
        let p = partition(&ids(15), &spec).unwrap();
        let assignment = p.assignment();
        assert_eq!(assignment.len(), 15);
        let count = |s| assignment.values().filter(|&&v| v == s).count();
        assert_eq!(count(Subset::Train1), 4);
        assert_eq!(count(Subset::Eval1), 1);
        assert_eq!(count(Subset::Train2), 4);
        assert_eq!(count(Subset::Eval2), 1);
        assert_eq!(count(Subset::Test2), 5);
        assert_eq!(count(Subset::Test1), 0);
    }

    #[test]
    fn insufficient_records() {
        let spec = PartitionSpec {
            train1: 4,
            eval1: 1,
            test1: 10,
            train2: 4,
            eval2: 1,
            test2: 5,
            rng_seed: 3,
        };
        match partition(&ids(10), &spec) {
            Err(Error::Partition {
                required,
                available,
            }) => assert_eq!((required, available), (15, 10)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let spec = PartitionSpec::desk_scale(9);
        let a = partition(&ids(70), &spec).unwrap();
        let b = partition(&ids(70), &spec).unwrap();
        assert_eq!(a, b);
        let top: Vec<&String> = a
            .train1
            .iter()
            .chain(&a.eval1)
            .chain(&a.test1)
            .chain(&a.unused)
            .collect();
        let set: BTreeSet<_> = top.iter().collect();
        assert_eq!(set.len(), 70);
        assert_eq!(top.len(), 70);
    }
}
