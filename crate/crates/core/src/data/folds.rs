use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }
}

/// Disjoint train / validation / test partition of a cohort.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl FoldPlan {
    pub fn ids(&self, role: Role) -> &[String] {
        match role {
            Role::Train => &self.train,
            Role::Val => &self.val,
            Role::Test => &self.test,
        }
    }

    /// Fails if any id appears in more than one role.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::invalid(
                    "fold_plan",
                    format!("fold {}: subject {id} appears in more than one role", self.fold),
                ));
            }
        }
        Ok(())
    }
}

/// Shuffles `ids` with `seed`, cuts contiguous test blocks of `n_test`,
/// then draws `n_val` validation ids per fold from the remainder.
///
/// Train and validation lists keep the input order of `ids`.
pub fn plan_folds(ids: &[String], n_folds: usize, n_test: usize, n_val: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    let n = ids.len();
    if n_folds == 0 || n_test == 0 || n_folds.checked_mul(n_test) != Some(n) {
        return Err(Error::invalid(
            "plan_folds",
            format!("{n_folds} folds of {n_test} test subjects do not partition {n} subjects"),
        ));
    }
    if n_val >= n - n_test {
        return Err(Error::invalid(
            "plan_folds",
            format!("{n_val} validation subjects leave no training data out of {}", n - n_test),
        ));
    }
    if ids.iter().collect::<HashSet<_>>().len() != n {
        return Err(Error::invalid("plan_folds", "subject ids are not unique"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut plans = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let test_idx: HashSet<usize> = order[fold * n_test..(fold + 1) * n_test].iter().copied().collect();
        let mut rest: Vec<usize> = (0..n).filter(|i| !test_idx.contains(i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fold as u64 + 1);
        rest.shuffle(&mut rng);
        let val_idx: HashSet<usize> = rest[..n_val].iter().copied().collect();
        let pick = |keep: &dyn Fn(usize) -> bool| -> Vec<String> {
            (0..n).filter(|&i| keep(i)).map(|i| ids[i].clone()).collect()
        };
        plans.push(FoldPlan {
            fold,
            train: pick(&|i| !test_idx.contains(&i) && !val_idx.contains(&i)),
            val: pick(&|i| val_idx.contains(&i)),
            test: order[fold * n_test..(fold + 1) * n_test]
                .iter()
                .map(|&i| ids[i].clone())
                .collect(),
        });
    }
    Ok(plans)
}

/// One `fold,role,subject_id` line per assignment.
pub fn render_fold_plans(plans: &[FoldPlan]) -> String {
    let mut out = String::new();
    for p in plans {
        for role in [Role::Train, Role::Val, Role::Test] {
            for id in p.ids(role) {
                let _ = writeln!(out, "{},{},{id}", p.fold, role.as_str());
            }
        }
    }
    out
}

pub fn parse_fold_plans(text: &str) -> Result<Vec<FoldPlan>> {
    let mut plans: Vec<FoldPlan> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::invalid("parse_fold_plans", format!("line {}: {msg}", lineno + 1));
        let mut parts = line.splitn(3, ',');
        let (Some(fold), Some(role), Some(id)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected fold,role,subject_id"));
        };
        let fold: usize = fold.parse().map_err(|_| bad("fold is not an integer"))?;
        while plans.len() <= fold {
            plans.push(FoldPlan {
                fold: plans.len(),
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            });
        }
        let list = match role {
            "train" => &mut plans[fold].train,
            "val" => &mut plans[fold].val,
            "test" => &mut plans[fold].test,
            other => return Err(bad(&format!("unknown role {other:?}"))),
        };
        list.push(id.to_string());
    }
    for p in &plans {
        p.check_disjoint()?;
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn sixty_subjects_six_folds() {
        let plans = plan_folds(&ids(60), 6, 10, 5, 0).unwrap();
        let mut tested = HashSet::new();
        for p in &plans {
            assert_eq!((p.train.len(), p.val.len(), p.test.len()), (45, 5, 10));
            p.check_disjoint().unwrap();
            for id in &p.test {
                assert!(tested.insert(id.clone()));
            }
        }
        assert_eq!(tested.len(), 60);
    }

    #[test]
    fn twelve_subjects_three_folds() {
        let plans = plan_folds(&ids(12), 3, 4, 2, 9).unwrap();
        assert!(plans.iter().all(|p| p.train.len() == 6));
    }

    #[test]
    fn seeded_and_seed_sensitive() {
        let a = plan_folds(&ids(30), 3, 10, 4, 1).unwrap();
        assert_eq!(a, plan_folds(&ids(30), 3, 10, 4, 1).unwrap());
        assert_ne!(a[0].test, plan_folds(&ids(30), 3, 10, 4, 2).unwrap()[0].test);
    }

    #[test]
    fn preconditions() {
        assert!(plan_folds(&ids(10), 3, 3, 1, 0).is_err());
        assert!(plan_folds(&ids(12), 3, 4, 8, 0).is_err());
        assert!(plan_folds(&ids(12), 3, 4, 7, 0).is_ok());
        let mut dup = ids(4);
        dup[1] = dup[0].clone();
        assert!(plan_folds(&dup, 2, 2, 1, 0).is_err());
    }

    #[test]
    fn text_round_trip() {
        let plans = plan_folds(&ids(12), 3, 4, 2, 5).unwrap();
        let text = render_fold_plans(&plans);
        assert_eq!(text.lines().count(), 36);
        assert!(text.lines().all(|l| l.split(',').count() == 3));
        assert_eq!(parse_fold_plans(&text).unwrap(), plans);
        assert!(parse_fold_plans("0,train,a\n0,test,a\n").is_err());
        assert!(parse_fold_plans("0,holdout,a\n").is_err());
    }
}
