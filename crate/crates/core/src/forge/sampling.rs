use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::seed;

use super::manifest::Split;

/// Frames of one source sequence (video or identity).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGroup<T> {
    pub fake: bool,
    pub frames: Vec<T>,
}

/// Draws `min(quota, |group|)` frames without replacement from every group,
/// using `real_quota` for real groups and `fake_quota` for fake ones.
///
/// Each group draws from its own stream keyed by `(rng_seed, group_id)`, and
/// selected frames keep their original order. Output is ordered by group id.
pub fn quota_sample<T: Clone>(
    groups: &BTreeMap<String, FrameGroup<T>>,
    real_quota: usize,
    fake_quota: usize,
    rng_seed: u64,
) -> Vec<(String, T)> {
    let mut out = Vec::new();
    for (id, group) in groups {
        let quota = if group.fake { fake_quota } else { real_quota };
        let n = group.frames.len();
        if quota >= n {
            out.extend(group.frames.iter().map(|f| (id.clone(), f.clone())));
            continue;
        }
        let mut rng = seed::rng_for(rng_seed, id);
        let mut picked = sample(&mut rng, n, quota).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| (id.clone(), group.frames[i].clone())));
    }
    out
}

/// First `n_train` → train, last `n_test` → test, everything between → val.
pub fn split_by_rank(n_samples: usize, n_train: usize, n_test: usize) -> Result<Vec<Split>> {
    if n_train.checked_add(n_test).map_or(true, |t| t > n_samples) {
        return Err(Error::Validation(format!(
            "train {n_train} + test {n_test} exceeds {n_samples} samples"
        )));
    }
    Ok((0..n_samples)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i >= n_samples - n_test {
                Split::Test
            } else {
                Split::Val
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(sizes: &[(usize, bool)]) -> BTreeMap<String, FrameGroup<usize>> {
        sizes
            .iter()
            .enumerate()
            .map(|(g, &(n, fake))| (format!("g{g:04}"), FrameGroup { fake, frames: (0..n).collect() }))
            .collect()
    }

    #[test]
    fn per_group_counts() {
        let g = groups(&[(10, false), (50, false), (100, false)]);
        let picked = quota_sample(&g, 30, 0, 1);
        let count = |id: &str| picked.iter().filter(|(g, _)| g == id).count();
        assert_eq!((count("g0000"), count("g0001"), count("g0002")), (10, 30, 30));
        assert!(quota_sample(&g, 0, 0, 1).is_empty());
    }

    #[test]
    fn real_and_fake_quotas_apply_separately() {
        let g = groups(&[(100, false), (100, true)]);
        let picked = quota_sample(&g, 60, 30, 5);
        assert_eq!(picked.iter().filter(|(g, _)| g == "g0000").count(), 60);
        assert_eq!(picked.iter().filter(|(g, _)| g == "g0001").count(), 30);
    }

    #[test]
    fn thousand_groups_of_sixty() {
        let g = groups(&vec![(64, false); 1000]);
        assert_eq!(quota_sample(&g, 60, 30, 2).len(), 60_000);
    }

    #[test]
    fn selection_is_seeded_and_without_replacement() {
        let g = groups(&[(200, true)]);
        let a = quota_sample(&g, 0, 30, 9);
        assert_eq!(a, quota_sample(&g, 0, 30, 9));
        assert_ne!(a, quota_sample(&g, 0, 30, 10));
        let mut frames: Vec<usize> = a.iter().map(|(_, f)| *f).collect();
        frames.dedup();
        assert_eq!(frames.len(), 30);
    }

    #[test]
    fn rank_split_examples() {
        let s = split_by_rank(30_000, 27_000, 1_500).unwrap();
        let count = |k: Split| s.iter().filter(|x| **x == k).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (27_000, 1_500, 1_500));

        assert!(split_by_rank(10, 10, 0).unwrap().iter().all(|x| *x == Split::Train));

        let s = split_by_rank(10, 6, 2).unwrap();
        // samples 7–8 (1-based) are validation
        assert_eq!(&s[6..8], &[Split::Val, Split::Val]);
        assert_eq!(&s[8..], &[Split::Test, Split::Test]);

        assert!(matches!(split_by_rank(10, 8, 3), Err(Error::Validation(_))));
    }
}
