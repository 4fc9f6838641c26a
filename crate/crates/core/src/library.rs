//! Shared redundant-sample library and the inverse-frequency partner sampler.

use std::collections::BTreeMap;
use std::fmt::Display;

use rand::Rng;

use crate::data::{DataError, DatasetManifest, DemographicKey, Label, Sample, Split};

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("subgroup {0} has zero (or non-finite) proportion")]
    ZeroProportion(String),
    #[error("need real samples in at least 2 subgroups, found {0}")]
    InsufficientSubgroups(usize),
    #[error("no library subgroup differs from {0}")]
    NoEligibleSubgroup(DemographicKey),
    #[error("sample {0} is not real")]
    NotReal(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Inverse-frequency selection bias: `b_g = (1/D_g) / sum_i (1/D_i)`.
///
/// Only the ratios of `proportions` matter, so raw counts work too.
pub fn compute_selection_bias<K: Ord + Clone + Display>(
    proportions: &BTreeMap<K, f64>,
) -> Result<BTreeMap<K, f64>, LibraryError> {
    for (k, &d) in proportions {
        if !(d.is_finite() && d > 0.0) {
            return Err(LibraryError::ZeroProportion(k.to_string()));
        }
    }
    let total: f64 = proportions.values().map(|d| 1.0 / d).sum();
    Ok(proportions
        .iter()
        .map(|(k, d)| (k.clone(), (1.0 / d) / total))
        .collect())
}

/// How a partner subgroup is chosen among the eligible ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Proportional to the selection bias, renormalized over eligible groups.
    Biased,
    /// Every eligible subgroup equally likely.
    Uniform,
}

#[derive(Debug, Clone)]
pub struct RedundantLibrary {
    pub samples: BTreeMap<DemographicKey, Vec<Sample>>,
    pub bias: BTreeMap<DemographicKey, f64>,
}

/// Position of a library sample: subgroup plus index within its bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LibraryIndex {
    pub subgroup: DemographicKey,
    pub index: usize,
}

/// Real-sample proportions of one manifest split (nonempty subgroups only).
pub fn real_proportions(manifest: &DatasetManifest, split: Split) -> BTreeMap<DemographicKey, f64> {
    let mut counts: BTreeMap<DemographicKey, f64> = BTreeMap::new();
    let mut n = 0.0;
    for e in manifest.split_entries(split).filter(|e| e.label == Label::Real) {
        *counts.entry(e.subgroup).or_default() += 1.0;
        n += 1.0;
    }
    counts.values_mut().for_each(|c| *c /= n);
    counts
}

impl RedundantLibrary {
    /// Buckets the real samples by subgroup and derives the bias from their
    /// proportions. Fakes in `samples` are skipped.
    pub fn build(samples: &[Sample]) -> Result<Self, LibraryError> {
        let mut buckets: BTreeMap<DemographicKey, Vec<Sample>> = BTreeMap::new();
        for s in samples.iter().filter(|s| s.label == Label::Real) {
            buckets.entry(s.subgroup).or_default().push(s.clone());
        }
        Self::from_buckets(buckets)
    }

    pub fn from_buckets(buckets: BTreeMap<DemographicKey, Vec<Sample>>) -> Result<Self, LibraryError> {
        let buckets: BTreeMap<_, _> = buckets.into_iter().filter(|(_, v)| !v.is_empty()).collect();
        if let Some(s) = buckets.values().flatten().find(|s| s.label != Label::Real) {
            return Err(LibraryError::NotReal(s.id.clone()));
        }
        if buckets.len() < 2 {
            return Err(LibraryError::InsufficientSubgroups(buckets.len()));
        }
        let total: usize = buckets.values().map(Vec::len).sum();
        let props: BTreeMap<DemographicKey, f64> = buckets
            .iter()
            .map(|(k, v)| (*k, v.len() as f64 / total as f64))
            .collect();
        let bias = compute_selection_bias(&props)?;
        Ok(Self {
            samples: buckets,
            bias,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, idx: LibraryIndex) -> &Sample {
        &self.samples[&idx.subgroup][idx.index]
    }

    /// Every library position in a fixed order.
    pub fn indices(&self) -> impl Iterator<Item = LibraryIndex> + '_ {
        self.samples.iter().flat_map(|(k, v)| {
            (0..v.len()).map(move |index| LibraryIndex {
                subgroup: *k,
                index,
            })
        })
    }

    /// Selection probabilities over the subgroups eligible for `query`.
    pub fn eligible_distribution(
        &self,
        query: DemographicKey,
        mode: SamplingMode,
    ) -> Vec<(DemographicKey, f64)> {
        let eligible: Vec<(DemographicKey, f64)> = self
            .bias
            .iter()
            .filter(|(k, _)| **k != query)
            .map(|(k, b)| match mode {
                SamplingMode::Biased => (*k, *b),
                SamplingMode::Uniform => (*k, 1.0),
            })
            .collect();
        let total: f64 = eligible.iter().map(|(_, w)| w).sum();
        eligible.into_iter().map(|(k, w)| (k, w / total)).collect()
    }

    pub fn select_index(
        &self,
        query: DemographicKey,
        mode: SamplingMode,
        rng: &mut impl Rng,
    ) -> Result<LibraryIndex, LibraryError> {
        let dist = self.eligible_distribution(query, mode);
        let Some(&(last, _)) = dist.last() else {
            return Err(LibraryError::NoEligibleSubgroup(query));
        };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = last;
        for &(k, p) in &dist {
            acc += p;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let index = rng.random_range(0..self.samples[&chosen].len());
        Ok(LibraryIndex {
            subgroup: chosen,
            index,
        })
    }
}

pub fn build_library(samples: &[Sample]) -> Result<RedundantLibrary, LibraryError> {
    RedundantLibrary::build(samples)
}

/// Loads the real images of `split` and builds the library from them.
pub fn build_library_from_manifest(
    manifest: &DatasetManifest,
    split: Split,
    input_size: usize,
) -> Result<RedundantLibrary, LibraryError> {
    let reals = DatasetManifest {
        root: manifest.root.clone(),
        entries: manifest
            .entries
            .iter()
            .filter(|e| e.split == split && e.label == Label::Real)
            .cloned()
            .collect(),
    };
    RedundantLibrary::build(&reals.load_split(split, input_size)?)
}

/// Draws a partner for `query` from a different subgroup.
pub fn select_redundant<'a>(
    query: &Sample,
    lib: &'a RedundantLibrary,
    rng: &mut impl Rng,
) -> Result<&'a Sample, LibraryError> {
    let idx = lib.select_index(query.subgroup, SamplingMode::Biased, rng)?;
    Ok(lib.get(idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Gender, Race};
    use crate::tensor::Tensor3;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn key(g: Gender, r: Race) -> DemographicKey {
        DemographicKey::new(g, r)
    }

    fn real(id: &str, k: DemographicKey) -> Sample {
        Sample {
            id: id.into(),
            image: Arc::new(Tensor3::zeros(3, 1, 1)),
            label: Label::Real,
            subgroup: k,
            method: None,
            split: Split::Train,
        }
    }

    #[test]
    fn two_group_example() {
        let props = BTreeMap::from([("A", 0.75), ("B", 0.25)]);
        let b = compute_selection_bias(&props).unwrap();
        assert!((b["A"] - 0.25).abs() < 1e-15);
        assert!((b["B"] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn equal_groups_get_equal_bias() {
        let props: BTreeMap<_, _> = DemographicKey::all().into_iter().map(|k| (k, 0.125)).collect();
        let b = compute_selection_bias(&props).unwrap();
        assert!(b.values().all(|&v| v == 0.125));
    }

    #[test]
    fn zero_proportion_is_rejected() {
        let props = BTreeMap::from([("A", 1.0), ("B", 0.0)]);
        assert!(matches!(compute_selection_bias(&props), Err(LibraryError::ZeroProportion(g)) if g == "B"));
    }

    #[test]
    fn fakes_only_is_insufficient() {
        let mut s = real("a", key(Gender::M, Race::W));
        s.label = Label::Fake;
        assert!(matches!(build_library(&[s]), Err(LibraryError::InsufficientSubgroups(0))));
    }

    #[test]
    fn single_eligible_bucket_always_chosen() {
        let mw = key(Gender::M, Race::W);
        let fa = key(Gender::F, Race::A);
        let lib = build_library(&[real("a", mw), real("b", fa), real("c", fa)]).unwrap();
        assert_eq!(lib.samples.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(select_redundant(&real("q", mw), &lib, &mut rng).unwrap().subgroup, fa);
        }
    }

    #[test]
    fn no_eligible_subgroup() {
        let mw = key(Gender::M, Race::W);
        let lib = RedundantLibrary {
            samples: BTreeMap::from([(mw, vec![real("a", mw)])]),
            bias: BTreeMap::from([(mw, 1.0)]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            select_redundant(&real("q", mw), &lib, &mut rng),
            Err(LibraryError::NoEligibleSubgroup(k)) if k == mw
        ));
    }

    proptest! {
        #[test]
        fn bias_is_normalized_monotone_and_scale_invariant(
            ds in proptest::collection::vec(0.001f64..1.0, 2..8),
            c in 0.01f64..100.0,
        ) {
            let props: BTreeMap<usize, f64> = ds.iter().copied().enumerate().collect();
            let b = compute_selection_bias(&props).unwrap();
            prop_assert!((b.values().sum::<f64>() - 1.0).abs() < 1e-12);
            let scaled: BTreeMap<usize, f64> = props.iter().map(|(k, v)| (*k, v * c)).collect();
            let bs = compute_selection_bias(&scaled).unwrap();
            for (k, v) in &b {
                prop_assert!((v - bs[k]).abs() < 1e-12);
            }
            for i in 0..ds.len() {
                for j in 0..ds.len() {
                    if ds[i] < ds[j] {
                        prop_assert!(b[&i] > b[&j]);
                    }
                }
            }
        }
    }
}
