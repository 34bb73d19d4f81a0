//! L1 nearest-neighbor matching and the random-split accuracy harness.
//!
//! A gallery is a list of enrolled feature vectors with identities derived
//! from image names; probes are classified by minimum L1 distance (1NN) and
//! recognition accuracy is the percentage of probes whose matched identity
//! equals their true identity.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::descriptor::{extract_features, DescriptorConfig, DescriptorError, FeatureVector};
use crate::imageio::GrayImage;

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("feature vectors have different lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("result list is empty")]
    EmptyResults,
    #[error("image name list is empty")]
    EmptyNames,
    #[error("test percentage must be in 1..=99, got {0}")]
    InvalidPercent(u32),
    #[error("repetitions must be at least 1")]
    InvalidRepetitions,
    #[error("degenerate split: {test} test images out of {total}")]
    DegenerateSplit { test: usize, total: usize },
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

/// One enrolled image: its name, the identity derived from the name, and
/// its feature vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GalleryEntry {
    pub name: String,
    pub identity: String,
    pub features: FeatureVector,
}

impl GalleryEntry {
    pub fn new(name: impl Into<String>, features: FeatureVector) -> Self {
        let name = name.into();
        let identity = identity_of(&name).to_owned();
        Self { name, identity, features }
    }
}

/// Outcome of one 1NN query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub query: String,
    pub identity: String,
    pub distance: u64,
    pub index: usize,
}

/// Random-split experiment parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    test_percent: u32,
    repetitions: u32,
    seed: u64,
    stratified: bool,
}

impl SplitSpec {
    pub fn new(test_percent: u32, repetitions: u32, seed: u64) -> Result<Self, MatcherError> {
        if !(1..=99).contains(&test_percent) {
            return Err(MatcherError::InvalidPercent(test_percent));
        }
        if repetitions == 0 {
            return Err(MatcherError::InvalidRepetitions);
        }
        Ok(Self { test_percent, repetitions, seed, stratified: false })
    }

    /// Sample test images per identity instead of over the whole pool; every
    /// identity keeps at least one gallery image. Off by default.
    pub fn with_stratified(mut self, stratified: bool) -> Self {
        self.stratified = stratified;
        self
    }

    pub fn test_percent(&self) -> u32 {
        self.test_percent
    }

    pub fn repetitions(&self) -> u32 {
        self.repetitions
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stratified(&self) -> bool {
        self.stratified
    }
}

/// Accuracies of one experiment: one entry per repetition plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub test_size: usize,
    pub gallery_size: usize,
}

/// Identity label of an image name: the file stem up to the last underscore
/// (`subject07_3.pgm` → `subject07`; a stem without underscore is its own
/// identity).
pub fn identity_of(name: &str) -> &str {
    let stem = Path::new(name)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(name);
    match stem.rfind('_') {
        Some(pos) if pos > 0 => &stem[..pos],
        _ => stem,
    }
}

/// Sum of absolute component differences.
pub fn l1_distance(v1: &FeatureVector, v2: &FeatureVector) -> Result<u64, MatcherError> {
    if v1.len() != v2.len() {
        return Err(MatcherError::LengthMismatch { left: v1.len(), right: v2.len() });
    }
    let sum = v1
        .counts()
        .iter()
        .zip(v2.counts())
        .map(|(&a, &b)| u64::from(a.abs_diff(b)))
        .sum();
    Ok(sum)
}

/// 1NN: the gallery entry at minimum L1 distance; ties go to the lowest
/// index.
pub fn nearest(
    query_name: &str,
    query: &FeatureVector,
    gallery: &[GalleryEntry],
) -> Result<MatchResult, MatcherError> {
    if gallery.is_empty() {
        return Err(MatcherError::EmptyGallery);
    }
    let mut best_index = 0;
    let mut best_distance = l1_distance(query, &gallery[0].features)?;
    for (index, entry) in gallery.iter().enumerate().skip(1) {
        let distance = l1_distance(query, &entry.features)?;
        if distance < best_distance {
            best_distance = distance;
            best_index = index;
        }
    }
    Ok(MatchResult {
        query: query_name.to_owned(),
        identity: gallery[best_index].identity.clone(),
        distance: best_distance,
        index: best_index,
    })
}

/// Recognition accuracy: 100 × matched / total over (true identity, matched
/// identity) pairs.
pub fn recognition_accuracy(results: &[(String, String)]) -> Result<f64, MatcherError> {
    if results.is_empty() {
        return Err(MatcherError::EmptyResults);
    }
    let matched = results.iter().filter(|(truth, found)| truth == found).count();
    Ok(100.0 * matched as f64 / results.len() as f64)
}

/// Test size under the round-half-up rule: round(percent × n / 100).
pub fn test_size(n: usize, percent: u32) -> usize {
    ((percent as u64 * n as u64 + 50) / 100) as usize
}

fn rep_rng(seed: u64, repetition: u32) -> ChaCha8Rng {
    // Golden-ratio stride keeps per-repetition streams distinct even for
    // adjacent base seeds.
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(u64::from(repetition).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// One repetition's (test, gallery) name partition.
pub type Split = (Vec<String>, Vec<String>);

/// Seeded random test/gallery partitions, one per repetition.
///
/// The default mode shuffles the whole pool uniformly, so identities may end
/// up absent from one side; stratified mode samples within each identity and
/// keeps at least one gallery image per identity.
pub fn make_splits(names: &[String], spec: &SplitSpec) -> Result<Vec<Split>, MatcherError> {
    if names.is_empty() {
        return Err(MatcherError::EmptyNames);
    }
    let n = names.len();
    let target = test_size(n, spec.test_percent);
    if target == 0 || target == n {
        return Err(MatcherError::DegenerateSplit { test: target, total: n });
    }
    let mut splits = Vec::with_capacity(spec.repetitions as usize);
    for rep in 0..spec.repetitions {
        let mut rng = rep_rng(spec.seed, rep);
        let split = if spec.stratified {
            stratified_split(names, spec.test_percent, &mut rng)
        } else {
            let mut pool = names.to_vec();
            pool.shuffle(&mut rng);
            let gallery = pool.split_off(target);
            (pool, gallery)
        };
        splits.push(split);
    }
    Ok(splits)
}

fn stratified_split(names: &[String], percent: u32, rng: &mut ChaCha8Rng) -> Split {
    let mut groups: Vec<(String, Vec<String>)> = Vec::new();
    let mut by_identity: HashMap<&str, usize> = HashMap::new();
    for name in names {
        let identity = identity_of(name);
        let slot = *by_identity.entry(identity).or_insert_with(|| {
            groups.push((identity.to_owned(), Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(name.clone());
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    let mut test = Vec::new();
    let mut gallery = Vec::new();
    for (_, mut members) in groups {
        members.shuffle(rng);
        let take = test_size(members.len(), percent).min(members.len() - 1);
        let rest = members.split_off(take);
        test.extend(members);
        gallery.extend(rest);
    }
    (test, gallery)
}

/// Run the full experiment: extract features once per image, then for every
/// repetition build the gallery, classify every test image with 1NN, and
/// score the repetition with `recognition_accuracy`.
pub fn run_experiment(
    images: &[(String, GrayImage)],
    cfg: &DescriptorConfig,
    spec: &SplitSpec,
) -> Result<AccuracyReport, MatcherError> {
    if images.is_empty() {
        return Err(MatcherError::EmptyNames);
    }
    // Feature extraction is pure, so each image is extracted once and reused
    // across repetitions.
    let mut features: HashMap<&str, FeatureVector> = HashMap::with_capacity(images.len());
    for (name, img) in images {
        features.insert(name.as_str(), extract_features(img, cfg)?);
    }
    let names: Vec<String> = images.iter().map(|(name, _)| name.clone()).collect();
    let splits = make_splits(&names, spec)?;

    let mut accuracies = Vec::with_capacity(splits.len());
    let (mut test_count, mut gallery_count) = (0, 0);
    for (test, gallery_names) in &splits {
        test_count = test.len();
        gallery_count = gallery_names.len();
        let gallery: Vec<GalleryEntry> = gallery_names
            .iter()
            .map(|name| GalleryEntry::new(name.clone(), features[name.as_str()].clone()))
            .collect();
        let mut outcomes = Vec::with_capacity(test.len());
        for name in test {
            let result = nearest(name, &features[name.as_str()], &gallery)?;
            outcomes.push((identity_of(name).to_owned(), result.identity));
        }
        accuracies.push(recognition_accuracy(&outcomes)?);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    Ok(AccuracyReport { accuracies, mean, test_size: test_count, gallery_size: gallery_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn vector(counts: Vec<u32>) -> FeatureVector {
        FeatureVector::new(counts)
    }

    fn random_vector(rng: &mut ChaCha8Rng, len: usize) -> FeatureVector {
        FeatureVector::new((0..len).map(|_| rng.gen_range(0..4000)).collect())
    }

    #[test]
    fn identity_naming_convention() {
        assert_eq!(identity_of("subject07_3.pgm"), "subject07");
        assert_eq!(identity_of("alice_12"), "alice");
        assert_eq!(identity_of("bob.pgm"), "bob");
        assert_eq!(identity_of("a_b_c_9.pgm"), "a_b_c");
        assert_eq!(identity_of("_1.pgm"), "_1");
    }

    #[test]
    fn l1_hand_values() {
        assert_eq!(l1_distance(&vector(vec![1, 2, 3]), &vector(vec![3, 2, 0])).unwrap(), 5);
        let v = vector(vec![7, 0, 9, 2]);
        assert_eq!(l1_distance(&v, &v).unwrap(), 0);
        assert!(matches!(
            l1_distance(&vector(vec![0, 0]), &vector(vec![0, 0, 0])),
            Err(MatcherError::LengthMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn l1_does_not_overflow_on_extreme_counts() {
        let long_max = vector(vec![u32::MAX; 16]);
        let long_min = vector(vec![0; 16]);
        assert_eq!(l1_distance(&long_max, &long_min).unwrap(), 16 * u64::from(u32::MAX));
    }

    #[test]
    fn nearest_finds_exact_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gallery: Vec<GalleryEntry> = (0..10)
            .map(|i| GalleryEntry::new(format!("id{i}_1.pgm"), random_vector(&mut rng, 32)))
            .collect();
        let result = nearest("probe", &gallery[7].features.clone(), &gallery).unwrap();
        assert_eq!(result.index, 7);
        assert_eq!(result.distance, 0);
        assert_eq!(result.identity, "id7");
        assert_eq!(result.query, "probe");
    }

    #[test]
    fn nearest_ties_break_to_lowest_index() {
        let v = vector(vec![5, 5, 5]);
        let gallery = vec![
            GalleryEntry::new("x_1", v.clone()),
            GalleryEntry::new("y_1", v.clone()),
        ];
        let result = nearest("q", &v, &gallery).unwrap();
        assert_eq!(result.index, 0);
        assert_eq!(result.identity, "x");
    }

    #[test]
    fn nearest_rejects_empty_gallery() {
        assert!(matches!(
            nearest("q", &vector(vec![1]), &[]),
            Err(MatcherError::EmptyGallery)
        ));
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        // Independent oracle: recompute every distance with i64 arithmetic
        // and scan for the minimum, keeping the first occurrence.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let gallery: Vec<GalleryEntry> = (0..50)
                .map(|i| GalleryEntry::new(format!("g{i}_1"), random_vector(&mut rng, 64)))
                .collect();
            let query = random_vector(&mut rng, 64);
            let mut oracle_index = usize::MAX;
            let mut oracle_distance = i64::MAX;
            for (i, entry) in gallery.iter().enumerate() {
                let mut dist: i64 = 0;
                for (a, b) in query.counts().iter().zip(entry.features.counts()) {
                    dist += (i64::from(*a) - i64::from(*b)).abs();
                }
                if dist < oracle_distance {
                    oracle_distance = dist;
                    oracle_index = i;
                }
            }
            let result = nearest("q", &query, &gallery).unwrap();
            assert_eq!(result.index, oracle_index);
            assert_eq!(result.distance, oracle_distance as u64);
        }
    }

    #[test]
    fn adding_entries_never_increases_best_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let query = random_vector(&mut rng, 48);
        let mut gallery = vec![GalleryEntry::new("a_1", random_vector(&mut rng, 48))];
        let mut previous = nearest("q", &query, &gallery).unwrap().distance;
        for i in 0..30 {
            gallery.push(GalleryEntry::new(format!("b{i}_1"), random_vector(&mut rng, 48)));
            let now = nearest("q", &query, &gallery).unwrap().distance;
            assert!(now <= previous);
            previous = now;
        }
    }

    #[test]
    fn accuracy_values() {
        let all: Vec<(String, String)> =
            (0..5).map(|i| (format!("p{i}"), format!("p{i}"))).collect();
        assert_eq!(recognition_accuracy(&all).unwrap(), 100.0);
        let none: Vec<(String, String)> =
            (0..5).map(|i| (format!("p{i}"), "other".to_owned())).collect();
        assert_eq!(recognition_accuracy(&none).unwrap(), 0.0);
        let mut mixed = Vec::new();
        for i in 0..602 {
            let truth = format!("t{i}");
            let found = if i < 93 { truth.clone() } else { "wrong".to_owned() };
            mixed.push((truth, found));
        }
        let acc = recognition_accuracy(&mixed).unwrap();
        assert!((acc - 15.448_504_983_388_704).abs() < 1e-12);
        assert!(matches!(recognition_accuracy(&[]), Err(MatcherError::EmptyResults)));
    }

    #[test]
    fn split_sizes_round_half_up() {
        assert_eq!(test_size(100, 20), 20);
        assert_eq!(test_size(3023, 20), 605);
        assert_eq!(test_size(10, 25), 3); // 2.5 rounds up
        assert_eq!(test_size(7, 50), 4); // 3.5 rounds up
    }

    #[test]
    fn splits_partition_names() {
        let names: Vec<String> = (0..100).map(|i| format!("id{}_{}.pgm", i % 10, i / 10)).collect();
        let spec = SplitSpec::new(20, 10, 99).unwrap();
        let splits = make_splits(&names, &spec).unwrap();
        assert_eq!(splits.len(), 10);
        for (test, gallery) in &splits {
            assert_eq!(test.len(), 20);
            assert_eq!(gallery.len(), 80);
            let mut union: Vec<&String> = test.iter().chain(gallery).collect();
            union.sort();
            let mut expected: Vec<&String> = names.iter().collect();
            expected.sort();
            assert_eq!(union, expected);
        }
    }

    #[test]
    fn splits_are_seed_deterministic_and_vary_by_repetition() {
        let names: Vec<String> = (0..40).map(|i| format!("p{}_{}", i % 8, i)).collect();
        let spec = SplitSpec::new(30, 5, 7).unwrap();
        let a = make_splits(&names, &spec).unwrap();
        let b = make_splits(&names, &spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1], "repetitions should differ");
        let other = make_splits(&names, &SplitSpec::new(30, 5, 8).unwrap()).unwrap();
        assert_ne!(a, other, "seeds should differ");
    }

    #[test]
    fn degenerate_splits_are_rejected() {
        let one = vec!["a_1".to_owned()];
        let spec = SplitSpec::new(50, 1, 0).unwrap();
        assert!(matches!(
            make_splits(&one, &spec),
            Err(MatcherError::DegenerateSplit { test: 1, total: 1 })
        ));
        let two = vec!["a_1".to_owned(), "a_2".to_owned()];
        let spec = SplitSpec::new(20, 1, 0).unwrap();
        assert!(matches!(
            make_splits(&two, &spec),
            Err(MatcherError::DegenerateSplit { test: 0, total: 2 })
        ));
        assert!(matches!(make_splits(&[], &spec), Err(MatcherError::EmptyNames)));
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(SplitSpec::new(0, 10, 0), Err(MatcherError::InvalidPercent(0))));
        assert!(matches!(SplitSpec::new(100, 10, 0), Err(MatcherError::InvalidPercent(100))));
        assert!(matches!(SplitSpec::new(20, 0, 0), Err(MatcherError::InvalidRepetitions)));
    }

    #[test]
    fn stratified_split_keeps_every_identity_enrolled() {
        let names: Vec<String> =
            (0..6).flat_map(|i| (0..4).map(move |j| format!("person{i}_{j}.pgm"))).collect();
        let spec = SplitSpec::new(60, 10, 3).unwrap().with_stratified(true);
        for (test, gallery) in make_splits(&names, &spec).unwrap() {
            let enrolled: Vec<&str> = gallery.iter().map(|n| identity_of(n)).collect();
            for i in 0..6 {
                let identity = format!("person{i}");
                assert!(enrolled.contains(&identity.as_str()), "{identity} missing");
            }
            assert_eq!(test.len() + gallery.len(), names.len());
        }
    }

    #[test]
    fn single_identity_experiment_is_always_perfect() {
        let images: Vec<(String, GrayImage)> = (0..8)
            .map(|i| {
                let img = GrayImage::from_fn(16, 16, |x, y| ((x * y + i) % 251) as u8);
                (format!("only_{i}.pgm"), img)
            })
            .collect();
        let cfg = DescriptorConfig::new(2, vec![1]).unwrap();
        let spec = SplitSpec::new(50, 4, 11).unwrap();
        let report = run_experiment(&images, &cfg, &spec).unwrap();
        assert_eq!(report.mean, 100.0);
        assert!(report.accuracies.iter().all(|&a| a == 100.0));
        assert_eq!(report.test_size, 4);
        assert_eq!(report.gallery_size, 4);
    }

    #[test]
    fn separable_two_identity_experiment() {
        // Two textures with disjoint code support: every within-identity
        // distance is 0 and every cross-identity distance is positive, so 1NN
        // is perfect whenever both identities stay enrolled — which the
        // stratified splitter guarantees. (Images that are merely constant at
        // different levels would NOT separate: all their derivatives are 0,
        // so they share the all-zero code map.)
        let mut images: Vec<(String, GrayImage)> = Vec::new();
        for i in 0..6 {
            let stripes = GrayImage::from_fn(16, 16, |x, _| if x % 2 == 0 { 0 } else { 255 });
            images.push((format!("stripe_{i}.pgm"), stripes));
            images.push((format!("flat_{i}.pgm"), GrayImage::from_fn(16, 16, |_, _| 128)));
        }
        let cfg = DescriptorConfig::new(2, vec![1]).unwrap();
        let spec = SplitSpec::new(50, 10, 5).unwrap().with_stratified(true);
        let report = run_experiment(&images, &cfg, &spec).unwrap();
        assert_eq!(report.mean, 100.0);
    }

    proptest! {
        #[test]
        fn l1_is_a_metric(
            a in prop::collection::vec(0u32..10_000, 24),
            b in prop::collection::vec(0u32..10_000, 24),
            c in prop::collection::vec(0u32..10_000, 24),
        ) {
            let (va, vb, vc) = (vector(a), vector(b), vector(c));
            let dab = l1_distance(&va, &vb).unwrap();
            let dba = l1_distance(&vb, &va).unwrap();
            let dac = l1_distance(&va, &vc).unwrap();
            let dcb = l1_distance(&vc, &vb).unwrap();
            prop_assert_eq!(dab, dba);
            prop_assert_eq!(l1_distance(&va, &va).unwrap(), 0);
            prop_assert!((dab == 0) == (va == vb));
            prop_assert!(dab <= dac + dcb);
        }

        #[test]
        fn splits_always_partition(
            n in 3usize..60,
            percent in 10u32..=90,
            seed in any::<u64>(),
        ) {
            let names: Vec<String> = (0..n).map(|i| format!("s{}_{i}", i % 5)).collect();
            let spec = SplitSpec::new(percent, 3, seed).unwrap();
            match make_splits(&names, &spec) {
                Ok(splits) => {
                    for (test, gallery) in splits {
                        prop_assert_eq!(test.len(), test_size(n, percent));
                        let mut union: Vec<String> = test.iter().chain(gallery.iter()).cloned().collect();
                        union.sort();
                        let mut expected = names.clone();
                        expected.sort();
                        prop_assert_eq!(union, expected);
                    }
                }
                Err(MatcherError::DegenerateSplit { test, total }) => {
                    prop_assert!(test == 0 || test == total);
                }
                Err(other) => return Err(TestCaseError::fail(format!("unexpected: {other}"))),
            }
        }
    }
}
