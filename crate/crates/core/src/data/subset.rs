use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Split};
use crate::{Error, Result};

/// Number of train records a fraction selects.
pub fn subset_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Uniformly samples `floor(fraction·n)` train records without replacement,
/// keeping manifest order. Test records are kept as-is.
pub fn subset_manifest(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subset fraction must be in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(manifest.clone());
    }
    let train: Vec<usize> = (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split == Split::Train)
        .collect();
    let k = subset_size(train.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; manifest.records.len()];
    for j in rand::seq::index::sample(&mut rng, train.len(), k) {
        keep[train[j]] = true;
    }
    let records = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(i, r)| r.split == Split::Test || keep[*i])
        .map(|(_, r)| r.clone())
        .collect();
    Ok(DatasetManifest {
        records,
        ..manifest.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::SampleRecord;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn manifest(n_train: usize, n_test: usize) -> DatasetManifest {
        let records = (0..n_train + n_test)
            .map(|i| SampleRecord {
                id: format!("r{i}"),
                image_path: String::new(),
                mask_path: String::new(),
                height: 1,
                width: 1,
                channels: 1,
                split: if i < n_train {
                    Split::Train
                } else {
                    Split::Test
                },
                source_id: format!("r{i}"),
            })
            .collect();
        DatasetManifest {
            name: "m".into(),
            records,
            channel_semantics: vec![],
            root: PathBuf::new(),
        }
    }

    #[test]
    fn full_fraction_is_identity() {
        let m = manifest(10, 3);
        assert_eq!(subset_manifest(&m, 1.0, 5).unwrap(), m);
    }

    #[test]
    fn published_count_example() {
        assert_eq!(subset_size(6967, 0.25), 1741);
        let m = subset_manifest(&manifest(6967, 4), 0.25, 1).unwrap();
        assert_eq!(m.count(Split::Train), 1741);
        assert_eq!(m.count(Split::Test), 4);
    }

    #[test]
    fn seeds_control_the_draw() {
        let m = manifest(500, 0);
        let a = subset_manifest(&m, 0.5, 1).unwrap();
        assert_eq!(a, subset_manifest(&m, 0.5, 1).unwrap());
        assert_ne!(a, subset_manifest(&m, 0.5, 2).unwrap());
    }

    #[test]
    fn out_of_range_fractions_fail() {
        let m = manifest(4, 0);
        for f in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(subset_manifest(&m, f, 0).is_err());
        }
    }

    proptest! {
        #[test]
        fn subsets_are_ordered_and_sized(n in 1usize..200, f in 0.01f64..1.0, seed in any::<u64>()) {
            let m = manifest(n, 2);
            let s = subset_manifest(&m, f, seed).unwrap();
            prop_assert_eq!(s.count(Split::Train), subset_size(n, f));
            let pos: Vec<usize> = s.records.iter().map(|r| m.records.iter().position(|x| x.id == r.id).unwrap()).collect();
            prop_assert!(pos.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
