//! Class-stratified train/val/test split with largest-remainder rounding.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_jsonl, write_jsonl, DatasetError, SPLIT_DIR};
use crate::schema::{VideoMeta, VideoSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Subset::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}` (expected train, val or test)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SplitSpec {
    /// Train, val and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { ratios: [0.8, 0.1, 0.1], seed: 2024 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(DatasetError::Config(format!("split ratios must be non-negative, got {:?}", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(DatasetError::Config(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// Parses `0.8,0.1,0.1`.
    pub fn parse_ratios(s: &str) -> Result<[f64; 3], DatasetError> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DatasetError::Config(format!("bad ratios `{s}`: {e}")))?;
        <[f64; 3]>::try_from(parts).map_err(|_| DatasetError::Config(format!("expected three ratios, got `{s}`")))
    }
}

/// Video ids per subset, each list sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn get(&self, subset: Subset) -> &[String] {
        match subset {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
            Subset::Test => &self.test,
        }
    }

    fn get_mut(&mut self, subset: Subset) -> &mut Vec<String> {
        match subset {
            Subset::Train => &mut self.train,
            Subset::Val => &mut self.val,
            Subset::Test => &mut self.test,
        }
    }

    pub fn index(&self) -> BTreeMap<String, Subset> {
        Subset::ALL.into_iter().flat_map(|s| self.get(s).iter().map(move |id| (id.clone(), s))).collect()
    }

    /// Writes `split/{train,val,test}.jsonl` (video metadata) and `split/split_index.json`.
    pub fn save(&self, dataset_dir: &Path, samples: &[VideoSample]) -> Result<(), DatasetError> {
        let dir = dataset_dir.join(SPLIT_DIR);
        let by_id: BTreeMap<&str, &VideoSample> = samples.iter().map(|s| (s.video_id(), s)).collect();
        for subset in Subset::ALL {
            let metas: Vec<VideoMeta> =
                self.get(subset).iter().filter_map(|id| by_id.get(id.as_str()).map(|s| s.meta())).collect();
            write_jsonl(&dir.join(format!("{subset}.jsonl")), &metas)?;
        }
        let path = dir.join("split_index.json");
        let json = serde_json::to_string_pretty(&self.index()).expect("serializable index");
        std::fs::write(&path, json).map_err(|e| DatasetError::Io(path, e))
    }

    pub fn load(dataset_dir: &Path) -> Result<Self, DatasetError> {
        let dir = dataset_dir.join(SPLIT_DIR);
        let mut out = Split::default();
        for subset in Subset::ALL {
            let metas: Vec<VideoMeta> = read_jsonl(&dir.join(format!("{subset}.jsonl")))?;
            *out.get_mut(subset) = metas.into_iter().map(|m| m.video_id).collect();
        }
        Ok(out)
    }
}

/// Largest-remainder allocation of `n` items over `ratios`; ties go to the earlier subset.
pub(crate) fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    let mut counts = quotas.map(|q| (q + 1e-9).floor() as usize);
    let mut rest = n.saturating_sub(counts.iter().sum());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Splits positives and negatives separately so each subset keeps the class mix.
///
/// A class with fewer members than subsets goes wholly to train.
pub fn stratified_split(samples: &[VideoSample], spec: &SplitSpec) -> Result<Split, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Split::default();
    for label in [true, false] {
        let mut ids: Vec<String> =
            samples.iter().filter(|s| s.label() == label).map(|s| s.video_id().to_string()).collect();
        ids.sort();
        ids.dedup();
        if ids.is_empty() {
            continue;
        }
        if ids.len() < Subset::ALL.len() {
            log::warn!(
                "only {} {} samples; placing the whole class in train",
                ids.len(),
                if label { "positive" } else { "negative" }
            );
            out.train.extend(ids);
            continue;
        }
        ids.shuffle(&mut rng);
        let counts = allocate(ids.len(), &spec.ratios);
        let mut it = ids.into_iter();
        for (subset, n) in Subset::ALL.into_iter().zip(counts) {
            out.get_mut(subset).extend(it.by_ref().take(n));
        }
    }
    for subset in Subset::ALL {
        out.get_mut(subset).sort();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasetkit::{generate_synthetic, SyntheticConfig};
    use proptest::prelude::*;

    fn pos_count(split: &[String]) -> usize {
        split.iter().filter(|id| id.contains("pos")).count()
    }

    #[test]
    fn exact_divisibility() {
        let cfg = SyntheticConfig {
            num_positive: 100,
            num_negative: 100,
            duration_range: (10.0, 10.0),
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let s = stratified_split(&ds.samples, &SplitSpec::default()).unwrap();
        assert_eq!((pos_count(&s.train), s.train.len()), (80, 160));
        assert_eq!((pos_count(&s.val), s.val.len()), (10, 20));
        assert_eq!((pos_count(&s.test), s.test.len()), (10, 20));
    }

    #[test]
    fn ten_positives() {
        assert_eq!(allocate(10, &[0.8, 0.1, 0.1]), [8, 1, 1]);
    }

    #[test]
    fn tiny_class_goes_to_train() {
        let cfg = SyntheticConfig { num_positive: 2, num_negative: 10, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let s = stratified_split(&ds.samples, &SplitSpec::default()).unwrap();
        assert_eq!(pos_count(&s.train), 2);
        assert_eq!(s.val.len() + s.test.len(), 2);
    }

    #[test]
    fn bad_ratios_rejected() {
        let spec = SplitSpec { ratios: [0.5, 0.5, 0.5], seed: 0 };
        assert!(stratified_split(&[], &spec).is_err());
        assert!(SplitSpec::parse_ratios("0.8,0.2").is_err());
        assert_eq!(SplitSpec::parse_ratios("0.8, 0.1,0.1").unwrap(), [0.8, 0.1, 0.1]);
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = SyntheticConfig { num_positive: 6, num_negative: 6, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let s = stratified_split(&ds.samples, &SplitSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path(), &ds.samples).unwrap();
        assert_eq!(Split::load(dir.path()).unwrap(), s);
        assert_eq!(s.index().len(), 12);
    }

    proptest! {
        #[test]
        fn allocation_is_floor_or_ceil(n in 0usize..5000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (a, b) = if a + b > 1.0 { (a / 2.0, b / 2.0) } else { (a, b) };
            let ratios = [a, b, 1.0 - a - b];
            let c = allocate(n, &ratios);
            prop_assert_eq!(c.iter().sum::<usize>(), n);
            for i in 0..3 {
                let q = ratios[i] * n as f64;
                prop_assert!((c[i] as f64 - q).abs() < 1.0 + 1e-6);
            }
        }
    }
}
