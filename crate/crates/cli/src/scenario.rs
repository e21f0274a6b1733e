//! Builds train / test / metadata splits for one seed.
//!
//! Each split draws from its own seed offset so changing, say, the test size
//! leaves the training set untouched.

use iada::data::{
    inject_label_noise, load_csv, make_longtail, make_subpop_shift, split_meta, CsvSchema, Dataset, MetaDataset, SubpopConfig,
};

use crate::config::DataConfig;
use crate::CliError;

const TEST_OFFSET: u64 = 1000;
const META_OFFSET: u64 = 2000;
const NOISE_OFFSET: u64 = 77;
const SUBPOP_META_OFFSET: u64 = 5000;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub meta: MetaDataset,
}

pub fn build(data: &DataConfig, seed: u64) -> Result<Scenario, CliError> {
    let s = match data {
        DataConfig::Longtail(d) => {
            let train = make_longtail(seed, d.num_classes, d.n_max, d.imbalance_ratio, d.dim, d.geometry)?;
            let test = make_longtail(seed + TEST_OFFSET, d.num_classes, d.test_per_class, 1.0, d.dim, d.geometry)?;
            let pool = make_longtail(seed + META_OFFSET, d.num_classes, d.meta_pool_per_class, 1.0, d.dim, d.geometry)?;
            let (_, meta) = split_meta(&pool, d.meta_per_class, seed)?;
            Scenario { train, test: Some(test), meta }
        }
        DataConfig::Noise(d) => {
            let clean = make_longtail(seed, d.num_classes, d.per_class, 1.0, d.dim, d.geometry)?;
            let train = inject_label_noise(&clean, d.noise_kind, d.noise_rate, seed + NOISE_OFFSET)?;
            let test = make_longtail(seed + TEST_OFFSET, d.num_classes, d.test_per_class, 1.0, d.dim, d.geometry)?;
            let pool = make_longtail(seed + META_OFFSET, d.num_classes, d.meta_pool_per_class, 1.0, d.dim, d.geometry)?;
            let (_, meta) = split_meta(&pool, d.meta_per_class, seed)?;
            Scenario { train, test: Some(test), meta }
        }
        DataConfig::Subpop(d) => {
            let gen = d.generator();
            let (train, test) = make_subpop_shift(seed, &gen)?;
            let pool_cfg = SubpopConfig { n_train: d.meta_pool, group_balance_train: [0.25; 4], ..gen };
            let (pool, _) = make_subpop_shift(seed + SUBPOP_META_OFFSET, &pool_cfg)?;
            let (_, meta) = split_meta(&pool, d.meta_per_class, seed)?;
            Scenario { train, test: Some(test), meta }
        }
        DataConfig::CustomCsv(d) => {
            let schema = CsvSchema { num_classes: d.num_classes };
            let full = load_csv(&d.train, schema)?;
            // Later files must agree with the training set's class count.
            let schema = CsvSchema { num_classes: Some(full.num_classes) };
            let test = d.test.as_ref().map(|p| load_csv(p, schema)).transpose()?;
            let (train, meta) = match &d.meta {
                Some(p) => (full, meta_from(load_csv(p, schema)?)?),
                None => split_meta(&full, d.meta_per_class, seed)?,
            };
            Scenario { train, test, meta }
        }
    };
    Ok(s)
}

fn meta_from(ds: Dataset) -> Result<MetaDataset, CliError> {
    let counts = ds.class_counts();
    let per_class = counts.iter().copied().min().unwrap_or(0);
    if per_class == 0 {
        return Err(CliError::Config(format!("metadata file misses a class (counts {counts:?})")));
    }
    Ok(MetaDataset { features: ds.features, labels: ds.labels, per_class, num_classes: ds.num_classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CsvData, LongtailData, NoiseData, SubpopData};

    #[test]
    fn synthetic_scenarios_have_expected_shapes() {
        let lt = build(&DataConfig::Longtail(LongtailData::default()), 0).unwrap();
        assert_eq!(lt.train.class_counts(), vec![500, 158, 50, 16, 5]);
        assert_eq!(lt.test.unwrap().class_counts(), vec![300; 5]);
        assert_eq!(lt.meta.len(), 50);

        let noisy = build(&DataConfig::Noise(NoiseData::default()), 0).unwrap();
        let mask = noisy.train.noise_mask.as_ref().unwrap();
        let rate = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        assert!((rate - 0.4).abs() < 0.05, "{rate}");

        let sp = build(&DataConfig::Subpop(SubpopData::default()), 0).unwrap();
        assert_eq!(sp.train.len(), 1000);
        assert_eq!(sp.meta.len(), 200);
        assert_eq!(sp.test.unwrap().num_groups(), Some(4));
    }

    #[test]
    fn same_seed_same_data() {
        let d = DataConfig::Noise(NoiseData::default());
        let (a, b) = (build(&d, 3).unwrap(), build(&d, 3).unwrap());
        assert_eq!(a.train, b.train);
        assert_eq!(a.meta, b.meta);
        assert_ne!(build(&d, 4).unwrap().train, a.train);
    }

    #[test]
    fn csv_scenario_splits_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let lt = build(&DataConfig::Longtail(LongtailData { imbalance_ratio: 2.0, ..LongtailData::default() }), 1).unwrap();
        let path = dir.path().join("train.csv");
        iada::data::save_csv(&lt.train, &path).unwrap();
        let csv = CsvData { train: path, test: None, meta: None, num_classes: None, meta_per_class: 5 };
        let s = build(&DataConfig::CustomCsv(csv), 0).unwrap();
        assert_eq!(s.meta.len(), 25);
        assert_eq!(s.train.len() + 25, lt.train.len());
        assert!(s.test.is_none());
    }
}
