//! Dataset directories: one image and one label volume per case, the
//! generator configuration and a class histogram.

use std::fmt::Write as _;
use std::path::Path;

use mmunet::config::KvConfig;
use mmunet::training::{Sample, SyntheticConfig, SyntheticDataset};
use mmunet::volume::VolumeFile;
use mmunet::{Error, Result};

pub const DATASET_CFG: &str = "dataset.cfg";
pub const HISTOGRAM_CSV: &str = "histogram.csv";

pub fn image_name(case: usize) -> String {
    format!("case_{case:03}_image.mmuv")
}

pub fn label_name(case: usize) -> String {
    format!("case_{case:03}_label.mmuv")
}

/// `case,split,count_0..` with one row per sample.
pub fn histogram_csv(ds: &SyntheticDataset) -> String {
    let k = ds.config.classes;
    let mut s = String::from("case,split");
    for c in 0..k {
        write!(s, ",count_{c}").unwrap();
    }
    s.push('\n');
    let split = ds.split_index();
    for (i, smp) in ds.samples.iter().enumerate() {
        write!(s, "{i},{}", if i < split { "train" } else { "val" }).unwrap();
        for n in smp.class_counts(k) {
            write!(s, ",{n}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Writes every case plus `dataset.cfg` and `histogram.csv`; returns the
/// written file names in order.
pub fn write_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        VolumeFile::from_image(&s.image)?.write(&dir.join(image_name(i)))?;
        VolumeFile::from_labels(&s.labels, s.dims)?.write(&dir.join(label_name(i)))?;
        files.push(image_name(i));
        files.push(label_name(i));
    }
    std::fs::write(dir.join(DATASET_CFG), ds.config.to_kv().to_string())?;
    std::fs::write(dir.join(HISTOGRAM_CSV), histogram_csv(ds))?;
    files.push(DATASET_CFG.into());
    files.push(HISTOGRAM_CSV.into());
    Ok(files)
}

pub fn read_case(dir: &Path, case: usize) -> Result<Sample> {
    let image = VolumeFile::read(&dir.join(image_name(case)))?;
    let label = VolumeFile::read(&dir.join(label_name(case)))?;
    if image.spatial() != label.spatial() {
        return Err(Error::Format(format!(
            "case {case}: image extents {:?} differ from label extents {:?}",
            image.spatial(),
            label.spatial()
        )));
    }
    Ok(Sample {
        image: image.to_image()?,
        labels: label.labels()?.to_vec(),
        dims: image.spatial(),
    })
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let kv = KvConfig::load(&dir.join(DATASET_CFG))?;
    kv.check_keys(&SyntheticConfig::KEYS)?;
    let config = SyntheticConfig::from_kv(&kv)?;
    let samples = (0..config.count).map(|i| read_case(dir, i)).collect::<Result<Vec<_>>>()?;
    if let Some(bad) = samples.iter().flat_map(|s| &s.labels).find(|&&l| l as usize >= config.classes) {
        return Err(Error::Format(format!("label {bad} outside 0..{}", config.classes)));
    }
    Ok(SyntheticDataset { config, samples })
}
