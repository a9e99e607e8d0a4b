use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

use super::cpt::{read_tensor, write_tensor};
use super::{create_dir, read_text, write_bytes};

const IMAGES: &str = "images.cpt";
const LABELS: &str = "labels.csv";
const INFO: &str = "dataset.toml";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetInfo {
    num_classes: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    index: usize,
    label: usize,
}

pub fn save_dataset(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_tensor(&dir.join(IMAGES), ds.images())?;
    let mut w = csv::Writer::from_path(dir.join(LABELS))?;
    for (index, &label) in ds.labels().iter().enumerate() {
        w.serialize(LabelRow { index, label })?;
    }
    w.flush().map_err(|e| Error::io(dir.join(LABELS), e))?;
    let info = DatasetInfo {
        num_classes: ds.num_classes(),
        count: ds.len(),
    };
    let text = toml::to_string(&info).map_err(|e| Error::invalid(e.to_string()))?;
    write_bytes(&dir.join(INFO), text.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let info_path = dir.join(INFO);
    let info: DatasetInfo =
        toml::from_str(&read_text(&info_path)?).map_err(|e| Error::format(&info_path, e.message().to_string()))?;
    let images = read_tensor(&dir.join(IMAGES))?;
    let labels_path = dir.join(LABELS);
    let mut labels = Vec::with_capacity(info.count);
    let mut r = csv::Reader::from_path(&labels_path)?;
    for (i, row) in r.deserialize::<LabelRow>().enumerate() {
        let row = row?;
        if row.index != i {
            return Err(Error::format(&labels_path, format!("row {i} has index {}", row.index)));
        }
        labels.push(row.label);
    }
    if labels.len() != info.count {
        return Err(Error::format(
            &labels_path,
            format!("{} labels, dataset.toml says {}", labels.len(), info.count),
        ));
    }
    LabeledDataset::new(images, labels, info.num_classes)
}
