//! Persistence: the CPT1 tensor format, network and CP manifests, datasets
//! and CSV reports.
//!
//! A model is a directory holding `network.toml` and one CPT1 blob per weight
//! tensor. A CP decomposition is a directory holding `cp.toml` and one CPT1
//! blob per factor matrix. A dataset is a directory holding `images.cpt`,
//! `labels.csv` and `dataset.toml`.

mod cpt;
mod csv_out;
mod dataset;
mod manifest;

pub use cpt::{decode, encode, read_tensor, write_tensor};
pub use csv_out::{write_history, write_reports};
pub use dataset::{load_dataset, save_dataset};
pub use manifest::{load_cp, load_network, save_cp, save_network, CpMeta, CP_MANIFEST, NETWORK_MANIFEST};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
