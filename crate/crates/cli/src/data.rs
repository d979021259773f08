//! Phantom sets on disk: one `phantom_NNN` directory per instance holding
//! `params.json` and the vertebra, body and posterior masks.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use tps_partition::phantom::{Phantom, PhantomRecord};
use tps_partition::util::write_atomic;
use tps_partition::voxel::{read_mask, write_mask};

pub const MASKS: [&str; 3] = ["vertebra", "body", "posterior"];

pub fn phantom_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("phantom_{index:03}"))
}

/// Writes one phantom and returns the files written.
pub fn write_phantom(dir: &Path, p: &Phantom) -> anyhow::Result<Vec<PathBuf>> {
    let params = dir.join("params.json");
    write_atomic(
        &params,
        serde_json::to_string_pretty(&p.record())?.as_bytes(),
    )?;
    let mut written = vec![params];
    for (name, mask) in MASKS.iter().zip([&p.vertebra, &p.body, &p.posterior]) {
        let path = dir.join(format!("{name}.json"));
        write_mask(mask, &path)?;
        written.push(path.with_extension("raw"));
        written.push(path);
    }
    Ok(written)
}

fn read_phantom(dir: &Path) -> anyhow::Result<Phantom> {
    let params = dir.join("params.json");
    let record: PhantomRecord = serde_json::from_slice(
        &fs::read(&params).with_context(|| format!("reading {}", params.display()))?,
    )
    .with_context(|| format!("parsing {}", params.display()))?;
    let load = |name: &str| {
        let path = dir.join(format!("{name}.json"));
        read_mask(&path).with_context(|| format!("reading mask {}", path.display()))
    };
    Ok(Phantom {
        vertebra: load("vertebra")?,
        body: load("body")?,
        posterior: load("posterior")?,
        params: record.params,
        true_boundary: record.true_boundary,
        label: record.label,
    })
}

/// Loads every `phantom_*` directory under `root`, in name order.
pub fn read_phantoms(root: &Path) -> anyhow::Result<Vec<Phantom>> {
    let entries =
        fs::read_dir(root).with_context(|| format!("missing phantom set {}", root.display()))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("phantom_"))
        })
        .collect();
    if dirs.is_empty() {
        bail!("no phantom_* directories in {}", root.display());
    }
    dirs.sort();
    dirs.iter().map(|d| read_phantom(d)).collect()
}
