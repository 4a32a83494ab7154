//! On-disk triplet store.
//!
//! ```text
//! <root>/manifest.csv          id,sigma,kernel_side,seed
//! <root>/<id>/truth.png
//! <root>/<id>/observed.png
//! <root>/<id>/kernel.txt       absent when kernel_side is 0 (identity model)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::degrade::{Degradation, Kernel, Triplet};
use crate::error::{Error, Result};
use crate::imageio::{load_rgb, save_png};

pub const MANIFEST: &str = "manifest.csv";
const HEADER: &str = "id,sigma,kernel_side,seed";

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry {
    pub id: String,
    pub sigma: f64,
    pub kernel_side: usize,
    pub seed: u64,
}

pub fn triplet_id(index: usize) -> String {
    format!("t{index:05}")
}

/// Writes triplets under `root`, which is created if missing.
pub fn write_store(root: &Path, triplets: &[Triplet]) -> Result<Vec<StoreEntry>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = format!("{HEADER}\n");
    let mut entries = Vec::with_capacity(triplets.len());
    for (i, t) in triplets.iter().enumerate() {
        let id = triplet_id(i);
        let dir = root.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_png(&dir.join("truth.png"), &t.truth)?;
        save_png(&dir.join("observed.png"), &t.observed)?;
        let side = match &t.degradation {
            Degradation::Blur(k) => {
                let p = dir.join("kernel.txt");
                fs::write(&p, k.to_text()).map_err(|e| Error::io(&p, e))?;
                k.side()
            }
            Degradation::Identity => 0,
        };
        let entry = StoreEntry {
            id,
            sigma: t.noise_sigma,
            kernel_side: side,
            seed: t.seed,
        };
        let _ = writeln!(
            manifest,
            "{},{},{},{}",
            entry.id, entry.sigma, entry.kernel_side, entry.seed
        );
        entries.push(entry);
    }
    let p = root.join(MANIFEST);
    fs::write(&p, manifest).map_err(|e| Error::io(&p, e))?;
    Ok(entries)
}

/// Parses `manifest.csv` under `root`.
pub fn read_manifest(root: &Path) -> Result<Vec<StoreEntry>> {
    let p = root.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HEADER => {}
        other => return Err(Error::invalid(format!("{}: unexpected header {other:?}", p.display()))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(row, line)| {
            let bad = |what: &str| Error::invalid(format!("{} row {row}: bad {what}", p.display()));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad("field count"));
            }
            Ok(StoreEntry {
                id: f[0].to_string(),
                sigma: f[1].parse().map_err(|_| bad("sigma"))?,
                kernel_side: f[2].parse().map_err(|_| bad("kernel_side"))?,
                seed: f[3].parse().map_err(|_| bad("seed"))?,
            })
        })
        .collect()
}

pub fn triplet_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}

/// Loads one triplet described by a manifest entry.
pub fn load_triplet(root: &Path, entry: &StoreEntry) -> Result<Triplet> {
    let dir = triplet_dir(root, &entry.id);
    let truth = load_rgb(&dir.join("truth.png"))?;
    let observed = load_rgb(&dir.join("observed.png"))?;
    let degradation = if entry.kernel_side == 0 {
        Degradation::Identity
    } else {
        let p = dir.join("kernel.txt");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let k = Kernel::from_text(&text)?;
        if k.side() != entry.kernel_side {
            return Err(Error::invalid(format!(
                "{}: kernel side {} disagrees with manifest {}",
                p.display(),
                k.side(),
                entry.kernel_side
            )));
        }
        Degradation::Blur(k)
    };
    truth.shape().ensure_eq("load_triplet", &observed.shape())?;
    Ok(Triplet {
        truth,
        degradation,
        observed,
        noise_sigma: entry.sigma,
        seed: entry.seed,
    })
}

/// Loads every triplet listed in the manifest.
pub fn read_store(root: &Path) -> Result<Vec<Triplet>> {
    read_manifest(root)?.iter().map(|e| load_triplet(root, e)).collect()
}
