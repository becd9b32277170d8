//! On-disk dataset formats.
//!
//! - Manifest: JSON array of `{"id", "label", "features", "coords"?}` with
//!   paths relative to the manifest.
//! - Feature file: magic `MILF`, little-endian u32 version=1, u32
//!   n_instances, u32 dim, then `n * dim` f32 values row-major.
//! - Coords file: CSV `index,row,col` with header.

use super::{Bag, Dataset, Instance, Provenance};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const MILF_MAGIC: &[u8; 4] = b"MILF";
const MILF_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    label: i64,
    features: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    coords: Option<String>,
}

fn format_err(file: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Write one bag's features. Values pass through f32, matching the read
/// path bit for bit.
pub fn write_milf(path: &Path, features: &[Vec<f64>]) -> Result<()> {
    if features.is_empty() {
        return Err(Error::EmptyInput(format!("write_milf {}", path.display())));
    }
    let dim = features[0].len();
    let mut buf = Vec::with_capacity(16 + features.len() * dim * 4);
    buf.extend_from_slice(MILF_MAGIC);
    buf.extend_from_slice(&MILF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for row in features {
        if row.len() != dim {
            return Err(Error::shape("write_milf row", &[dim], &[row.len()]));
        }
        for &v in row {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Read one feature file; returns row-major instance features.
pub fn read_milf(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(format_err(path, 0, "file shorter than header"));
    }
    if &bytes[0..4] != MILF_MAGIC {
        return Err(format_err(path, 0, "bad magic, expected MILF"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != MILF_VERSION {
        return Err(format_err(path, 4, format!("unsupported version {version}")));
    }
    let n = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    if n == 0 || dim == 0 {
        return Err(format_err(path, 8, format!("degenerate counts n={n} dim={dim}")));
    }
    let expected = 16 + n * dim * 4;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            16,
            format!("declared {n}x{dim} needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(dim);
        for j in 0..dim {
            let off = 16 + (i * dim + j) * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(format_err(path, off as u64, "non-finite feature value"));
            }
            row.push(v as f64);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn write_coords(path: &Path, bag: &Bag) -> Result<()> {
    let mut out = String::from("index,row,col\n");
    for (j, inst) in bag.instances.iter().enumerate() {
        let (r, c) = inst.coord.expect("caller checked coords");
        out.push_str(&format!("{j},{r},{c}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_coords(path: &Path, n: usize) -> Result<Vec<(u32, u32)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "index,row,col" => {}
        _ => return Err(format_err(path, 0, "missing index,row,col header")),
    }
    let mut coords = vec![None; n];
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let parsed = (|| -> Option<(usize, u32, u32)> {
            if parts.len() != 3 {
                return None;
            }
            Some((
                parts[0].trim().parse().ok()?,
                parts[1].trim().parse().ok()?,
                parts[2].trim().parse().ok()?,
            ))
        })();
        let (idx, r, c) = parsed
            .ok_or_else(|| format_err(path, lineno as u64, format!("unparseable line {line:?}")))?;
        if idx >= n {
            return Err(format_err(path, lineno as u64, format!("index {idx} out of range")));
        }
        coords[idx] = Some((r, c));
    }
    coords
        .into_iter()
        .enumerate()
        .map(|(j, c)| c.ok_or_else(|| format_err(path, 0, format!("instance {j} has no coord row"))))
        .collect()
}

/// Write `manifest.json` plus one feature file (and optional coords file)
/// per bag into `out_dir`.
pub fn save_dataset(dataset: &Dataset, out_dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(dataset.bags.len());
    for bag in &dataset.bags {
        let feat_name = format!("{}.milf", bag.id);
        let features: Vec<Vec<f64>> =
            bag.instances.iter().map(|i| i.features.clone()).collect();
        write_milf(&out_dir.join(&feat_name), &features)?;
        let coords_name = if bag.instances.iter().all(|i| i.coord.is_some()) {
            let name = format!("{}.coords.csv", bag.id);
            write_coords(&out_dir.join(&name), bag)?;
            Some(name)
        } else {
            None
        };
        entries.push(ManifestEntry {
            id: bag.id.clone(),
            label: bag.label as i64,
            features: feat_name,
            coords: coords_name,
        });
    }
    let manifest_path = out_dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&entries)?)?;
    Ok(manifest_path)
}

/// Load a dataset from a manifest. Truth labels are absent (real data has
/// none); coords attach when the manifest provides them.
pub fn load_features(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| format_err(manifest_path, 0, format!("manifest parse: {e}")))?;
    if entries.is_empty() {
        return Err(Error::Validation(format!(
            "manifest {} lists no bags",
            manifest_path.display()
        )));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut bags = Vec::with_capacity(entries.len());
    let mut d_in = None;
    for entry in entries {
        if entry.label != 0 && entry.label != 1 {
            return Err(Error::Validation(format!(
                "bag {}: label must be 0 or 1, got {}",
                entry.id, entry.label
            )));
        }
        let rows = read_milf(&base.join(&entry.features))?;
        let dim = rows[0].len();
        match d_in {
            None => d_in = Some(dim),
            Some(d) if d != dim => {
                return Err(Error::Validation(format!(
                    "bag {}: feature dim {dim} != dataset d_in {d}",
                    entry.id
                )))
            }
            _ => {}
        }
        let coords = match &entry.coords {
            Some(rel) => Some(read_coords(&base.join(rel), rows.len())?),
            None => None,
        };
        let instances = rows
            .into_iter()
            .enumerate()
            .map(|(j, features)| Instance {
                features,
                truth_label: None,
                coord: coords.as_ref().map(|c| c[j]),
            })
            .collect();
        bags.push(Bag {
            id: entry.id,
            label: entry.label as u8,
            instances,
        });
    }
    let ds = Dataset {
        bags,
        d_in: d_in.expect("nonempty manifest"),
        provenance: Provenance::Manifest(manifest_path.to_path_buf()),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn milf_count_identity_and_truncation() {
        let dir = tmp();
        let path = dir.path().join("b.milf");
        write_milf(&path, &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let rows = read_milf(&path).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], vec![1.0, 2.0]);

        // drop the last float: declared 3x2 but only 5 values
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, &bytes).unwrap();
        let err = read_milf(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let dir = tmp();
        let path = dir.path().join("b.milf");
        write_milf(&path, &[vec![1.0]]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(read_milf(&path).is_err());

        write_milf(&path, &[vec![1.0]]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(read_milf(&path).is_err());
    }

    #[test]
    fn non_binary_label_rejected() {
        let dir = tmp();
        let path = dir.path().join("b.milf");
        write_milf(&path, &[vec![1.0]]).unwrap();
        let manifest = dir.path().join("manifest.json");
        fs::write(
            &manifest,
            r#"[{"id":"b","label":2,"features":"b.milf"}]"#,
        )
        .unwrap();
        let err = load_features(&manifest).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let spec = SyntheticSpec {
            d_in: 3,
            bags_per_class: 3,
            instances_min: 4,
            instances_max: 6,
            witness_rate: 0.5,
            hard_negative_fraction: 0.2,
            mu_neg: 0.0,
            mu_pos: 1.5,
            alpha: 0.4,
            sigma: 0.3,
            grid_side: 3,
            seed: 11,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let dir = tmp();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_features(&manifest).unwrap();
        assert_eq!(loaded.bags.len(), ds.bags.len());
        for (a, b) in ds.bags.iter().zip(&loaded.bags) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            for (ia, ib) in a.instances.iter().zip(&b.instances) {
                assert_eq!(ia.features, ib.features, "features must survive bit-exactly");
                assert_eq!(ia.coord, ib.coord);
                assert_eq!(ib.truth_label, None);
            }
        }
    }
}
