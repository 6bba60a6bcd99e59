use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Dataset, DatasetManifest, EegTrial, Split, VisualFeatureStack, MANIFEST_FILE, MANIFEST_VERSION};
use crate::error::{Error, Result};

const LABELS_HEADER: [&str; 6] = ["trial", "subject", "concept", "image", "category", "split"];

fn encode_f32(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes manifest, binary arrays and labels into `dir` (created if needed).
/// The manifest written carries SHA-256 checksums of every array file.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &dataset.manifest;
    let mut checksums = BTreeMap::new();

    let eeg = encode_f32(dataset.trials.iter().flat_map(|t| t.signal.iter().copied()));
    write_file(&dir.join(&m.files.eeg), &eeg)?;
    checksums.insert(m.files.eeg.clone(), sha256_hex(&eeg));

    for (k, name) in m.files.features.iter().enumerate() {
        let bytes = encode_f32(
            dataset
                .features
                .iter()
                .flat_map(|s| s.layers[k].iter().copied()),
        );
        write_file(&dir.join(name), &bytes)?;
        checksums.insert(name.clone(), sha256_hex(&bytes));
    }

    let labels_path = dir.join(&m.files.labels);
    let mut w = csv::Writer::from_path(&labels_path).map_err(|e| csv_err(&labels_path, e))?;
    w.write_record(LABELS_HEADER)
        .map_err(|e| csv_err(&labels_path, e))?;
    for (i, t) in dataset.trials.iter().enumerate() {
        w.write_record([
            i.to_string(),
            t.subject.to_string(),
            t.concept.to_string(),
            t.image.to_string(),
            t.category.to_string(),
            t.split.as_str().to_string(),
        ])
        .map_err(|e| csv_err(&labels_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;

    let mut manifest = m.clone();
    manifest.checksums = Some(checksums);
    let json = serde_json::to_string_pretty(&manifest)?;
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn read_array(path: &Path, name: &str, rows: usize, cols: usize) -> Result<(Vec<f32>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (rows * cols * 4) as u64;
    let actual = bytes.len() as u64;
    if actual != expected {
        // A whole number of rows with the wrong width is a dimension error.
        if rows > 0 && actual.is_multiple_of(rows as u64 * 4) {
            return Err(Error::dim(
                format!("{name} ({}) floats per row", path.display()),
                cols,
                (actual / (rows as u64 * 4)) as usize,
            ));
        }
        return Err(Error::Truncated {
            name: name.to_string(),
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: name.to_string(),
            index,
        });
    }
    Ok((values, bytes))
}

fn verify_checksum(manifest: &DatasetManifest, file: &str, path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(expected) = manifest.checksums.as_ref().and_then(|c| c.get(file)) {
        let actual = sha256_hex(bytes);
        if &actual != expected {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("checksum mismatch (expected {expected}, got {actual})"),
            });
        }
    }
    Ok(())
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a dataset from a manifest path (or the directory holding
/// `manifest.json`), validating sizes, checksums, labels and finiteness.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let dir = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            path: mpath,
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    if manifest.channels == 0 || manifest.time_samples == 0 || manifest.layers.is_empty() {
        return Err(Error::Format {
            path: mpath,
            reason: "C, Tt and the layer list must be non-empty".into(),
        });
    }
    if manifest.files.features.len() != manifest.layers.len() {
        return Err(Error::dim(
            "manifest feature file list",
            manifest.layers.len(),
            manifest.files.features.len(),
        ));
    }

    let n_img = manifest.num_images();
    let mut layer_values = Vec::with_capacity(manifest.layers.len());
    for (spec, file) in manifest.layers.iter().zip(&manifest.files.features) {
        let p = dir.join(file);
        let (values, bytes) = read_array(&p, file, n_img, spec.dim)?;
        verify_checksum(&manifest, file, &p, &bytes)?;
        layer_values.push(values);
    }
    let features = (0..n_img)
        .map(|image| VisualFeatureStack {
            image,
            layers: manifest
                .layers
                .iter()
                .zip(&layer_values)
                .map(|(spec, v)| v[image * spec.dim..(image + 1) * spec.dim].to_vec())
                .collect(),
        })
        .collect();

    let sig_len = manifest.signal_len();
    let eeg_path = dir.join(&manifest.files.eeg);
    let (eeg, eeg_bytes) = read_array(&eeg_path, &manifest.files.eeg, manifest.trials, sig_len)?;
    verify_checksum(&manifest, &manifest.files.eeg, &eeg_path, &eeg_bytes)?;

    let labels_path = dir.join(&manifest.files.labels);
    let mut reader = csv::Reader::from_path(&labels_path).map_err(|e| csv_err(&labels_path, e))?;
    let header = reader.headers().map_err(|e| csv_err(&labels_path, e))?;
    if header.iter().ne(LABELS_HEADER) {
        return Err(Error::Format {
            path: labels_path,
            reason: format!("header must be `{}`", LABELS_HEADER.join(",")),
        });
    }
    let mut trials = Vec::with_capacity(manifest.trials);
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(&labels_path, e))?;
        let bad = |what: &str| Error::Format {
            path: labels_path.clone(),
            reason: format!("row {}: invalid {what}", row + 1),
        };
        let field = |i: usize, what: &str| -> Result<usize> {
            rec.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(what))
        };
        if field(0, "trial")? != row {
            return Err(bad("trial index"));
        }
        let subject = field(1, "subject")?;
        let concept = field(2, "concept")?;
        let image = field(3, "image")?;
        let category = field(4, "category")?;
        let split = rec.get(5).and_then(Split::parse).ok_or_else(|| bad("split"))?;
        if subject >= manifest.subjects || concept >= manifest.concepts || image >= n_img {
            return Err(bad("id (out of range)"));
        }
        if manifest.concept_of_image(image) != concept {
            return Err(bad("image/concept pairing"));
        }
        if row >= manifest.trials {
            return Err(bad("row count (more rows than manifest trials)"));
        }
        trials.push(EegTrial {
            signal: eeg[row * sig_len..(row + 1) * sig_len].to_vec(),
            subject,
            concept,
            image,
            category,
            split,
        });
    }
    if trials.len() != manifest.trials {
        return Err(Error::dim("labels.csv rows", manifest.trials, trials.len()));
    }
    let dataset = Dataset {
        manifest,
        trials,
        features,
    };
    // Enforces the zero-shot invariant on the stored labels.
    super::ConceptPartition::from_labels(&dataset)?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn small() -> Dataset {
        generate_synthetic(
            &SynthConfig {
                subjects: 2,
                concepts: 10,
                images_per_concept: 2,
                channels: 2,
                time_samples: 4,
                ..SynthConfig::default()
            },
            4,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let written = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.trials, ds.trials);
        assert_eq!(loaded.features, ds.features);
        assert_eq!(loaded.manifest, written);
    }

    #[test]
    fn narrow_feature_rows_are_a_dimension_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let f = dir.path().join("feat_layer_20.bin");
        let n_img = 20;
        let bytes = vec![0u8; n_img * 15 * 4];
        fs::write(&f, bytes).unwrap();
        // Drop checksums so the size check is what fires.
        let mp = dir.path().join(MANIFEST_FILE);
        let mut m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&mp).unwrap()).unwrap();
        m.checksums = None;
        fs::write(&mp, serde_json::to_string(&m).unwrap()).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Dimension { expected, actual, .. }) => {
                assert_eq!((expected, actual), (16, 15));
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_eeg_names_file_and_byte_count() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let f = dir.path().join("eeg.bin");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("eeg.bin"), "{msg}");
        assert!(msg.contains(&bytes.len().to_string()), "{msg}");
    }

    #[test]
    fn non_finite_values_name_the_array() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let f = dir.path().join("feat_layer_28.bin");
        let mut bytes = fs::read(&f).unwrap();
        bytes[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&f, bytes).unwrap();
        let mp = dir.path().join(MANIFEST_FILE);
        let mut m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&mp).unwrap()).unwrap();
        m.checksums = None;
        fs::write(&mp, serde_json::to_string(&m).unwrap()).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::NonFinite { name, index }) => {
                assert_eq!(name, "feat_layer_28.bin");
                assert_eq!(index, 2);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn checksum_mismatch_is_detected() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let f = dir.path().join("eeg.bin");
        let mut bytes = fs::read(&f).unwrap();
        bytes[0] ^= 1;
        fs::write(&f, bytes).unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn missing_file_is_io_error() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("feat_layer_36.bin")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("feat_layer_36.bin"));
    }
}
