use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scheme::ClassScheme;
use super::volume::{LabelMask, Spacing, Volume};
use super::{nifti, raw};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub volume_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    /// In-plane `(y, x)` voxel coordinate of the left-ventricle center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lv_center: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scheme: ClassScheme,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    Full(DatasetManifest),
    List(Vec<ManifestEntry>),
}

impl DatasetManifest {
    pub fn new(scheme: ClassScheme, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest { scheme, entries };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::Input(format!("duplicate case id {:?} in manifest", e.case_id)));
            }
        }
        Ok(())
    }

    /// Reads a manifest and resolves relative paths against its directory.
    /// A bare JSON list of entries is accepted and taken as EMIDEC-labelled.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: ManifestFile =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let mut m = match parsed {
            ManifestFile::Full(m) => m,
            ManifestFile::List(entries) => DatasetManifest {
                scheme: ClassScheme::Emidec,
                entries,
            },
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if e.volume_path.is_relative() {
                e.volume_path = base.join(&e.volume_path);
            }
            if let Some(mp) = e.mask_path.as_mut() {
                if mp.is_relative() {
                    *mp = base.join(&*mp);
                }
            }
        }
        m.check_unique()?;
        for e in &m.entries {
            for p in std::iter::once(&e.volume_path).chain(e.mask_path.as_ref()) {
                if !p.exists() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest"),
                    ));
                }
            }
        }
        Ok(m)
    }

    /// Writes the manifest with paths relative to `path`'s directory where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        let out = DatasetManifest {
            scheme: self.scheme,
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    case_id: e.case_id.clone(),
                    volume_path: rel(&e.volume_path),
                    mask_path: e.mask_path.as_deref().map(rel),
                    lv_center: e.lv_center,
                })
                .collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&out)?).map_err(|e| Error::io(path, e))
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.case_id.clone()).collect()
    }

    pub fn entry(&self, case_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.case_id == case_id)
    }

    pub fn subset(&self, ids: &[String]) -> Result<DatasetManifest> {
        let entries = ids
            .iter()
            .map(|id| {
                self.entry(id)
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("case {id:?} not in manifest")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetManifest {
            scheme: self.scheme,
            entries,
        })
    }
}

fn spacing_close(a: Spacing, b: Spacing) -> bool {
    a.0.iter().zip(b.0.iter()).all(|(x, y)| (x - y).abs() <= 1e-4 * x.abs().max(y.abs()))
}

pub fn load_volume(path: &Path, case_id: &str) -> Result<Volume> {
    if nifti::is_nifti(path) {
        let v = nifti::read(path)?;
        let data = v.data.iter().map(|&x| x as f32).collect();
        Volume::new(case_id, v.shape, v.spacing, data)
    } else {
        let (h, data) = raw::read_f32(path)?;
        Volume::new(case_id, h.shape, Spacing(h.spacing), data)
    }
}

pub fn load_mask(path: &Path, scheme: ClassScheme) -> Result<LabelMask> {
    if nifti::is_nifti(path) {
        let v = nifti::read(path)?;
        let labels = v
            .data
            .iter()
            .map(|&x| {
                if x >= 0.0 && x <= 255.0 && x.fract() == 0.0 {
                    Ok(x as u8)
                } else {
                    Err(Error::format(path, format!("non-integer label value {x}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        LabelMask::new(v.shape, v.spacing, scheme, labels)
    } else {
        let (h, labels) = raw::read_u8(path)?;
        LabelMask::new(h.shape, Spacing(h.spacing), scheme, labels)
    }
}

/// Loads the image of a manifest entry and, when present, its label mask.
pub fn load_case(entry: &ManifestEntry, scheme: ClassScheme) -> Result<(Volume, Option<LabelMask>)> {
    let volume = load_volume(&entry.volume_path, &entry.case_id)?;
    let Some(mask_path) = &entry.mask_path else {
        return Ok((volume, None));
    };
    let mask = load_mask(mask_path, scheme)?;
    if mask.shape() != volume.shape() {
        return Err(Error::Shape(format!(
            "case {}: image shape {:?} but mask shape {:?}",
            entry.case_id,
            volume.shape(),
            mask.shape()
        )));
    }
    if !spacing_close(mask.spacing(), volume.spacing()) {
        return Err(Error::Shape(format!(
            "case {}: image spacing {:?} but mask spacing {:?}",
            entry.case_id,
            volume.spacing().0,
            mask.spacing().0
        )));
    }
    // The image spacing is authoritative for the pair.
    let mask = LabelMask::new(mask.shape(), volume.spacing(), scheme, mask.into_labels())?;
    Ok((volume, Some(mask)))
}

/// Writes a case in the raw format under `dir`, returning its manifest entry.
pub fn write_raw_case(
    dir: &Path,
    volume: &Volume,
    mask: Option<&LabelMask>,
    lv_center: Option<[usize; 2]>,
) -> Result<ManifestEntry> {
    let id = volume.case_id();
    let vol_path = dir.join(format!("{id}.f32"));
    raw::write_f32(&vol_path, id, volume.shape(), volume.spacing(), volume.data())?;
    let mask_path = match mask {
        Some(m) => {
            let p = dir.join(format!("{id}.u8"));
            raw::write_u8(&p, id, m.shape(), m.spacing(), m.labels())?;
            Some(p)
        }
        None => None,
    };
    Ok(ManifestEntry {
        case_id: id.to_string(),
        volume_path: vol_path,
        mask_path,
        lv_center,
    })
}

/// Writes a label mask in the format implied by `path` (NIfTI or raw `.u8`).
pub fn write_mask(path: &Path, case_id: &str, mask: &LabelMask) -> Result<()> {
    if nifti::is_nifti(path) {
        nifti::write_u8(path, mask.shape(), mask.spacing(), mask.labels())
    } else {
        raw::write_u8(path, case_id, mask.shape(), mask.spacing(), mask.labels())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spacing() -> Spacing {
        Spacing::new(10.0, 1.458, 1.458).unwrap()
    }

    #[test]
    fn raw_case_loads_with_attributes() {
        let dir = tempfile::tempdir().unwrap();
        let shape = [7, 256, 256];
        let data: Vec<f32> = (0..7 * 256 * 256).map(|i| (i % 97) as f32).collect();
        let vol = Volume::new("case1", shape, spacing(), data).unwrap();
        let entry = write_raw_case(dir.path(), &vol, None, None).unwrap();
        let (v, m) = load_case(&entry, ClassScheme::Emidec).unwrap();
        assert_eq!(v.shape(), shape);
        assert_eq!(v.spacing().0, [10.0, 1.458, 1.458]);
        assert!(m.is_none());
        assert_eq!(v, vol);
    }

    #[test]
    fn mask_out_of_scheme_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::new("c", [1, 2, 2], spacing(), vec![0.0; 4]).unwrap();
        let mut entry = write_raw_case(dir.path(), &vol, None, None).unwrap();
        let mp = dir.path().join("c.u8");
        std::fs::write(&mp, [0u8, 1, 7, 2]).unwrap();
        entry.mask_path = Some(mp);
        assert!(matches!(
            load_case(&entry, ClassScheme::Emidec),
            Err(Error::InvalidLabel { value: 7, .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume::new("c", [1, 2, 2], spacing(), vec![0.0; 4]).unwrap();
        let mut entry = write_raw_case(dir.path(), &vol, None, None).unwrap();
        let mp = dir.path().join("m.nii");
        nifti::write_u8(&mp, [1, 2, 1], spacing(), &[0, 1]).unwrap();
        entry.mask_path = Some(mp);
        assert!(matches!(load_case(&entry, ClassScheme::Emidec), Err(Error::Shape(_))));
    }

    #[test]
    fn nifti_pair_and_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let shape = [2, 3, 4];
        nifti::write_f32(&dir.path().join("img.nii.gz"), shape, spacing(), &[1.0; 24]).unwrap();
        nifti::write_u8(&dir.path().join("lab.nii.gz"), shape, spacing(), &[3; 24]).unwrap();
        let m = DatasetManifest::new(
            ClassScheme::Emidec,
            vec![ManifestEntry {
                case_id: "p1".into(),
                volume_path: dir.path().join("img.nii.gz"),
                mask_path: Some(dir.path().join("lab.nii.gz")),
                lv_center: Some([1, 2]),
            }],
        )
        .unwrap();
        let mp = dir.path().join("manifest.json");
        m.save(&mp).unwrap();
        let text = std::fs::read_to_string(&mp).unwrap();
        assert!(text.contains("\"img.nii.gz\""));
        let back = DatasetManifest::load(&mp).unwrap();
        assert_eq!(back, m);
        let (v, mask) = load_case(&back.entries[0], back.scheme).unwrap();
        assert_eq!(v.shape(), mask.as_ref().unwrap().shape());
        assert_eq!(mask.unwrap().count(3), 24);
    }

    #[test]
    fn duplicate_ids_and_missing_files() {
        let e = ManifestEntry {
            case_id: "a".into(),
            volume_path: "nope.f32".into(),
            mask_path: None,
            lv_center: None,
        };
        assert!(DatasetManifest::new(ClassScheme::Emidec, vec![e.clone(), e.clone()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.json");
        std::fs::write(&mp, serde_json::to_string(&vec![e]).unwrap()).unwrap();
        assert!(matches!(DatasetManifest::load(&mp), Err(Error::Io { .. })));
    }
}
