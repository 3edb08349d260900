//! Overlap, distance and volume metrics per target structure, per-case
//! evaluation, fold aggregation, and paired method comparison.

mod metrics;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use metrics::*;
pub use stats::*;

use crate::data::{load_mask, ClassScheme, DatasetManifest, FoldSplit, LabelMask, MVO, MYOCARDIUM, SCAR};
use crate::error::{Error, Result};
use crate::inference::{predict_cascade, write_prediction, InferenceConfig, MaskFormat};
use crate::networks::load_checkpoint;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dsc,
    Avd,
    Haus,
    Avdr,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Dsc => "DSC",
            Metric::Avd => "AVD",
            Metric::Haus => "HAUS",
            Metric::Avdr => "AVDR",
        }
    }

    /// Unit of the reported value (fractions are reported as percentages).
    pub fn unit(self) -> &'static str {
        match self {
            Metric::Dsc | Metric::Avdr => "%",
            Metric::Avd => "mm3",
            Metric::Haus => "mm",
        }
    }

    fn scale(self) -> f64 {
        match self {
            Metric::Dsc | Metric::Avdr => 100.0,
            _ => 1.0,
        }
    }
}

/// A structure evaluated as the union of some labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetDef {
    pub name: String,
    pub classes: Vec<u8>,
    /// Metrics shown in the summary table for this target.
    pub rows: Vec<Metric>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub targets: Vec<TargetDef>,
    /// Reference labels whose volume normalises AVDR.
    pub myocardium_classes: Vec<u8>,
}

impl EvaluationConfig {
    /// Myocardium as the union of healthy, scarred and obstructed tissue;
    /// infarction as scar plus MVO.
    pub fn for_scheme(scheme: ClassScheme) -> Self {
        Self::with_unions(scheme, true, true)
    }

    pub fn with_unions(scheme: ClassScheme, myocardium_union: bool, infarction_includes_mvo: bool) -> Self {
        let mvo = scheme.has_mvo();
        let mut myo = vec![MYOCARDIUM];
        if myocardium_union {
            myo.push(SCAR);
            if mvo {
                myo.push(MVO);
            }
        }
        let mut inf = vec![SCAR];
        if infarction_includes_mvo && mvo {
            inf.push(MVO);
        }
        let mut targets = vec![
            TargetDef {
                name: "myocardium".into(),
                classes: myo.clone(),
                rows: vec![Metric::Dsc, Metric::Avd, Metric::Haus],
            },
            TargetDef {
                name: "infarction".into(),
                classes: inf,
                rows: vec![Metric::Dsc, Metric::Avd, Metric::Avdr],
            },
        ];
        if mvo {
            targets.push(TargetDef {
                name: "mvo".into(),
                classes: vec![MVO],
                rows: vec![Metric::Dsc, Metric::Avd, Metric::Avdr],
            });
        }
        EvaluationConfig {
            targets,
            myocardium_classes: myo,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub dsc: f64,
    /// `None` when either structure is empty.
    pub haus_mm: Option<f64>,
    pub avd_mm3: f64,
    /// `None` when the reference myocardium is empty.
    pub avdr: Option<f64>,
    pub pred_empty: bool,
    pub gt_empty: bool,
}

impl TargetMetrics {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Dsc => Some(self.dsc),
            Metric::Avd => Some(self.avd_mm3),
            Metric::Haus => self.haus_mm,
            Metric::Avdr => self.avdr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub targets: BTreeMap<String, TargetMetrics>,
}

pub fn evaluate_case(case_id: &str, pred: &LabelMask, gt: &LabelMask, config: &EvaluationConfig) -> Result<CaseMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "case {case_id}: prediction {:?} vs reference {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let spacing = gt.spacing();
    let myo = gt.binary(&config.myocardium_classes);
    let myo_empty = !myo.iter().any(|&b| b);
    let mut targets = BTreeMap::new();
    for t in &config.targets {
        let p = pred.binary(&t.classes);
        let g = gt.binary(&t.classes);
        targets.insert(
            t.name.clone(),
            TargetMetrics {
                dsc: dsc(&p, &g)?,
                haus_mm: hausdorff_mm(&p, &g, gt.shape(), spacing)?,
                avd_mm3: avd(&p, &g, spacing)?,
                avdr: if myo_empty { None } else { Some(avdr(&p, &g, &myo, spacing)?) },
                pred_empty: !p.iter().any(|&b| b),
                gt_empty: !g.iter().any(|&b| b),
            },
        );
    }
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        targets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub fold: usize,
    pub cases: Vec<CaseMetrics>,
    /// Mean of each tabulated metric over the fold's cases, in report units;
    /// `None` when no case defines it.
    pub means: BTreeMap<String, BTreeMap<Metric, Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub target: String,
    pub metric: Metric,
    pub unit: String,
    pub fold_values: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub config: EvaluationConfig,
    pub folds: Vec<FoldEntry>,
    pub rows: Vec<SummaryRow>,
    pub sd_convention: String,
}

fn opt_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

/// Aggregates per-case metrics grouped by fold. Cases are ordered by id, and
/// the cross-fold SD uses the population convention.
pub fn aggregate_folds(config: &EvaluationConfig, folds: Vec<(usize, Vec<CaseMetrics>)>) -> FoldReport {
    let mut entries: Vec<FoldEntry> = folds
        .into_iter()
        .map(|(fold, mut cases)| {
            cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
            let means = config
                .targets
                .iter()
                .map(|t| {
                    let row = t
                        .rows
                        .iter()
                        .map(|&m| {
                            let v = opt_mean(cases.iter().map(|c| c.targets.get(&t.name).and_then(|x| x.get(m))));
                            (m, v.map(|x| x * m.scale()))
                        })
                        .collect();
                    (t.name.clone(), row)
                })
                .collect();
            FoldEntry { fold, cases, means }
        })
        .collect();
    entries.sort_by_key(|f| f.fold);
    let rows = config
        .targets
        .iter()
        .flat_map(|t| t.rows.iter().map(move |&m| (t, m)))
        .map(|(t, m)| {
            let fold_values: Vec<Option<f64>> = entries.iter().map(|f| f.means[&t.name][&m]).collect();
            let present: Vec<f64> = fold_values.iter().flatten().copied().collect();
            SummaryRow {
                target: t.name.clone(),
                metric: m,
                unit: m.unit().into(),
                mean: (!present.is_empty()).then(|| mean(&present)),
                sd: (!present.is_empty()).then(|| population_sd(&present)),
                fold_values,
            }
        })
        .collect();
    FoldReport {
        config: config.clone(),
        folds: entries,
        rows,
        sd_convention: "population".into(),
    }
}

impl FoldReport {
    /// Recomputes every aggregate from the stored per-case metrics.
    pub fn reaggregate(&self) -> FoldReport {
        aggregate_folds(
            &self.config,
            self.folds.iter().map(|f| (f.fold, f.cases.clone())).collect(),
        )
    }

    pub fn row(&self, target: &str, metric: Metric) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.target == target && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
        let mut s = String::from("target,metric,unit");
        for f in &self.folds {
            let _ = write!(s, ",fold_{}", f.fold + 1);
        }
        s.push_str(",mean,sd\n");
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.target, r.metric.name(), r.unit);
            for v in &r.fold_values {
                let _ = write!(s, ",{}", fmt(*v));
            }
            let _ = writeln!(s, ",{},{}", fmt(r.mean), fmt(r.sd));
        }
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let j = dir.join("report.json");
        fs::write(&j, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&j, e))?;
        let c = dir.join("report.csv");
        fs::write(&c, self.to_csv()).map_err(|e| Error::io(&c, e))?;
        Ok(())
    }
}

/// Finds a case's mask in a prediction directory (`.nii.gz`, `.nii` or raw `.u8`).
pub fn find_prediction(dir: &Path, case_id: &str) -> Option<PathBuf> {
    ["nii.gz", "nii", "u8"]
        .iter()
        .map(|ext| dir.join(format!("{case_id}.{ext}")))
        .find(|p| p.exists())
}

/// Evaluates every manifest case that has a reference mask against the
/// masks in `pred_dir`.
pub fn evaluate_directory(pred_dir: &Path, manifest: &DatasetManifest, config: &EvaluationConfig) -> Result<Vec<CaseMetrics>> {
    let entries: Vec<_> = manifest.entries.iter().filter(|e| e.mask_path.is_some()).collect();
    let out = par::map(&entries, |e| -> Result<CaseMetrics> {
        let p = find_prediction(pred_dir, &e.case_id)
            .ok_or_else(|| Error::Input(format!("no prediction for case {:?} in {}", e.case_id, pred_dir.display())))?;
        let pred = load_mask(&p, manifest.scheme)?;
        let gt = load_mask(e.mask_path.as_ref().expect("filtered"), manifest.scheme)?;
        evaluate_case(&e.case_id, &pred, &gt, config)
    });
    out.into_iter().collect()
}

/// One trained model pair per fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldModels {
    pub checkpoint_2d: PathBuf,
    pub checkpoint_3d: PathBuf,
}

/// Predicts every validation case of every fold with that fold's models and
/// aggregates the metrics. Predictions are written under
/// `pred_root/fold_{k}` when a root is given.
pub fn cross_validate(
    manifest: &DatasetManifest,
    split: &FoldSplit,
    models: &[FoldModels],
    inference: &InferenceConfig,
    config: &EvaluationConfig,
    pred_root: Option<&Path>,
) -> Result<FoldReport> {
    if models.len() != split.folds.len() {
        return Err(Error::Input(format!(
            "{} folds but {} checkpoint pairs",
            split.folds.len(),
            models.len()
        )));
    }
    let mut folds = Vec::with_capacity(models.len());
    for (k, (fold, m)) in split.folds.iter().zip(models).enumerate() {
        for p in [&m.checkpoint_2d, &m.checkpoint_3d] {
            if !p.exists() {
                return Err(Error::Input(format!("fold {k}: missing checkpoint {}", p.display())));
            }
        }
        let n2 = load_checkpoint(&m.checkpoint_2d, None)?;
        let n3 = load_checkpoint(&m.checkpoint_3d, None)?;
        let mut cases = Vec::with_capacity(fold.val_ids.len());
        for id in &fold.val_ids {
            let e = manifest
                .entry(id)
                .ok_or_else(|| Error::Input(format!("case {id:?} not in manifest")))?;
            let (vol, gt) = crate::data::load_case(e, manifest.scheme)?;
            let gt = gt.ok_or_else(|| Error::Input(format!("validation case {id:?} has no mask")))?;
            let pred = predict_cascade(&n2, &n3, &vol, e.lv_center, inference)?;
            if let Some(root) = pred_root {
                write_prediction(&root.join(format!("fold_{k}")), &pred, MaskFormat::Raw)?;
            }
            cases.push(evaluate_case(id, &pred.labels, &gt, config)?);
        }
        folds.push((k, cases));
    }
    Ok(aggregate_folds(config, folds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub target: String,
    pub metric: Metric,
    pub n: usize,
    pub mean_a: f64,
    pub sd_a: f64,
    pub mean_b: f64,
    pub sd_b: f64,
    pub wilcoxon: WilcoxonResult,
}

/// Paired comparison of two methods on the same cases for one target metric.
pub fn compare_methods(a: &[CaseMetrics], b: &[CaseMetrics], target: &str, metric: Metric) -> Result<MethodComparison> {
    let ids_a: BTreeSet<&str> = a.iter().map(|c| c.case_id.as_str()).collect();
    let ids_b: BTreeSet<&str> = b.iter().map(|c| c.case_id.as_str()).collect();
    if ids_a != ids_b || ids_a.len() != a.len() || ids_b.len() != b.len() {
        return Err(Error::Input("methods were evaluated on different case sets".into()));
    }
    let value = |set: &[CaseMetrics], id: &str| -> Result<f64> {
        set.iter()
            .find(|c| c.case_id == id)
            .and_then(|c| c.targets.get(target))
            .and_then(|t| t.get(metric))
            .ok_or_else(|| Error::Input(format!("case {id:?} lacks {target} {}", metric.name())))
    };
    let mut va = Vec::with_capacity(a.len());
    let mut vb = Vec::with_capacity(a.len());
    for id in &ids_a {
        va.push(value(a, id)?);
        vb.push(value(b, id)?);
    }
    Ok(MethodComparison {
        target: target.into(),
        metric,
        n: va.len(),
        mean_a: mean(&va),
        sd_a: population_sd(&va),
        mean_b: mean(&vb),
        sd_b: population_sd(&vb),
        wilcoxon: wilcoxon_signed_rank(&va, &vb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Spacing, BLOOD_POOL};

    fn mask(labels: Vec<u8>, shape: [usize; 3]) -> LabelMask {
        LabelMask::new(shape, Spacing([10.0, 1.458, 1.458]), ClassScheme::Emidec, labels).unwrap()
    }

    #[test]
    fn identical_masks_score_perfectly() {
        let l: Vec<u8> = (0..64).map(|i| (i % 5) as u8).collect();
        let m = mask(l, [4, 4, 4]);
        let c = evaluate_case("a", &m, &m, &EvaluationConfig::for_scheme(ClassScheme::Emidec)).unwrap();
        for t in c.targets.values() {
            assert_eq!(t.dsc, 1.0);
            assert_eq!(t.avd_mm3, 0.0);
            assert_eq!(t.haus_mm, Some(0.0));
            assert_eq!(t.avdr, Some(0.0));
        }
    }

    #[test]
    fn healthy_case_with_empty_prediction() {
        let l: Vec<u8> = (0..64).map(|i| if i % 3 == 0 { MYOCARDIUM } else { BLOOD_POOL }).collect();
        let m = mask(l, [4, 4, 4]);
        let c = evaluate_case("h", &m, &m, &EvaluationConfig::for_scheme(ClassScheme::Emidec)).unwrap();
        let inf = &c.targets["infarction"];
        assert_eq!(inf.dsc, 1.0);
        assert_eq!(inf.avd_mm3, 0.0);
        assert_eq!(inf.haus_mm, None);
        assert!(inf.pred_empty && inf.gt_empty);
    }

    #[test]
    fn targets_are_label_unions() {
        let cfg = EvaluationConfig::for_scheme(ClassScheme::Emidec);
        let l: Vec<u8> = (0..60).map(|i| (i * 7 % 5) as u8).collect();
        let m = mask(l.clone(), [3, 4, 5]);
        let by_name = |n: &str| cfg.targets.iter().find(|t| t.name == n).unwrap().classes.clone();
        assert_eq!(m.binary(&by_name("myocardium")), l.iter().map(|&v| v == 2 || v == 3 || v == 4).collect::<Vec<_>>());
        assert_eq!(m.binary(&by_name("infarction")), l.iter().map(|&v| v == 3 || v == 4).collect::<Vec<_>>());
        assert_eq!(m.binary(&by_name("mvo")), l.iter().map(|&v| v == 4).collect::<Vec<_>>());
        let myops = EvaluationConfig::for_scheme(ClassScheme::Myops);
        assert_eq!(myops.targets.len(), 2);
        assert_eq!(myops.myocardium_classes, vec![2, 3]);
    }

    fn stub(fold_means: &[f64]) -> FoldReport {
        let cfg = EvaluationConfig::for_scheme(ClassScheme::Emidec);
        let folds = fold_means
            .iter()
            .enumerate()
            .map(|(k, &m)| {
                let t = TargetMetrics {
                    dsc: m / 100.0,
                    haus_mm: None,
                    avd_mm3: 0.0,
                    avdr: Some(0.0),
                    pred_empty: false,
                    gt_empty: false,
                };
                let targets = [("myocardium", t.clone()), ("infarction", t.clone()), ("mvo", t)]
                    .into_iter()
                    .map(|(n, t)| (n.to_string(), t))
                    .collect();
                (k, vec![CaseMetrics { case_id: format!("c{k}"), targets }])
            })
            .collect();
        aggregate_folds(&cfg, folds)
    }

    #[test]
    fn fold_table_mean_and_sd() {
        let r = stub(&[76.54, 70.64, 79.75, 77.70, 75.54]);
        let row = r.row("infarction", Metric::Dsc).unwrap();
        assert!((row.mean.unwrap() - 76.03).abs() < 0.01);
        assert!((row.sd.unwrap() - 3.04).abs() < 0.01);
        assert_eq!(r.row("myocardium", Metric::Haus).unwrap().mean, None);
        let same = stub(&[50.0; 5]);
        assert_eq!(same.row("infarction", Metric::Dsc).unwrap().sd, Some(0.0));
        assert_eq!(r.reaggregate(), r);
        let csv = r.to_csv();
        assert!(csv.starts_with("target,metric,unit,fold_1,fold_2,fold_3,fold_4,fold_5,mean,sd\n"));
        assert!(csv.contains("infarction,DSC,%,76.5400,70.6400,79.7500,77.7000,75.5400,76.0340,3.0391"));
    }

    #[test]
    fn report_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let r = stub(&[60.0, 70.0]);
        r.write(dir.path()).unwrap();
        let back: FoldReport = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back.reaggregate(), r);
        assert!(dir.path().join("report.csv").exists());
    }

    #[test]
    fn comparison_requires_same_cases() {
        let r = stub(&[60.0, 70.0]);
        let cases: Vec<CaseMetrics> = r.folds.iter().flat_map(|f| f.cases.clone()).collect();
        let c = compare_methods(&cases, &cases, "infarction", Metric::Dsc).unwrap();
        assert_eq!(c.wilcoxon.p_value, 1.0);
        assert!(compare_methods(&cases, &cases[..1], "infarction", Metric::Dsc).is_err());
    }
}
