//! Two-stage cascade prediction: slice-wise planar network, then the
//! volumetric network on image plus hard mask channels, argmax, and
//! zero-padding back to the original field of view.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{write_mask, ClassScheme, LabelMask, Volume, BACKGROUND};
use crate::error::{Error, Result};
use crate::networks::{Network, NetworkKind, Tensor};
use crate::par;
use crate::perturbation::{AuxMasks, PerturbationRecord};
use crate::preprocess::{invert_z_mapping, prepare_case, resize_z_nearest, CropWindow, PreprocessConfig};

/// Planes per planar forward call.
const PLANAR_CHUNK: usize = 8;

/// Where the volumetric network's mask channels come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxSource {
    #[default]
    Predicted,
    /// All-zero channels, bypassing the planar network.
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub scheme: ClassScheme,
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub keep_probabilities: bool,
    /// Run the volumetric network on z-windows of this many slices, overlapping
    /// by one, and average the overlaps.
    #[serde(default)]
    pub z_chunk: Option<usize>,
    #[serde(default)]
    pub aux_source: AuxSource,
}

impl InferenceConfig {
    pub fn new(scheme: ClassScheme, preprocess: PreprocessConfig) -> Self {
        InferenceConfig {
            scheme,
            preprocess,
            keep_probabilities: false,
            z_chunk: None,
            aux_source: AuxSource::Predicted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub case_id: String,
    pub checkpoint_2d: String,
    pub checkpoint_3d: String,
    pub crop: CropWindow,
    /// Source slice of every network input slice when the stack was z-resized.
    pub z_mapping: Option<Vec<usize>>,
    pub aux_source: AuxSource,
}

#[derive(Clone, Debug)]
pub struct PredictionResult {
    /// Labels in the original field of view.
    pub labels: LabelMask,
    /// Per-class probabilities in the original field of view, when kept.
    pub probabilities: Option<Vec<Vec<f32>>>,
    pub provenance: Provenance,
}

/// Planar-network output for a stack.
#[derive(Clone, Debug)]
pub struct Stack2d {
    /// Softmax probabilities `[classes, slices, h, w]`.
    pub probabilities: Tensor,
    pub labels: Vec<u8>,
    pub aux: AuxMasks,
}

/// Stable identifier of a network's parameters (FNV-1a over the spec and weights).
pub fn checkpoint_id(net: &Network) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for b in serde_json::to_vec(net.spec()).unwrap_or_default() {
        eat(b);
    }
    for v in net.params().data() {
        v.to_le_bytes().into_iter().for_each(&mut eat);
    }
    format!("{h:016x}")
}

/// Per-voxel argmax over channels; ties go to the lowest class index.
pub fn argmax_tensor(t: &Tensor) -> Vec<u8> {
    let n = t.channel_len();
    let d = t.data();
    (0..n)
        .map(|i| {
            let mut best = 0usize;
            for c in 1..t.channels() {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Channel softmax of a score tensor.
pub fn softmax(t: &Tensor) -> Tensor {
    let n = t.channel_len();
    let c = t.channels();
    let mut out = t.clone();
    let d = out.data_mut();
    for i in 0..n {
        let m = (0..c).map(|k| d[k * n + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0f32;
        for k in 0..c {
            let e = (d[k * n + i] - m).exp();
            d[k * n + i] = e;
            s += e;
        }
        for k in 0..c {
            d[k * n + i] /= s;
        }
    }
    out
}

fn check_planar(net: &Network, scheme: ClassScheme) -> Result<()> {
    let s = net.spec();
    if s.kind != NetworkKind::Planar || s.in_channels != 1 || s.out_channels != scheme.num_classes() {
        return Err(Error::Config(format!(
            "planar network must map 1 channel to {} classes, got {:?} {}->{}",
            scheme.num_classes(),
            s.kind,
            s.in_channels,
            s.out_channels
        )));
    }
    Ok(())
}

fn check_volumetric(net: &Network, scheme: ClassScheme) -> Result<()> {
    let s = net.spec();
    let in_c = 1 + scheme.aux_channels();
    if s.kind != NetworkKind::Volumetric || s.in_channels != in_c || s.out_channels != scheme.num_classes() {
        return Err(Error::Config(format!(
            "volumetric network must map {in_c} channels to {} classes, got {:?} {}->{}",
            scheme.num_classes(),
            s.kind,
            s.in_channels,
            s.out_channels
        )));
    }
    Ok(())
}

/// Planar network applied to every slice of a preprocessed volume.
pub fn predict_2d_stack(net2d: &Network, volume: &Volume, scheme: ClassScheme) -> Result<Stack2d> {
    check_planar(net2d, scheme)?;
    let [d, h, w] = volume.shape();
    let input = Tensor::from_channels([d, h, w], &[volume.data()])?;
    net2d.spec().check_input(input.shape())?;
    let chunks: Vec<(usize, usize)> = (0..d)
        .step_by(PLANAR_CHUNK)
        .map(|z0| (z0, (z0 + PLANAR_CHUNK).min(d)))
        .collect();
    let outs = par::map(&chunks, |&(z0, z1)| net2d.forward(&input.planes(z0, z1)).map(|t| softmax(&t)));
    let outs: Vec<Tensor> = outs.into_iter().collect::<Result<_>>()?;
    let probabilities = Tensor::stack_planes(&outs)?;
    let labels = argmax_tensor(&probabilities);
    let aux = AuxMasks::from_labels(&labels, [d, h, w], scheme);
    Ok(Stack2d {
        probabilities,
        labels,
        aux,
    })
}

/// Volumetric-network input: image channel followed by the mask channels.
pub fn cascade_input(volume: &Volume, aux: &AuxMasks) -> Result<Tensor> {
    if aux.shape() != volume.shape() {
        return Err(Error::Shape(format!("masks {:?} vs image {:?}", aux.shape(), volume.shape())));
    }
    let ch = aux.channels();
    let mut refs: Vec<&[f32]> = vec![volume.data()];
    refs.extend(ch.iter().map(|c| c.as_slice()));
    Tensor::from_channels(volume.shape(), &refs)
}

/// Softmax probabilities of the volumetric network, optionally over
/// overlapping z-windows.
pub fn run_cascade_3d(net3d: &Network, volume: &Volume, aux: &AuxMasks, z_chunk: Option<usize>) -> Result<Tensor> {
    let input = cascade_input(volume, aux)?;
    net3d.spec().check_input(input.shape())?;
    let d = volume.depth();
    let chunk = match z_chunk {
        Some(k) if k < 2 => return Err(Error::Config("z_chunk must be at least 2".into())),
        Some(k) if k < d => k,
        _ => return Ok(softmax(&net3d.forward(&input)?)),
    };
    let mut windows = Vec::new();
    let mut z0 = 0;
    loop {
        let z1 = (z0 + chunk).min(d);
        windows.push((z1.saturating_sub(chunk), z1));
        if z1 == d {
            break;
        }
        z0 = z1 - 1;
    }
    let outs = par::map(&windows, |&(a, b)| net3d.forward(&input.planes(a, b)).map(|t| softmax(&t)));
    let c = net3d.spec().out_channels;
    let [_, h, w] = volume.shape();
    let plane = h * w;
    let mut acc = Tensor::zeros([c, d, h, w]);
    let mut hits = vec![0u32; d];
    for ((a, b), out) in windows.iter().zip(outs) {
        let out = out?;
        for k in 0..c {
            let src = out.channel(k);
            let dst = &mut acc.channel_mut(k)[a * plane..b * plane];
            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
        }
        hits[*a..*b].iter_mut().for_each(|n| *n += 1);
    }
    for k in 0..c {
        let ch = acc.channel_mut(k);
        for (z, n) in hits.iter().enumerate() {
            ch[z * plane..(z + 1) * plane].iter_mut().for_each(|v| *v /= *n as f32);
        }
    }
    Ok(acc)
}

/// Full cascade on an original-FOV volume.
pub fn predict_cascade(
    net2d: &Network,
    net3d: &Network,
    volume: &Volume,
    lv_center: Option<[usize; 2]>,
    config: &InferenceConfig,
) -> Result<PredictionResult> {
    let scheme = config.scheme;
    check_planar(net2d, scheme)?;
    check_volumetric(net3d, scheme)?;
    if volume.depth() < 1 {
        return Err(Error::Input("volume has no slices".into()));
    }
    let prepared = prepare_case(volume, None, lv_center, &config.preprocess)?;
    let slices = prepared.volume.depth();
    let (net_in, z_mapping) = if slices < config.preprocess.depth {
        let (v, _, map) = resize_z_nearest(&prepared.volume, None, config.preprocess.depth)?;
        (v, Some(map))
    } else {
        (prepared.volume, None)
    };
    let aux = match config.aux_source {
        AuxSource::Predicted => predict_2d_stack(net2d, &net_in, scheme)?.aux,
        AuxSource::Zeros => AuxMasks::zeros(net_in.shape(), scheme.has_mvo()),
    };
    let probs = run_cascade_3d(net3d, &net_in, &aux, config.z_chunk)?;
    let c = scheme.num_classes();
    let [_, ch, cw] = net_in.shape();
    let plane = ch * cw;
    let labels = argmax_tensor(&probs);
    let (labels, class_probs) = match &z_mapping {
        Some(map) => {
            let l = invert_z_mapping(&labels, plane, map, slices, c);
            let p = (0..c)
                .map(|k| {
                    let src = probs.channel(k);
                    let mut out = vec![0.0f32; slices * plane];
                    for (s, dst) in out.chunks_mut(plane).enumerate() {
                        let from: Vec<usize> = (0..map.len()).filter(|&i| map[i] == s).collect();
                        for &i in &from {
                            dst.iter_mut()
                                .zip(&src[i * plane..(i + 1) * plane])
                                .for_each(|(a, b)| *a += b / from.len() as f32);
                        }
                    }
                    out
                })
                .collect::<Vec<_>>();
            (l, p)
        }
        None => (labels, (0..c).map(|k| probs.channel(k).to_vec()).collect()),
    };
    let window = prepared.window;
    let full = window.uncrop(&labels, slices, BACKGROUND);
    let labels = LabelMask::new(volume.shape(), volume.spacing(), scheme, full)?;
    let probabilities = config.keep_probabilities.then(|| {
        class_probs
            .iter()
            .enumerate()
            .map(|(k, p)| window.uncrop(p, slices, if k == 0 { 1.0 } else { 0.0 }))
            .collect()
    });
    Ok(PredictionResult {
        labels,
        probabilities,
        provenance: Provenance {
            case_id: volume.case_id().to_string(),
            checkpoint_2d: checkpoint_id(net2d),
            checkpoint_3d: checkpoint_id(net3d),
            crop: window,
            z_mapping,
            aux_source: config.aux_source,
        },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFormat {
    #[default]
    Raw,
    Nifti,
}

/// Writes `{case_id}.u8` (or `.nii.gz`) plus a `{case_id}.provenance.json` sidecar.
pub fn write_prediction(dir: &Path, result: &PredictionResult, format: MaskFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &result.provenance.case_id;
    let path = dir.join(match format {
        MaskFormat::Raw => format!("{id}.u8"),
        MaskFormat::Nifti => format!("{id}.nii.gz"),
    });
    write_mask(&path, id, &result.labels)?;
    let side = dir.join(format!("{id}.provenance.json"));
    fs::write(&side, serde_json::to_string_pretty(&result.provenance)?).map_err(|e| Error::io(&side, e))?;
    Ok(path)
}

/// Dice of two label grids restricted to one class; both empty counts as 1.
pub fn label_dice(a: &[u8], b: &[u8], class: u8) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (px, py) = (x == class, y == class);
        na += px as usize;
        nb += py as usize;
        inter += (px && py) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Dice between perturbed-input and clean-input outputs for classes `1..C`.
    pub dice: Vec<f64>,
    pub record: PerturbationRecord,
    pub clean_labels: Vec<u8>,
    pub perturbed_labels: Vec<u8>,
}

/// Runs the volumetric network on clean and perturbed mask channels of a
/// preprocessed volume and compares the two label outputs per class.
pub fn robustness_probe<F>(net3d: &Network, volume: &Volume, clean: &AuxMasks, perturb: F) -> Result<ProbeResult>
where
    F: FnOnce(&mut AuxMasks) -> Result<PerturbationRecord>,
{
    let mut perturbed = clean.clone();
    let record = perturb(&mut perturbed)?;
    let clean_labels = argmax_tensor(&run_cascade_3d(net3d, volume, clean, None)?);
    let perturbed_labels = argmax_tensor(&run_cascade_3d(net3d, volume, &perturbed, None)?);
    let c = net3d.spec().out_channels as u8;
    let dice = (1..c).map(|k| label_dice(&clean_labels, &perturbed_labels, k)).collect();
    Ok(ProbeResult {
        dice,
        record,
        clean_labels,
        perturbed_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Spacing;
    use crate::networks::NetworkSpec;
    use crate::perturbation::zero_mask;

    fn tiny(kind: NetworkKind, in_c: usize) -> NetworkSpec {
        NetworkSpec {
            kind,
            in_channels: in_c,
            out_channels: 5,
            levels: 3,
            base_width: 4,
            max_width: 8,
            deep_supervision_levels: vec![0, 1],
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }

    fn nets() -> (Network, Network) {
        (
            Network::new(tiny(NetworkKind::Planar, 1), 1).unwrap(),
            Network::new(tiny(NetworkKind::Volumetric, 3), 2).unwrap(),
        )
    }

    fn volume(shape: [usize; 3]) -> Volume {
        let n = shape.iter().product::<usize>();
        let data = (0..n).map(|i| ((i * 37) % 101) as f32 / 50.0).collect();
        Volume::new("v", shape, Spacing([10.0, 1.458, 1.458]), data).unwrap()
    }

    fn config(crop: usize, depth: usize) -> InferenceConfig {
        InferenceConfig::new(ClassScheme::Emidec, PreprocessConfig::custom([crop, crop], depth))
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_vec([3, 1, 1, 2], vec![1.0, -2.0, 0.5, 0.5, 100.0, 3.0]).unwrap();
        let s = softmax(&t);
        for i in 0..2 {
            let sum: f32 = (0..3).map(|k| s.channel(k)[i]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        assert_eq!(argmax_tensor(&t), vec![2, 2]);
    }

    #[test]
    fn stack_maps_and_binary_channels() {
        let (n2, _) = nets();
        let v = volume([7, 16, 16]);
        let s = predict_2d_stack(&n2, &v, ClassScheme::Emidec).unwrap();
        assert_eq!(s.probabilities.shape(), [5, 7, 16, 16]);
        assert!(s.aux.scar().iter().all(|&b| b <= 1));
        assert!(s.aux.mvo().unwrap().iter().all(|&b| b <= 1));
        for (i, &l) in s.labels.iter().enumerate() {
            assert_eq!(s.aux.scar()[i], u8::from(l == 3));
        }
    }

    #[test]
    fn restores_original_fov_and_pads_background() {
        let (n2, n3) = nets();
        let v = volume([9, 40, 36]);
        let mut cfg = config(16, 7);
        cfg.keep_probabilities = true;
        let r = predict_cascade(&n2, &n3, &v, Some([20, 18]), &cfg).unwrap();
        assert_eq!(r.labels.shape(), [9, 40, 36]);
        let w = r.provenance.crop;
        let probs = r.probabilities.as_ref().unwrap();
        for z in 0..9 {
            for y in 0..40 {
                for x in 0..36 {
                    let i = (z * 40 + y) * 36 + x;
                    if !w.contains(y, x) {
                        assert_eq!(r.labels.labels()[i], BACKGROUND);
                    }
                    let s: f32 = probs.iter().map(|p| p[i]).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn shallow_stacks_are_resized_and_mapped_back() {
        let (n2, n3) = nets();
        let v = volume([3, 16, 16]);
        let r = predict_cascade(&n2, &n3, &v, None, &config(16, 7)).unwrap();
        assert_eq!(r.labels.shape(), [3, 16, 16]);
        assert_eq!(r.provenance.z_mapping.as_ref().unwrap().len(), 7);
    }

    #[test]
    fn prediction_is_deterministic() {
        let (n2, n3) = nets();
        let v = volume([5, 16, 16]);
        let a = predict_cascade(&n2, &n3, &v, None, &config(16, 5)).unwrap();
        let b = predict_cascade(&n2, &n3, &v, None, &config(16, 5)).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.provenance, b.provenance);
    }

    #[test]
    fn zero_masks_still_give_valid_labels() {
        let (n2, n3) = nets();
        let v = volume([5, 16, 16]);
        let mut cfg = config(16, 5);
        cfg.aux_source = AuxSource::Zeros;
        let r = predict_cascade(&n2, &n3, &v, None, &cfg).unwrap();
        assert!(r.labels.labels().iter().all(|&l| l < 5));
    }

    #[test]
    fn chunked_inference_matches_shapes_and_sums() {
        let (_, n3) = nets();
        let v = volume([7, 16, 16]);
        let aux = AuxMasks::zeros([7, 16, 16], true);
        let p = run_cascade_3d(&n3, &v, &aux, Some(3)).unwrap();
        assert_eq!(p.shape(), [5, 7, 16, 16]);
        for i in 0..p.channel_len() {
            let s: f32 = (0..5).map(|k| p.channel(k)[i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        let whole = run_cascade_3d(&n3, &v, &aux, Some(7)).unwrap();
        assert_eq!(whole, run_cascade_3d(&n3, &v, &aux, None).unwrap());
    }

    #[test]
    fn probe_identity_and_zero_mask() {
        let (_, n3) = nets();
        let v = volume([5, 16, 16]);
        let labels: Vec<u8> = (0..5 * 256).map(|i| [0, 2, 3, 4][i % 4]).collect();
        let clean = AuxMasks::from_labels(&labels, [5, 16, 16], ClassScheme::Emidec);
        let id = robustness_probe(&n3, &v, &clean, |_| Ok(PerturbationRecord::none())).unwrap();
        assert!(id.dice.iter().all(|&d| d == 1.0));
        let z = robustness_probe(&n3, &v, &clean, |m| Ok(zero_mask(m))).unwrap();
        assert!(z.dice.iter().all(|&d| (0.0..=1.0).contains(&d)));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (n2, _) = nets();
        let wrong = Network::new(tiny(NetworkKind::Volumetric, 2), 3).unwrap();
        let v = volume([5, 16, 16]);
        assert!(predict_cascade(&n2, &wrong, &v, None, &config(16, 5)).is_err());
    }

    #[test]
    fn written_raw_prediction_reads_back() {
        let (n2, n3) = nets();
        let v = volume([5, 16, 16]);
        let r = predict_cascade(&n2, &n3, &v, None, &config(16, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = write_prediction(dir.path(), &r, MaskFormat::Raw).unwrap();
        let back = crate::data::load_mask(&p, ClassScheme::Emidec).unwrap();
        assert_eq!(back.labels(), r.labels.labels());
        let side: Provenance =
            serde_json::from_str(&fs::read_to_string(dir.path().join("v.provenance.json")).unwrap()).unwrap();
        assert_eq!(side, r.provenance);
    }
}
