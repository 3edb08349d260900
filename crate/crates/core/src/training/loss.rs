use crate::error::{Error, Result};
use crate::networks::Tensor;

/// Soft Dice loss `-(2 Σpg + ε) / (Σp² + Σg² + ε)` averaged over the classes
/// that have ground truth, with its gradient with respect to `p`.
///
/// `p` and `g` are class-major (`[class][voxel]`). Classes listed in `skip`
/// (typically background) and classes with `Σg = 0` do not contribute; if no
/// class contributes the loss is 0 with a zero gradient.
pub fn dice_loss(p: &[f64], g: &[f64], num_classes: usize, skip: &[usize], eps: f64) -> Result<(f64, Vec<f64>)> {
    if p.len() != g.len() || num_classes == 0 || p.len() % num_classes != 0 {
        return Err(Error::Shape(format!(
            "dice loss over {} predictions and {} targets in {num_classes} classes",
            p.len(),
            g.len()
        )));
    }
    let n = p.len() / num_classes;
    let mut grad = vec![0.0; p.len()];
    let present: Vec<usize> = (0..num_classes)
        .filter(|c| !skip.contains(c) && g[c * n..(c + 1) * n].iter().sum::<f64>() > 0.0)
        .collect();
    if present.is_empty() {
        return Ok((0.0, grad));
    }
    let k = present.len() as f64;
    let mut total = 0.0;
    for &c in &present {
        let (pc, gc) = (&p[c * n..(c + 1) * n], &g[c * n..(c + 1) * n]);
        let a: f64 = pc.iter().zip(gc).map(|(x, y)| x * y).sum();
        let b: f64 = pc.iter().map(|x| x * x).sum::<f64>() + gc.iter().map(|y| y * y).sum::<f64>();
        total += -(2.0 * a + eps) / (b + eps);
        let (alpha, beta) = (-2.0 / (b + eps), 2.0 * (2.0 * a + eps) / ((b + eps) * (b + eps)));
        for ((d, x), y) in grad[c * n..(c + 1) * n].iter_mut().zip(pc).zip(gc) {
            *d = (alpha * y + beta * x) / k;
        }
    }
    Ok((total / k, grad))
}

/// Normalised deep-supervision weights halving per level: `(4, 2, 1) / 7` for three.
pub fn deep_supervision_weights(levels: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..levels).map(|l| 0.5f64.powi(l as i32)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

/// Weighted sum of per-level losses with weights normalised to sum to one.
pub fn combine_levels(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() || weights.is_empty() {
        return Err(Error::Shape(format!("{} losses for {} weights", losses.len(), weights.len())));
    }
    let s: f64 = weights.iter().sum();
    if !(s > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Config("deep supervision weights must be non-negative with a positive sum".into()));
    }
    Ok(losses.iter().zip(weights).map(|(l, w)| l * w / s).sum())
}

/// Nearest-neighbour label downsampling by `2^level` in-plane (cell centres).
pub fn downsample_labels(labels: &[u8], spatial: [usize; 3], level: usize) -> Vec<u8> {
    if level == 0 {
        return labels.to_vec();
    }
    let [d, h, w] = spatial;
    let s = 1usize << level;
    let (oh, ow) = (h / s, w / s);
    let mut out = Vec::with_capacity(d * oh * ow);
    for z in 0..d {
        for y in 0..oh {
            let row = (z * h + y * s + s / 2) * w;
            out.extend((0..ow).map(|x| labels[row + x * s + s / 2]));
        }
    }
    out
}

/// Per-voxel softmax over channels, in f64.
pub fn softmax_channels(logits: &Tensor) -> Vec<f64> {
    let c = logits.channels();
    let n = logits.channel_len();
    let d = logits.data();
    let mut out = vec![0.0f64; c * n];
    for i in 0..n {
        let m = (0..c).map(|k| d[k * n + i]).fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut s = 0.0;
        for k in 0..c {
            let e = (d[k * n + i] as f64 - m).exp();
            out[k * n + i] = e;
            s += e;
        }
        for k in 0..c {
            out[k * n + i] /= s;
        }
    }
    out
}

/// Batch-level Dice loss on softmax probabilities of several output tensors
/// (one per forward group), returning the loss and gradients with respect to
/// each tensor's logits. Sums run over every voxel of every group.
pub fn softmax_dice_batch(logits: &[&Tensor], labels: &[&[u8]], skip: &[usize], eps: f64) -> Result<(f64, Vec<Tensor>)> {
    let c = logits.first().map(|t| t.channels()).ok_or_else(|| Error::Shape("empty batch".into()))?;
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} outputs for {} label grids", logits.len(), labels.len())));
    }
    let mut a = vec![0.0f64; c];
    let mut b = vec![0.0f64; c];
    let mut gsum = vec![0.0f64; c];
    let mut probs = Vec::with_capacity(logits.len());
    for (t, lab) in logits.iter().zip(labels) {
        if t.channels() != c || lab.len() != t.channel_len() {
            return Err(Error::Shape(format!(
                "output {:?} does not match {} labels",
                t.shape(),
                lab.len()
            )));
        }
        let n = t.channel_len();
        let p = softmax_channels(t);
        for (i, &l) in lab.iter().enumerate() {
            if l as usize >= c {
                return Err(Error::Shape(format!("label {l} outside {c} output channels")));
            }
            for k in 0..c {
                b[k] += p[k * n + i] * p[k * n + i];
            }
            a[l as usize] += p[l as usize * n + i];
            gsum[l as usize] += 1.0;
        }
        probs.push(p);
    }
    let present: Vec<usize> = (0..c).filter(|k| !skip.contains(k) && gsum[*k] > 0.0).collect();
    let mut grads = Vec::with_capacity(logits.len());
    if present.is_empty() {
        for t in logits {
            grads.push(Tensor::zeros(t.shape()));
        }
        return Ok((0.0, grads));
    }
    let kk = present.len() as f64;
    let mut alpha = vec![0.0f64; c];
    let mut beta = vec![0.0f64; c];
    let mut loss = 0.0;
    for &k in &present {
        let denom = b[k] + gsum[k] + eps;
        loss += -(2.0 * a[k] + eps) / denom;
        alpha[k] = -2.0 / denom / kk;
        beta[k] = 2.0 * (2.0 * a[k] + eps) / (denom * denom) / kk;
    }
    for ((t, lab), p) in logits.iter().zip(labels).zip(&probs) {
        let n = t.channel_len();
        let mut g = Tensor::zeros(t.shape());
        let gd = g.data_mut();
        let mut dp = vec![0.0f64; c];
        for (i, &l) in lab.iter().enumerate() {
            let mut dot = 0.0;
            for k in 0..c {
                let pk = p[k * n + i];
                dp[k] = beta[k] * pk + if k == l as usize { alpha[k] } else { 0.0 };
                dot += pk * dp[k];
            }
            for k in 0..c {
                gd[k * n + i] = (p[k * n + i] * (dp[k] - dot)) as f32;
            }
        }
        grads.push(g);
    }
    Ok((loss / kk, grads))
}

/// Deep-supervised loss of a batch. `outputs[g][l]` is level `l` of forward
/// group `g`; `labels[g]` holds that group's full-resolution labels.
pub fn supervised_loss(
    outputs: &[Vec<Tensor>],
    labels: &[Vec<u8>],
    weights: &[f64],
    skip: &[usize],
    eps: f64,
) -> Result<(f64, Vec<Vec<Tensor>>)> {
    let levels = weights.len();
    if outputs.iter().any(|o| o.len() != levels) || outputs.len() != labels.len() {
        return Err(Error::Shape(format!("outputs do not provide {levels} supervision levels")));
    }
    let s: f64 = weights.iter().sum();
    let mut d_outputs: Vec<Vec<Tensor>> = outputs.iter().map(|_| Vec::with_capacity(levels)).collect();
    let mut losses = Vec::with_capacity(levels);
    for j in 0..levels {
        let down: Vec<Vec<u8>> = outputs
            .iter()
            .zip(labels)
            .map(|(o, lab)| {
                let full = o[0].spatial();
                let out = o[j].spatial();
                let level = (0..8).find(|&l| out == [full[0], full[1] >> l, full[2] >> l] && full[1] % (1 << l) == 0);
                let level = level.ok_or_else(|| {
                    Error::Shape(format!("output {j} of shape {out:?} is not a power-of-two reduction of {full:?}"))
                })?;
                Ok(downsample_labels(lab, full, level))
            })
            .collect::<Result<_>>()?;
        let logits: Vec<&Tensor> = outputs.iter().map(|o| &o[j]).collect();
        let labs: Vec<&[u8]> = down.iter().map(|v| v.as_slice()).collect();
        let (loss, grads) = softmax_dice_batch(&logits, &labs, skip, eps)?;
        losses.push(loss);
        let w = (weights[j] / s) as f32;
        for (dst, mut g) in d_outputs.iter_mut().zip(grads) {
            g.data_mut().iter_mut().for_each(|v| *v *= w);
            dst.push(g);
        }
    }
    Ok((combine_levels(&losses, weights)?, d_outputs))
}
