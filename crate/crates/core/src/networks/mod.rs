//! U-Net builders for the slice-wise (planar) and volumetric stages, their
//! forward/backward passes and parameter checkpoints.
//!
//! Activations are `[channel, depth, height, width]` per sample. A planar
//! network uses 1x3x3 kernels and per-plane instance normalisation, so each
//! depth plane is processed independently and a batch of slices can be packed
//! along depth. A volumetric network uses 3x3x3 kernels; neither kind ever
//! resamples the depth axis.

mod checkpoint;
mod layers;
mod params;
mod tensor;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint_spec, save_checkpoint};
pub use layers::{ConvGeom, UpGeom};
pub use params::{ParamEntry, ParamSet};
pub use tensor::Tensor;

use crate::data::ClassScheme;
use crate::error::{Error, Result};
use crate::par;
use layers::*;
use params::{Init, ParamBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkKind {
    /// Slice-wise network: max-pool down, bilinear up.
    Planar,
    /// Volumetric network: strided conv down, transposed conv up.
    Volumetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Resolution levels, including the bottleneck.
    pub levels: usize,
    pub base_width: usize,
    pub max_width: usize,
    /// Decoder levels with an output head; level 0 (the main output) must come first.
    pub deep_supervision_levels: Vec<usize>,
    pub leaky_slope: f32,
    pub norm_eps: f32,
}

impl NetworkSpec {
    /// Slice-wise network for a scheme; 6 levels for large crops, 5 otherwise.
    pub fn planar(scheme: ClassScheme, crop: [usize; 2]) -> Self {
        let mut levels = if crop[0].min(crop[1]) >= 256 { 6 } else { 5 };
        while levels > 1 && (crop[0] % (1 << (levels - 1)) != 0 || crop[1] % (1 << (levels - 1)) != 0) {
            levels -= 1;
        }
        NetworkSpec {
            kind: NetworkKind::Planar,
            in_channels: 1,
            out_channels: scheme.num_classes(),
            levels,
            base_width: 32,
            max_width: 512,
            deep_supervision_levels: vec![0, 1, 2],
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }

    /// Volumetric network taking the image plus the scheme's auxiliary mask channels.
    pub fn volumetric(scheme: ClassScheme) -> Self {
        NetworkSpec {
            kind: NetworkKind::Volumetric,
            in_channels: 1 + scheme.aux_channels(),
            out_channels: scheme.num_classes(),
            levels: 4,
            base_width: 32,
            max_width: 320,
            deep_supervision_levels: vec![0, 1, 2],
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }

    pub fn width(&self, level: usize) -> usize {
        (self.base_width << level).min(self.max_width)
    }

    /// Spatial divisor of the deepest level.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::Config(format!("levels must be in 1..=8, got {}", self.levels)));
        }
        if self.in_channels == 0 || self.out_channels < 2 || self.base_width == 0 || self.max_width < self.base_width {
            return Err(Error::Config("channel counts and widths must be positive".into()));
        }
        let decoder_levels = (self.levels - 1).max(1);
        let ds = &self.deep_supervision_levels;
        if ds.first() != Some(&0) || ds.windows(2).any(|p| p[0] >= p[1]) || ds.iter().any(|&l| l >= decoder_levels) {
            return Err(Error::Config(format!(
                "deep supervision levels {ds:?} must be increasing, start at 0 and stay below {decoder_levels}"
            )));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) || !(self.norm_eps > 0.0) {
            return Err(Error::Config("leaky_slope must be in [0, 1) and norm_eps positive".into()));
        }
        Ok(())
    }

    /// Checks a per-sample input shape `[channels, depth, height, width]`.
    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        if shape[0] != self.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.in_channels, shape[0]
            )));
        }
        let div = self.divisor();
        if shape[1] == 0 || shape[2] == 0 || shape[3] == 0 || shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(Error::Shape(format!(
                "in-plane extent {}x{} must be positive and divisible by {div}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Spatial shape of the output at a supervision level.
    pub fn level_shape(&self, spatial: [usize; 3], level: usize) -> [usize; 3] {
        [spatial[0], spatial[1] >> level, spatial[2] >> level]
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: ConvGeom,
    w: Range<usize>,
    b: Range<usize>,
    gamma: Range<usize>,
    beta: Range<usize>,
}

#[derive(Clone, Debug)]
enum Up {
    Bilinear,
    Transposed { g: UpGeom, w: Range<usize>, b: Range<usize> },
}

#[derive(Clone, Debug)]
struct Head {
    level: usize,
    conv: ConvGeom,
    w: Range<usize>,
    b: Range<usize>,
}

struct BlockCache {
    input: Tensor,
    norm: NormCache,
}

enum UpCache {
    Bilinear([usize; 4]),
    Transposed(Tensor),
}

/// Activations retained by a training forward pass.
pub struct ForwardCache {
    enc: Vec<Vec<BlockCache>>,
    pools: Vec<Option<([usize; 4], Vec<u32>)>>,
    ups: Vec<Option<UpCache>>,
    dec: Vec<Vec<BlockCache>>,
    head_inputs: Vec<Option<Tensor>>,
}

/// A built network: layer layout plus parameters.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    enc: Vec<Vec<Block>>,
    ups: Vec<Up>,
    dec: Vec<Vec<Block>>,
    heads: Vec<Head>,
    params: ParamSet,
}

/// Two disjoint mutable ranges of one slice; `a` must precede `b`.
fn two_mut<'a>(v: &'a mut [f32], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f32], &'a mut [f32]) {
    assert!(a.end <= b.start);
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

impl Network {
    /// Builds a network with Kaiming-initialised weights drawn from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut pb = ParamBuilder::default();
        let slope = spec.leaky_slope;
        let (kernel, pad) = match spec.kind {
            NetworkKind::Planar => ([1, 3, 3], [0, 1, 1]),
            NetworkKind::Volumetric => ([3, 3, 3], [1, 1, 1]),
        };
        let block = |pb: &mut ParamBuilder, name: String, in_c: usize, out_c: usize, stride: [usize; 3]| {
            let conv = ConvGeom {
                in_c,
                out_c,
                kernel,
                stride,
                pad,
            };
            let fan_in = in_c * kernel.iter().product::<usize>();
            let mut shape = vec![out_c, in_c];
            shape.extend(kernel);
            Block {
                conv,
                w: pb.add(format!("{name}.conv.weight"), shape, Init::Kaiming { fan_in, slope }),
                b: pb.add(format!("{name}.conv.bias"), vec![out_c], Init::Const(0.0)),
                gamma: pb.add(format!("{name}.norm.weight"), vec![out_c], Init::Const(1.0)),
                beta: pb.add(format!("{name}.norm.bias"), vec![out_c], Init::Const(0.0)),
            }
        };

        let mut enc = Vec::with_capacity(spec.levels);
        for l in 0..spec.levels {
            let w = spec.width(l);
            let (in_c, stride) = match (l, spec.kind) {
                (0, _) => (spec.in_channels, [1, 1, 1]),
                (_, NetworkKind::Planar) => (spec.width(l - 1), [1, 1, 1]),
                (_, NetworkKind::Volumetric) => (spec.width(l - 1), [1, 2, 2]),
            };
            enc.push(vec![
                block(&mut pb, format!("enc.{l}.0"), in_c, w, stride),
                block(&mut pb, format!("enc.{l}.1"), w, w, [1, 1, 1]),
            ]);
        }

        let decoder_levels = spec.levels - 1;
        let mut ups = Vec::with_capacity(decoder_levels);
        let mut dec = Vec::with_capacity(decoder_levels);
        for l in 0..decoder_levels {
            let (w, below) = (spec.width(l), spec.width(l + 1));
            let (up, up_c) = match spec.kind {
                NetworkKind::Planar => (Up::Bilinear, below),
                NetworkKind::Volumetric => {
                    let g = UpGeom {
                        in_c: below,
                        out_c: w,
                        stride: [2, 2],
                    };
                    let up = Up::Transposed {
                        g,
                        w: pb.add(
                            format!("up.{l}.weight"),
                            vec![below, w, 1, 2, 2],
                            Init::Kaiming { fan_in: below, slope },
                        ),
                        b: pb.add(format!("up.{l}.bias"), vec![w], Init::Const(0.0)),
                    };
                    (up, w)
                }
            };
            ups.push(up);
            dec.push(vec![
                block(&mut pb, format!("dec.{l}.0"), up_c + w, w, [1, 1, 1]),
                block(&mut pb, format!("dec.{l}.1"), w, w, [1, 1, 1]),
            ]);
        }

        let heads = spec
            .deep_supervision_levels
            .iter()
            .map(|&level| {
                let in_c = spec.width(level);
                let conv = ConvGeom {
                    in_c,
                    out_c: spec.out_channels,
                    kernel: [1, 1, 1],
                    stride: [1, 1, 1],
                    pad: [0, 0, 0],
                };
                Head {
                    level,
                    conv,
                    w: pb.add(
                        format!("head.{level}.weight"),
                        vec![spec.out_channels, in_c, 1, 1, 1],
                        Init::Kaiming { fan_in: in_c, slope: 1.0 },
                    ),
                    b: pb.add(format!("head.{level}.bias"), vec![spec.out_channels], Init::Const(0.0)),
                }
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = pb.build(&mut rng);
        Ok(Network {
            spec,
            enc,
            ups,
            dec,
            heads,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_outputs(&self) -> usize {
        self.heads.len()
    }

    fn p(&self, r: &Range<usize>) -> &[f32] {
        &self.params.data()[r.clone()]
    }

    fn group_len(&self, spatial: [usize; 3]) -> usize {
        match self.spec.kind {
            NetworkKind::Planar => spatial[1] * spatial[2],
            NetworkKind::Volumetric => spatial.iter().product(),
        }
    }

    fn block_forward(&self, b: &Block, x: Tensor, keep: bool) -> (Tensor, Option<BlockCache>) {
        let y = conv_forward(&x, self.p(&b.w), self.p(&b.b), &b.conv);
        let group = self.group_len(y.spatial());
        let (z, norm) = norm_act_forward(
            &y,
            self.p(&b.gamma),
            self.p(&b.beta),
            group,
            self.spec.norm_eps,
            self.spec.leaky_slope,
            keep,
        );
        (z, norm.map(|norm| BlockCache { input: x, norm }))
    }

    fn block_backward(&self, b: &Block, cache: BlockCache, dz: &Tensor, grads: &mut [f32]) -> Tensor {
        let group = self.group_len(dz.spatial());
        let (dg, dbt) = two_mut(grads, &b.gamma, &b.beta);
        let dy = norm_act_backward(
            &cache.norm,
            self.p(&b.gamma),
            self.p(&b.beta),
            group,
            self.spec.leaky_slope,
            dz,
            dg,
            dbt,
        );
        let (dw, db) = two_mut(grads, &b.w, &b.b);
        conv_backward(&cache.input, self.p(&b.w), &b.conv, &dy, dw, db)
    }

    fn run(&self, x: &Tensor, keep: bool, all_heads: bool) -> Result<(Vec<Tensor>, Option<ForwardCache>)> {
        self.spec.check_input(x.shape())?;
        let levels = self.spec.levels;
        let mut cache = ForwardCache {
            enc: Vec::new(),
            pools: Vec::new(),
            ups: (0..levels - 1).map(|_| None).collect(),
            dec: (0..levels - 1).map(|_| Vec::new()).collect(),
            head_inputs: (0..self.heads.len()).map(|_| None).collect(),
        };
        let mut outputs: Vec<Option<Tensor>> = (0..self.heads.len()).map(|_| None).collect();
        let mut run_heads = |level: usize, h: &Tensor, cache: &mut ForwardCache| {
            for (i, head) in self.heads.iter().enumerate() {
                if head.level == level && (all_heads || i == 0) {
                    outputs[i] = Some(conv_forward(h, self.p(&head.w), self.p(&head.b), &head.conv));
                    if keep {
                        cache.head_inputs[i] = Some(h.clone());
                    }
                }
            }
        };

        let mut h = x.clone();
        let mut skips = Vec::with_capacity(levels);
        for (l, blocks) in self.enc.iter().enumerate() {
            let mut pool = None;
            if l > 0 && self.spec.kind == NetworkKind::Planar {
                let shape = h.shape();
                let (y, idx) = maxpool_forward(&h);
                h = y;
                if keep {
                    pool = Some((shape, idx));
                }
            }
            cache.pools.push(pool);
            let mut bc = Vec::new();
            for b in blocks {
                let (y, c) = self.block_forward(b, h, keep);
                h = y;
                bc.extend(c);
            }
            cache.enc.push(bc);
            if l + 1 < levels {
                skips.push(h.clone());
            }
        }
        if levels == 1 {
            run_heads(0, &h, &mut cache);
        }
        for l in (0..levels - 1).rev() {
            let up = match &self.ups[l] {
                Up::Bilinear => {
                    if keep {
                        cache.ups[l] = Some(UpCache::Bilinear(h.shape()));
                    }
                    upsample_forward(&h)
                }
                Up::Transposed { g, w, b } => {
                    let y = conv_transpose_forward(&h, self.p(w), self.p(b), g);
                    if keep {
                        cache.ups[l] = Some(UpCache::Transposed(h));
                    }
                    y
                }
            };
            h = Tensor::concat(&up, &skips[l])?;
            drop(up);
            for b in &self.dec[l] {
                let (y, c) = self.block_forward(b, h, keep);
                h = y;
                cache.dec[l].extend(c);
            }
            run_heads(l, &h, &mut cache);
        }
        let outputs = outputs.into_iter().flatten().collect();
        Ok((outputs, keep.then_some(cache)))
    }

    /// Main output scores `[out_channels, d, h, w]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (mut out, _) = self.run(x, false, false)?;
        Ok(out.swap_remove(0))
    }

    /// Main and deep-supervision outputs, in `deep_supervision_levels` order.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.run(x, false, true)?.0)
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Vec<Tensor>, ForwardCache)> {
        let (out, cache) = self.run(x, true, true)?;
        Ok((out, cache.expect("cache kept")))
    }

    /// Main outputs for several samples, in input order.
    pub fn forward_batch(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        par::map(xs, |x| self.forward(x)).into_iter().collect()
    }

    /// Gradient of a scalar loss with respect to every parameter, given its
    /// gradients with respect to each output of [`Network::forward_train`].
    pub fn backward(&self, mut cache: ForwardCache, d_outputs: &[Tensor]) -> Result<Vec<f32>> {
        if d_outputs.len() != self.heads.len() {
            return Err(Error::Shape(format!(
                "{} output gradients for {} heads",
                d_outputs.len(),
                self.heads.len()
            )));
        }
        let levels = self.spec.levels;
        let mut grads = self.params.zeros_like();
        let head_grad = |level: usize, grads: &mut [f32], cache: &mut ForwardCache| -> Option<Tensor> {
            let mut acc: Option<Tensor> = None;
            for (i, head) in self.heads.iter().enumerate() {
                if head.level != level {
                    continue;
                }
                let input = cache.head_inputs[i].take().expect("head input cached");
                let (dw, db) = two_mut(grads, &head.w, &head.b);
                let dx = conv_backward(&input, self.p(&head.w), &head.conv, &d_outputs[i], dw, db);
                match acc.as_mut() {
                    Some(a) => a.add_assign(&dx),
                    None => acc = Some(dx),
                }
            }
            acc
        };

        let mut d_skips: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
        let mut dh: Option<Tensor> = if levels == 1 { head_grad(0, &mut grads, &mut cache) } else { None };
        for l in 0..levels - 1 {
            let from_head = head_grad(l, &mut grads, &mut cache);
            let mut d = match (dh.take(), from_head) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => return Err(Error::Shape(format!("no gradient reaches decoder level {l}"))),
            };
            let caches = std::mem::take(&mut cache.dec[l]);
            for (b, c) in self.dec[l].iter().zip(caches).rev() {
                d = self.block_backward(b, c, &d, &mut grads);
            }
            let skip_c = self.spec.width(l);
            let up_c = d.channels() - skip_c;
            let (d_up, d_skip) = d.split_channels(up_c);
            d_skips[l] = Some(d_skip);
            dh = Some(match (&self.ups[l], cache.ups[l].take().expect("up cached")) {
                (Up::Bilinear, UpCache::Bilinear(shape)) => upsample_backward(shape, &d_up),
                (Up::Transposed { g, w, b }, UpCache::Transposed(input)) => {
                    let (dw, db) = two_mut(&mut grads, w, b);
                    conv_transpose_backward(&input, self.p(w), g, &d_up, dw, db)
                }
                _ => unreachable!("up cache matches layer"),
            });
        }

        let mut d = dh.expect("bottleneck gradient");
        for l in (0..levels).rev() {
            if let Some(ds) = d_skips[l].take() {
                d.add_assign(&ds);
            }
            let caches = std::mem::take(&mut cache.enc[l]);
            for (b, c) in self.enc[l].iter().zip(caches).rev() {
                d = self.block_backward(b, c, &d, &mut grads);
            }
            if let Some((shape, idx)) = cache.pools[l].take() {
                d = maxpool_backward(shape, &idx, &d);
            }
        }
        Ok(grads)
    }
}
