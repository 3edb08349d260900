use crate::error::{Error, Result};

/// Dense `f32` activations of one sample, laid out `[channel, depth, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped single-volume channels.
    pub fn from_channels(spatial: [usize; 3], channels: &[&[f32]]) -> Result<Self> {
        let n: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(n * channels.len());
        for ch in channels {
            if ch.len() != n {
                return Err(Error::Shape(format!("channel of {} values for grid {spatial:?}", ch.len())));
            }
            data.extend_from_slice(ch);
        }
        Ok(Tensor {
            shape: [channels.len(), spatial[0], spatial[1], spatial[2]],
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    /// Values per channel.
    pub fn channel_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.channel_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.channel_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-wise concatenation `[a; b]`.
    pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.spatial() != b.spatial() {
            return Err(Error::Shape(format!("concat {:?} with {:?}", a.shape, b.shape)));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor {
            shape: [a.shape[0] + b.shape[0], a.shape[1], a.shape[2], a.shape[3]],
            data,
        })
    }

    /// Inverse of [`Tensor::concat`]: the first `c` channels and the rest.
    pub fn split_channels(self, c: usize) -> (Tensor, Tensor) {
        let [n, d, h, w] = self.shape;
        assert!(c <= n);
        let mut data = self.data;
        let tail = data.split_off(c * d * h * w);
        (
            Tensor {
                shape: [c, d, h, w],
                data,
            },
            Tensor {
                shape: [n - c, d, h, w],
                data: tail,
            },
        )
    }

    /// Stacks single-plane samples `[c, 1, h, w]` along depth.
    pub fn stack_planes(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero samples".into()))?;
        let [c, _, h, w] = first.shape;
        let total_d: usize = samples.iter().map(|s| s.shape[1]).sum();
        let mut out = Tensor::zeros([c, total_d, h, w]);
        let plane = h * w;
        let mut z0 = 0;
        for s in samples {
            if s.shape[0] != c || s.shape[2] != h || s.shape[3] != w {
                return Err(Error::Shape(format!("stack {:?} with {:?}", first.shape, s.shape)));
            }
            let d = s.shape[1];
            for ch in 0..c {
                let dst = ch * total_d * plane + z0 * plane;
                out.data[dst..dst + d * plane].copy_from_slice(s.channel(ch));
            }
            z0 += d;
        }
        Ok(out)
    }

    /// Depth planes `z0..z1` of every channel.
    pub fn planes(&self, z0: usize, z1: usize) -> Tensor {
        let [c, d, h, w] = self.shape;
        assert!(z0 <= z1 && z1 <= d);
        let plane = h * w;
        let mut data = Vec::with_capacity(c * (z1 - z0) * plane);
        for ch in 0..c {
            let base = ch * d * plane;
            data.extend_from_slice(&self.data[base + z0 * plane..base + z1 * plane]);
        }
        Tensor {
            shape: [c, z1 - z0, h, w],
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}
