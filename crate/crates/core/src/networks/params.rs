use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Every parameter of a network in one flat vector, with named views.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    data: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Kaiming normal for a leaky ReLU of the given slope.
    Kaiming { fan_in: usize, slope: f32 },
    Const(f32),
}

#[derive(Default)]
pub(crate) struct ParamBuilder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    len: usize,
}

impl ParamBuilder {
    pub fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> Range<usize> {
        let entry = ParamEntry {
            name,
            shape,
            offset: self.len,
        };
        self.len += entry.len();
        let r = entry.range();
        self.entries.push(entry);
        self.inits.push(init);
        r
    }

    pub fn build<R: Rng + ?Sized>(self, rng: &mut R) -> ParamSet {
        let mut data = vec![0.0f32; self.len];
        for (e, init) in self.entries.iter().zip(&self.inits) {
            let dst = &mut data[e.range()];
            match *init {
                Init::Const(v) => dst.fill(v),
                Init::Kaiming { fan_in, slope } => {
                    let std = (2.0 / ((1.0 + slope as f64 * slope as f64) * fan_in as f64)).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    dst.iter_mut().for_each(|v| *v = normal.sample(rng) as f32);
                }
            }
        }
        ParamSet {
            entries: self.entries,
            data,
        }
    }
}

impl ParamSet {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries.iter().find(|e| e.name == name).map(|e| &self.data[e.range()])
    }

    pub fn zeros_like(&self) -> Vec<f32> {
        vec![0.0; self.data.len()]
    }

    /// Replaces the values, keeping the layout.
    pub(crate) fn with_data(entries: Vec<ParamEntry>, data: Vec<f32>) -> Self {
        ParamSet { entries, data }
    }
}
