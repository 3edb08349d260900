//! Connected-component labelling on binary slices and nearest-rank percentiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        // Only neighbours already visited in raster order.
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
        }
    }
}

/// Component labelling of a binary slice. `labels[i]` is 0 for background and
/// `1..=count` otherwise; ids are assigned in raster order of each
/// component's first pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    pub labels: Vec<u32>,
    pub sizes: Vec<usize>,
    /// Raster index of each component's first pixel.
    pub first_index: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Pixel indices of component `id` (1-based).
    pub fn members(&self, id: u32) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == id).collect()
    }

    /// Largest component; among equal sizes the one whose lexicographically
    /// smallest `(row, col)` pixel comes first.
    pub fn largest(&self) -> Option<u32> {
        (0..self.count())
            .max_by(|&a, &b| {
                self.sizes[a]
                    .cmp(&self.sizes[b])
                    .then(self.first_index[b].cmp(&self.first_index[a]))
            })
            .map(|i| i as u32 + 1)
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Two-pass union-find labelling.
pub fn connected_components_2d(binary: &[bool], h: usize, w: usize, connectivity: Connectivity) -> Components {
    assert_eq!(binary.len(), h * w, "binary slice does not match {h}x{w}");
    let mut provisional = vec![0u32; h * w];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !binary[i] {
                continue;
            }
            let mut current = 0u32;
            for &(dy, dx) in connectivity.offsets() {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || nx >= w as isize {
                    continue;
                }
                let l = provisional[ny as usize * w + nx as usize];
                if l == 0 {
                    continue;
                }
                if current == 0 {
                    current = find(&mut parent, l);
                } else {
                    let (a, b) = (find(&mut parent, current), find(&mut parent, l));
                    if a != b {
                        let (lo, hi) = (a.min(b), a.max(b));
                        parent[hi as usize] = lo;
                        current = lo;
                    }
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            provisional[i] = current;
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut first_index = Vec::new();
    for i in 0..h * w {
        if provisional[i] == 0 {
            continue;
        }
        let root = find(&mut parent, provisional[i]) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            first_index.push(i);
            remap[root] = sizes.len() as u32;
        }
        let id = remap[root];
        labels[i] = id;
        sizes[id as usize - 1] += 1;
    }
    Components {
        labels,
        sizes,
        first_index,
    }
}

/// The `ceil(q / 100 * n)`-th smallest value.
pub fn percentile_nearest_rank(values: &[f32], q: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::Input("percentile of an empty set".into()));
    }
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::Input(format!("percentile {q} outside (0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len();
    let rank = ((q * n as f64 / 100.0) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(sorted[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_slice_has_no_components() {
        let c = connected_components_2d(&[false; 12], 3, 4, Connectivity::Eight);
        assert_eq!(c.count(), 0);
        assert_eq!(c.largest(), None);
    }

    #[test]
    fn diagonal_pixels() {
        let b = [true, false, false, true];
        assert_eq!(connected_components_2d(&b, 2, 2, Connectivity::Four).count(), 2);
        assert_eq!(connected_components_2d(&b, 2, 2, Connectivity::Eight).count(), 1);
    }

    #[test]
    fn u_shape_merges() {
        #[rustfmt::skip]
        let b = [
            true, false, true,
            true, false, true,
            true, true,  true,
        ];
        let c = connected_components_2d(&b, 3, 3, Connectivity::Four);
        assert_eq!(c.count(), 1);
        assert_eq!(c.sizes, vec![7]);
    }

    #[test]
    fn tie_prefers_first_raster_pixel() {
        #[rustfmt::skip]
        let b = [
            false, false, true,
            true,  false, true,
            true,  false, false,
        ];
        let c = connected_components_2d(&b, 3, 3, Connectivity::Four);
        assert_eq!(c.sizes, vec![2, 2]);
        let id = c.largest().unwrap();
        assert_eq!(c.members(id), vec![2, 5]);
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f32> = (1..=20).map(|x| x as f32).collect();
        assert_eq!(percentile_nearest_rank(&v, 85.0).unwrap(), 17.0);
        assert_eq!(percentile_nearest_rank(&v, 100.0).unwrap(), 20.0);
        assert_eq!(percentile_nearest_rank(&[4.5], 37.0).unwrap(), 4.5);
        assert!(percentile_nearest_rank(&[], 50.0).is_err());
        assert!(percentile_nearest_rank(&v, 0.0).is_err());
    }

    fn flood_fill(bits: &[bool], h: usize, w: usize, eight: bool) -> Vec<u32> {
        let mut lab = vec![0u32; h * w];
        let mut next = 0;
        for start in 0..h * w {
            if !bits[start] || lab[start] != 0 {
                continue;
            }
            next += 1;
            let mut stack = vec![start];
            lab[start] = next;
            while let Some(v) = stack.pop() {
                let (y, x) = ((v / w) as isize, (v % w) as isize);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        if (dy, dx) == (0, 0) || (!eight && dy != 0 && dx != 0) {
                            continue;
                        }
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let u = ny as usize * w + nx as usize;
                        if bits[u] && lab[u] == 0 {
                            lab[u] = next;
                            stack.push(u);
                        }
                    }
                }
            }
        }
        lab
    }

    proptest! {
        #[test]
        fn percentile_is_permutation_invariant(mut v in proptest::collection::vec(-100f32..100.0, 1..60), q in 0.1f64..100.0) {
            let a = percentile_nearest_rank(&v, q).unwrap();
            v.reverse();
            prop_assert_eq!(a, percentile_nearest_rank(&v, q).unwrap());
            let below = v.iter().filter(|&&x| x <= a).count();
            prop_assert!(below as f64 >= q / 100.0 * v.len() as f64 - 1e-9);
        }

        #[test]
        fn labelling_matches_flood_fill(bits in proptest::collection::vec(any::<bool>(), 256), eight in any::<bool>()) {
            let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
            let c = connected_components_2d(&bits, 16, 16, conn);
            let oracle = flood_fill(&bits, 16, 16, eight);
            prop_assert_eq!(c.count(), oracle.iter().copied().max().unwrap_or(0) as usize);
            for i in 0..256 {
                for j in 0..256 {
                    prop_assert_eq!(c.labels[i] == c.labels[j], oracle[i] == oracle[j]);
                }
            }
        }
    }
}
