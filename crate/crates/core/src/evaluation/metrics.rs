use crate::data::{Shape3, Spacing};
use crate::error::{Error, Result};

fn check_len(p: &[bool], g: &[bool]) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::Shape(format!("prediction has {} voxels, reference {}", p.len(), g.len())));
    }
    Ok(())
}

/// Dice similarity coefficient; 1 when both sets are empty.
pub fn dsc(p: &[bool], g: &[bool]) -> Result<f64> {
    check_len(p, g)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(g) {
        np += a as usize;
        ng += b as usize;
        inter += (a && b) as usize;
    }
    Ok(if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    })
}

/// Absolute volume difference in mm³.
pub fn avd(p: &[bool], g: &[bool], spacing: Spacing) -> Result<f64> {
    check_len(p, g)?;
    let np = p.iter().filter(|&&v| v).count() as f64;
    let ng = g.iter().filter(|&&v| v).count() as f64;
    Ok((np - ng).abs() * spacing.voxel_volume())
}

/// Volume difference relative to the reference myocardium volume.
pub fn avdr(p: &[bool], g: &[bool], myocardium: &[bool], spacing: Spacing) -> Result<f64> {
    let v_myo = myocardium.iter().filter(|&&v| v).count() as f64 * spacing.voxel_volume();
    if v_myo == 0.0 {
        return Err(Error::Input("reference myocardium is empty".into()));
    }
    Ok(avd(p, g, spacing)? / v_myo)
}

/// Foreground voxels with at least one background 6-neighbour; the volume
/// border counts as background.
pub fn boundary(mask: &[bool], shape: Shape3) -> Vec<bool> {
    let [d, h, w] = shape;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                out[(z * h + y) * w + x] = edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
            }
        }
    }
    out
}

/// Exact squared distance transform along one axis with sample spacing `s`
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], zb: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * s;
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    zb[0] = f64::NEG_INFINITY;
    zb[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let r = v[k];
            let sx = ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)));
            if sx <= zb[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            zb[k] = sx;
            zb[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while zb[k + 1] < pos(q) {
            k += 1;
        }
        let dx = pos(q) - pos(v[k]);
        *o = dx * dx + f[v[k]];
    }
}

/// Squared physical distance from every voxel to the nearest voxel of `set`.
pub fn squared_distance_map(set: &[bool], shape: Shape3, spacing: Spacing) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut g: Vec<f64> = set.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let n = d.max(h).max(w);
    let (mut f, mut out, mut v, mut zb) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    let mut pass = |g: &mut Vec<f64>, len: usize, stride: usize, starts: Vec<usize>, s: f64| {
        for st in starts {
            for i in 0..len {
                f[i] = g[st + i * stride];
            }
            edt_1d(&f[..len], s, &mut out[..len], &mut v[..len], &mut zb[..len + 1]);
            for i in 0..len {
                g[st + i * stride] = out[i];
            }
        }
    };
    let starts_x: Vec<usize> = (0..d * h).map(|r| r * w).collect();
    pass(&mut g, w, 1, starts_x, spacing.0[2]);
    let starts_y: Vec<usize> = (0..d).flat_map(|z| (0..w).map(move |x| z * h * w + x)).collect();
    pass(&mut g, h, w, starts_y, spacing.0[1]);
    let starts_z: Vec<usize> = (0..h * w).collect();
    pass(&mut g, d, h * w, starts_z, spacing.0[0]);
    g
}

/// Symmetric Hausdorff distance in mm between the boundary voxels of two
/// masks; `None` when either mask is empty.
pub fn hausdorff_mm(p: &[bool], g: &[bool], shape: Shape3, spacing: Spacing) -> Result<Option<f64>> {
    check_len(p, g)?;
    if p.len() != shape.iter().product::<usize>() {
        return Err(Error::Shape(format!("{} voxels for shape {shape:?}", p.len())));
    }
    if !p.iter().any(|&v| v) || !g.iter().any(|&v| v) {
        return Ok(None);
    }
    let (bp, bg) = (boundary(p, shape), boundary(g, shape));
    let directed = |from: &[bool], to: &[bool]| {
        let dm = squared_distance_map(to, shape, spacing);
        from.iter()
            .zip(&dm)
            .filter(|(&b, _)| b)
            .map(|(_, &d)| d)
            .fold(0.0f64, f64::max)
    };
    Ok(Some(directed(&bp, &bg).max(directed(&bg, &bp)).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sp() -> Spacing {
        Spacing([10.0, 1.458, 1.458])
    }

    #[test]
    fn dsc_hand_values() {
        let g = [true, true, false];
        assert_eq!(dsc(&g, &g).unwrap(), 1.0);
        assert_eq!(dsc(&[true, false, false], &[false, false, true]).unwrap(), 0.0);
        assert_eq!(dsc(&[true, false, false], &g).unwrap(), 2.0 / 3.0);
        assert_eq!(dsc(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(dsc(&[true], &g).is_err());
    }

    #[test]
    fn hausdorff_singletons() {
        let shape = [1, 4, 5];
        let mut p = vec![false; 20];
        let mut g = vec![false; 20];
        p[0] = true;
        g[3 * 5 + 4] = true;
        let h = hausdorff_mm(&p, &g, shape, Spacing([10.0, 1.0, 1.0])).unwrap().unwrap();
        assert!((h - 5.0).abs() < 1e-12);
        assert_eq!(hausdorff_mm(&p, &p, shape, sp()).unwrap(), Some(0.0));
        assert_eq!(hausdorff_mm(&p, &[false; 20], shape, sp()).unwrap(), None);
    }

    #[test]
    fn avd_and_avdr_hand_values() {
        let p: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let g: Vec<bool> = (0..20).map(|i| i < 7).collect();
        let a = avd(&p, &g, sp()).unwrap();
        assert!((a - 3.0 * 10.0 * 1.458 * 1.458).abs() < 1e-9);
        assert!((a - 63.77).abs() < 0.005);
        assert_eq!(avd(&g, &p, sp()).unwrap(), a);
        let myo: Vec<bool> = (0..120).map(|i| i < 100).collect();
        let pad = |v: &[bool]| v.iter().copied().chain(std::iter::repeat(false)).take(120).collect::<Vec<_>>();
        let r = avdr(&pad(&p), &pad(&g), &myo, sp()).unwrap();
        assert!((r - 0.03).abs() < 1e-12);
        let r2 = avdr(&pad(&p), &pad(&g), &myo, Spacing([20.0, 1.458, 1.458])).unwrap();
        assert!((r - r2).abs() < 1e-15);
        assert!(avdr(&p, &g, &[false; 20], sp()).is_err());
    }

    #[test]
    fn boundary_of_solid_block() {
        let shape = [3, 3, 3];
        let m = vec![true; 27];
        let b = boundary(&m, shape);
        assert_eq!(b.iter().filter(|&&v| v).count(), 26);
        assert!(!b[13]);
    }

    fn brute_sq_dist(set: &[bool], shape: Shape3, sp: Spacing) -> Vec<f64> {
        let [d, h, w] = shape;
        let pts: Vec<[usize; 3]> = (0..set.len())
            .filter(|&i| set[i])
            .map(|i| [i / (h * w), (i / w) % h, i % w])
            .collect();
        (0..d * h * w)
            .map(|i| {
                let q = [i / (h * w), (i / w) % h, i % w];
                pts.iter()
                    .map(|p| {
                        (0..3)
                            .map(|a| ((p[a] as f64 - q[a] as f64) * sp.0[a]).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn distance_map_matches_brute_force(bits in proptest::collection::vec(proptest::bool::weighted(0.1), 4 * 6 * 5)) {
            let shape = [4, 6, 5];
            let s = Spacing([3.0, 1.3, 0.7]);
            let fast = squared_distance_map(&bits, shape, s);
            let slow = brute_sq_dist(&bits, shape, s);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a.is_infinite() && b.is_infinite()) || (a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn metrics_are_symmetric(
            p in proptest::collection::vec(any::<bool>(), 64),
            g in proptest::collection::vec(any::<bool>(), 64),
        ) {
            let shape = [4, 4, 4];
            prop_assert_eq!(dsc(&p, &g).unwrap(), dsc(&g, &p).unwrap());
            prop_assert_eq!(hausdorff_mm(&p, &g, shape, sp()).unwrap(), hausdorff_mm(&g, &p, shape, sp()).unwrap());
        }
    }
}
