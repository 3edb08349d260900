use scarcascade::data::{BLOOD_POOL, MVO, MYOCARDIUM, SCAR};
use scarcascade::synthgen::{generate_phantoms, PhantomConfig};

fn mean_of(data: &[f32], labels: &[u8], class: u8) -> Option<f64> {
    let v: Vec<f64> = data
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == class)
        .map(|(&x, _)| x as f64)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[test]
fn anatomy_invariants_hold_for_every_case() {
    let cfg = PhantomConfig { count: 40, seed: 21, ..PhantomConfig::default() };
    let phantoms = generate_phantoms(&cfg).unwrap();
    let [d, h, w] = cfg.shape;
    let mut with_mvo = 0;
    for p in &phantoms {
        let labels = p.mask.labels();
        let mut scarred = Vec::new();
        for z in 0..d {
            let [rb, ro] = p.radii[z];
            let (mut n_inf, mut n_mvo) = (0, 0);
            for y in 0..h {
                for x in 0..w {
                    let l = labels[(z * h + y) * w + x];
                    let (dy, dx) = (y as f64 + 0.5 - p.center[0], x as f64 + 0.5 - p.center[1]);
                    let r = (dy * dy + dx * dx).sqrt();
                    if l == MYOCARDIUM || l == SCAR || l == MVO {
                        assert!(r >= rb && r < ro, "{}: wall voxel outside annulus", p.volume.case_id());
                    }
                    if l == BLOOD_POOL {
                        assert!(r < rb);
                    }
                    n_inf += usize::from(l == SCAR || l == MVO);
                    n_mvo += usize::from(l == MVO);
                }
            }
            if n_inf > 0 {
                scarred.push(z);
            }
            // MVO is a core inside scar, never the whole infarct of a slice.
            assert!(n_mvo == 0 || n_mvo < n_inf);
        }
        if p.healthy {
            assert!(scarred.is_empty());
        } else {
            assert!(scarred.len() >= 2, "{}: scar on {} slices", p.volume.case_id(), scarred.len());
            assert!(scarred.windows(2).all(|s| s[1] == s[0] + 1), "scar slices must be contiguous");
        }
        with_mvo += usize::from(labels.contains(&MVO));
    }
    assert_eq!(phantoms.iter().filter(|p| p.healthy).count(), 13);
    assert!(with_mvo > 0);
}

#[test]
fn scar_is_hyperenhanced_and_mvo_hypointense() {
    let cfg = PhantomConfig { count: 20, seed: 5, ..PhantomConfig::default() };
    let sigma = cfg.intensity.noise_sigma;
    for p in generate_phantoms(&cfg).unwrap() {
        let (data, labels) = (p.volume.data(), p.mask.labels());
        let myo = mean_of(data, labels, MYOCARDIUM).unwrap();
        if let Some(scar) = mean_of(data, labels, SCAR) {
            assert!(scar > myo + 2.0 * sigma);
            if let Some(mvo) = mean_of(data, labels, MVO) {
                assert!(mvo < scar);
            }
        }
    }
}
