use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scarcascade::data::{ClassScheme, LabelMask, Spacing, Volume, BACKGROUND, MYOCARDIUM, SCAR};
use scarcascade::perturbation::{
    add_fake_mvo, add_fake_scar, delete_class_slices, draw_operator, AuxMasks, DeleteTarget, PerturbClass,
    PerturbationConfig, PerturbationOperator,
};

fn random_case(rng: &mut ChaCha8Rng) -> (Volume, LabelMask, AuxMasks) {
    let shape = [4, 12, 12];
    let n = 4 * 144;
    let labels: Vec<u8> = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0..=3 => BACKGROUND,
            4..=7 => MYOCARDIUM,
            _ => SCAR,
        })
        .collect();
    let img: Vec<f32> = (0..n).map(|_| rng.random()).collect();
    let sp = Spacing([10.0, 1.5, 1.5]);
    let vol = Volume::new("r", shape, sp, img).unwrap();
    let gt = LabelMask::new(shape, sp, ClassScheme::Emidec, labels).unwrap();
    let scar: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
    let mvo: Vec<u8> = scar.iter().map(|&s| u8::from(s == 0 && rng.random_bool(0.05))).collect();
    (vol, gt, AuxMasks::new(shape, scar, Some(mvo)).unwrap())
}

#[test]
fn operator_frequencies_match_defaults() {
    let cfg = PerturbationConfig::emidec();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        let i = match draw_operator(&cfg, cfg.enable_after_epoch, &mut rng) {
            PerturbationOperator::DeleteClass => 0,
            PerturbationOperator::ZeroMask => 1,
            PerturbationOperator::FakeScar => 2,
            PerturbationOperator::FakeMvo => 3,
            PerturbationOperator::None => 4,
        };
        counts[i] += 1;
    }
    for (c, p) in counts.iter().zip([0.10, 0.10, 0.10, 0.02, 0.68]) {
        let f = *c as f64 / n as f64;
        assert!((f - p).abs() <= 0.01, "frequency {f} vs {p}");
    }
}

#[test]
fn fake_mvo_stays_inside_prior_scar() {
    let cfg = PerturbationConfig::emidec();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let (_, _, mut s) = random_case(&mut rng);
        let before = s.clone();
        let rec = add_fake_mvo(&mut s, &cfg, &mut rng);
        let mut added = 0;
        for i in 0..s.scar().len() {
            if s.mvo().unwrap()[i] == 1 && before.mvo().unwrap()[i] == 0 {
                assert_eq!(before.scar()[i], 1);
                added += 1;
            }
        }
        assert_eq!(added, rec.affected_voxels);
        assert!((1..=9).contains(&added));
        assert!(before.changed_slices(&s).len() <= 1);
    }
}

#[test]
fn fake_scar_inside_myocardium_of_one_slice() {
    let cfg = PerturbationConfig::emidec();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let (vol, gt, mut s) = random_case(&mut rng);
        let before = s.clone();
        let rec = add_fake_scar(&mut s, &vol, &gt, &cfg, &mut rng).unwrap();
        let changed = before.changed_slices(&s);
        assert!(changed.len() <= 1);
        if let Some(&z) = changed.first() {
            assert_eq!(rec.slice_index, Some(z));
        }
        for i in 0..s.scar().len() {
            if s.scar()[i] == 1 && before.scar()[i] == 0 {
                assert_eq!(gt.labels()[i], MYOCARDIUM);
            }
        }
    }
}

#[test]
fn deletion_is_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..300 {
        let (_, _, mut s) = random_case(&mut rng);
        let before = s.clone();
        let rec = delete_class_slices(&mut s, DeleteTarget::Scar, &mut rng);
        let changed = before.changed_slices(&s);
        assert_eq!(changed, rec.slice_index.into_iter().collect::<Vec<_>>());
        assert_eq!(s.mvo(), before.mvo());
        assert_eq!(s.count_in_slice(PerturbClass::Scar, rec.slice_index.unwrap()), 0);
    }
}
