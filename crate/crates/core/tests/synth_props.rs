use std::collections::HashSet;

use slabseg::geometry::{detect_fiducials, FiducialTemplate};
use slabseg::raster::{connected_components, Connectivity};
use slabseg::synth::{
    generate_label_map, make_dataset, render_photo, sample_palette, FiducialLayout, Label, SynthConfig, SynthError,
};

fn cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn label_maps_are_deterministic() {
    let c = cfg(7);
    for index in 0..5 {
        assert_eq!(
            generate_label_map(&c, index).unwrap(),
            generate_label_map(&c, index).unwrap()
        );
    }
    assert_ne!(generate_label_map(&c, 0).unwrap(), generate_label_map(&c, 1).unwrap());
}

#[test]
fn single_slab_config_gives_one_component() {
    let c = SynthConfig {
        slabs_per_image: [1, 1],
        distractor_probability: 0.0,
        ..cfg(3)
    };
    for index in 0..20 {
        let lm = generate_label_map(&c, index).unwrap();
        assert_eq!(lm.slab_count, 1);
        assert_eq!(connected_components(&lm.reference_mask(), Connectivity::Eight).count, 1);
    }
}

#[test]
fn thousand_maps_have_separate_slabs_and_attached_rims() {
    let c = SynthConfig { ruler: true, ..cfg(11) };
    let mut rim_seen = 0;
    for index in 0..1000 {
        let lm = generate_label_map(&c, index).unwrap();
        let tissue = lm.mask_of(Label::Tissue);
        let rim = lm.mask_of(Label::Rim);
        // Overlapping or touching slabs would merge into fewer components.
        let comps = connected_components(&tissue, Connectivity::Eight);
        assert_eq!(comps.count as usize, lm.slab_count, "index {index}");

        let rims = connected_components(&rim, Connectivity::Four);
        let (h, w) = rim.dims();
        let mut attached = vec![false; rims.count as usize + 1];
        for r in 0..h {
            for c in 0..w {
                let l = rims.get(r, c) as usize;
                if l == 0 {
                    continue;
                }
                for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && nr < h as i64 && nc < w as i64 && tissue.get(nr as usize, nc as usize) {
                        attached[l] = true;
                    }
                }
            }
        }
        assert!(attached[1..].iter().all(|&a| a), "detached rim in map {index}");
        rim_seen += rims.count;

        // The reference is exactly the tissue label.
        let reference = lm.reference_mask();
        for (i, &b) in reference.bits().iter().enumerate() {
            assert_eq!(b, lm.labels()[i] == Label::Tissue as u8);
        }
    }
    assert!(rim_seen > 1000);
}

#[test]
fn overcrowded_config_fails_placement() {
    let c = SynthConfig {
        slabs_per_image: [4, 4],
        slab_size_mm: [40.0, 45.0],
        max_attempts: 20,
        ..cfg(0)
    };
    assert!(matches!(
        generate_label_map(&c, 0),
        Err(SynthError::PlacementFailure { .. })
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        SynthConfig {
            distractor_probability: 1.5,
            ..cfg(0)
        },
        SynthConfig {
            slab_size_mm: [10.0, 5.0],
            ..cfg(0)
        },
        SynthConfig {
            slabs_per_image: [0, 2],
            ..cfg(0)
        },
        SynthConfig {
            spacing_mm: 0.0,
            ..cfg(0)
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(SynthError::InvalidConfig(_))), "{c:?}");
    }
}

#[test]
fn clean_render_is_piecewise_constant_at_sampled_means() {
    let mut c = cfg(5);
    c.noise_sigma = 0.0;
    c.blur_sigma_mm = [0.0, 0.0];
    c.contrast.modulation = [0.0, 0.0];
    c.distractor_probability = 1.0;
    for index in 0..10 {
        let lm = generate_label_map(&c, index).unwrap();
        let (img, mask) = render_photo(&lm, &c, index);
        let p = sample_palette(&c, index);
        assert_eq!(mask, lm.reference_mask());
        for r in 0..lm.height() {
            for col in 0..lm.width() {
                let want = match lm.get(r, col) {
                    0 => p.background,
                    1 => p.tissue,
                    2 => p.rim,
                    3 => p.distractor,
                    _ => continue,
                };
                for (ch, &w) in want.iter().enumerate() {
                    assert_eq!(img.get(ch, r, col), w);
                }
            }
        }
    }
}

#[test]
fn contrast_is_randomized_per_image() {
    let c = cfg(9);
    let differing = (0..100u64)
        .filter(|&i| {
            let a = sample_palette(&c, 2 * i);
            let b = sample_palette(&c, 2 * i + 1);
            a.tissue != b.tissue && a.rim != b.rim && a.background != b.background
        })
        .count();
    assert!(differing >= 99, "{differing}");
}

#[test]
fn rendered_fiducials_are_detected_within_two_pixels() {
    let c = SynthConfig {
        fiducials: Some(FiducialLayout {
            rect_mm: [50.0, 50.0],
            cell_mm: 1.0,
        }),
        ..cfg(21)
    };
    let layout = c.fiducials.clone().unwrap();
    let cell_px = (layout.cell_mm / c.spacing_mm).round() as usize;
    let templates = FiducialTemplate::standard_set(cell_px, 50.0, 50.0, &[1.0]).unwrap();
    for index in 0..5 {
        let lm = generate_label_map(&c, index).unwrap();
        let (img, _) = render_photo(&lm, &c, index);
        let found = detect_fiducials(&img, &templates, 0.7).unwrap();
        for f in &lm.fiducials {
            let corner = templates[f.id].position_mm;
            let best = found
                .iter()
                .filter(|p| p.dst == corner)
                .max_by(|a, b| a.score.total_cmp(&b.score))
                .expect("candidate for every marker");
            let (x, y) = (f.centre_mm.0 / c.spacing_mm, f.centre_mm.1 / c.spacing_mm);
            let err = ((best.src.0 - x).powi(2) + (best.src.1 - y).powi(2)).sqrt();
            assert!(err <= 2.0, "marker {} off by {err} px", f.id);
        }
    }
}

#[test]
fn config_round_trips_through_toml_and_json() {
    let c = SynthConfig {
        fiducials: Some(FiducialLayout {
            rect_mm: [40.0, 30.0],
            cell_mm: 1.5,
        }),
        ..cfg(4)
    };
    let t = toml::to_string(&c).unwrap();
    assert_eq!(toml::from_str::<SynthConfig>(&t).unwrap(), c);
    let j = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<SynthConfig>(&j).unwrap(), c);
    // Every field must be present.
    assert!(serde_json::from_str::<SynthConfig>(r#"{"seed": 1}"#).is_err());
}

#[test]
fn dataset_layout_and_byte_identical_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(1);
    let m1 = make_dataset(&c, 10, dir.path()).unwrap();
    assert_eq!(m1.entries.len(), 10);
    assert_eq!(std::fs::read_dir(dir.path().join("images")).unwrap().count(), 10);
    assert_eq!(std::fs::read_dir(dir.path().join("masks")).unwrap().count(), 10);
    assert!(dir.path().join("spacing.json").is_file());
    let manifest1 = std::fs::read(dir.path().join("manifest.json")).unwrap();
    let first_png = std::fs::read(dir.path().join("images/00000.png")).unwrap();

    let m2 = make_dataset(&c, 10, dir.path()).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(manifest1, std::fs::read(dir.path().join("manifest.json")).unwrap());
    assert_eq!(first_png, std::fs::read(dir.path().join("images/00000.png")).unwrap());
    assert_eq!(m1.config_hash, c.hash());
}

#[test]
fn two_seeds_give_disjoint_splits() {
    let dir = tempfile::tempdir().unwrap();
    let train = make_dataset(&cfg(100), 200, &dir.path().join("train")).unwrap();
    let eval = make_dataset(&cfg(200), 50, &dir.path().join("eval")).unwrap();
    let hashes: HashSet<&str> = train.entries.iter().map(|e| e.image_sha256.as_str()).collect();
    assert_eq!(hashes.len(), 200);
    assert!(eval.entries.iter().all(|e| !hashes.contains(e.image_sha256.as_str())));
}
