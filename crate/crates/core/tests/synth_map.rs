use lcz_core::eval::{classify_map, palette_json, report, save_map, PatchClassifier};
use lcz_core::forest::{patch_features, train_rf, ForestParams};
use lcz_core::raster::{load_raster, map_point_to_pixel, Patch, RasterGrid};
use lcz_core::sampling::{parse_source_flags, rule_assist_label, summarize_site, RuleConfig};
use lcz_core::synth::{generate_dataset, generate_scene, Scenario, ScenarioSpec};
use lcz_core::{LczClass, Result};

fn six() -> Vec<LczClass> {
    [0u8, 3, 7, 10, 13, 16].iter().map(|&c| LczClass::from_code(c).unwrap()).collect()
}

#[test]
fn rules_recover_every_generated_point() {
    let rules = RuleConfig::default();
    let mut seen = [false; 17];
    for seed in 0..6 {
        let spec = ScenarioSpec {
            noise_sigma: 0.0,
            width: 384,
            height: 384,
            seed,
            ..ScenarioSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        for p in &scene.points {
            let pixel = map_point_to_pixel(&scene.bands, p.x, p.y).unwrap();
            let mut site = summarize_site(&scene.layers(), pixel, 32).unwrap();
            site.flags = parse_source_flags(&p.source).unwrap();
            assert_eq!(rule_assist_label(&site, &rules).unwrap().0, p.label, "seed {seed} {p:?}");
            seen[p.label.index()] = true;
        }
    }
    assert!(seen.iter().all(|&s| s), "{seen:?}");
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    for scenario in [Scenario::Means, Scenario::Texture, Scenario::Shifted] {
        let spec = ScenarioSpec {
            scenario,
            width: 200,
            height: 150,
            seed: 3,
            ..ScenarioSpec::default()
        };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        assert_eq!(generate_dataset(&spec, 3).unwrap(), generate_dataset(&spec, 3).unwrap());
    }
    let bad = ScenarioSpec {
        blob_size_min: 8,
        ..ScenarioSpec::default()
    };
    assert!(generate_scene(&bad).is_err());
    assert!(generate_scene(&ScenarioSpec { classes: vec![], ..ScenarioSpec::default() }).is_err());
}

/// Welch t statistic per feature between two classes.
fn max_t(a: &[Vec<f32>], b: &[Vec<f32>]) -> f64 {
    let stats = |xs: &[Vec<f32>], k: usize| {
        let n = xs.len() as f64;
        let m = xs.iter().map(|x| x[k] as f64).sum::<f64>() / n;
        let v = xs.iter().map(|x| (x[k] as f64 - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v / n)
    };
    (0..a[0].len())
        .map(|k| {
            let ((ma, va), (mb, vb)) = (stats(a, k), stats(b, k));
            (ma - mb).abs() / (va + vb).sqrt().max(1e-12)
        })
        .fold(0.0, f64::max)
}

#[test]
fn texture_features_are_indistinguishable_but_means_are_not() {
    let texture = ScenarioSpec {
        scenario: Scenario::Texture,
        classes: six(),
        seed: 21,
        ..ScenarioSpec::default()
    };
    let set = generate_dataset(&texture, 60).unwrap();
    let by_class = |set: &lcz_core::sampling::SampleSet, c: LczClass| -> Vec<Vec<f32>> {
        set.patches.iter().zip(&set.labels).filter(|(_, &l)| l == c).map(|(p, _)| patch_features(p)).collect()
    };
    let classes = six();
    for (i, &a) in classes.iter().enumerate() {
        for &b in &classes[i + 1..] {
            // a t of 5 over 20 features and 15 pairs is far outside the noise floor
            let t = max_t(&by_class(&set, a), &by_class(&set, b));
            assert!(t < 5.0, "{a:?} vs {b:?}: t = {t}");
        }
    }

    let means = ScenarioSpec {
        scenario: Scenario::Means,
        ..texture
    };
    let set = generate_dataset(&means, 20).unwrap();
    let t = max_t(&by_class(&set, classes[0]), &by_class(&set, classes[1]));
    assert!(t > 50.0, "{t}");
}

#[test]
fn forest_separates_means_but_not_texture() {
    let params = ForestParams { n_trees: 30, ..ForestParams::default() };
    for (scenario, check) in [(Scenario::Means, 0.95..=1.0), (Scenario::Texture, 0.0..=0.45)] {
        let spec = ScenarioSpec { scenario, classes: six(), seed: 5, ..ScenarioSpec::default() };
        let train = generate_dataset(&spec, 60).unwrap();
        let test = generate_dataset(&ScenarioSpec { seed: 6, ..spec }, 30).unwrap();
        let rf = train_rf(&train, &params, 7).unwrap();
        let oa = report(&rf, &test).unwrap().overall_accuracy;
        assert!(check.contains(&oa), "{scenario:?}: {oa}");
    }
}

struct Constant(LczClass);

impl PatchClassifier for Constant {
    fn classify(&self, patches: &[&Patch]) -> Result<Vec<LczClass>> {
        Ok(vec![self.0; patches.len()])
    }
}

#[test]
fn map_geometry_and_border_band() {
    let grid = RasterGrid::filled(640, 480, 2, 10.0, 0.5);
    let map = classify_map(&Constant(LczClass::LCZ6), &grid, 100.0).unwrap();
    assert_eq!((map.width, map.height, map.n_bands), (64, 48, 1));
    assert_eq!(map.pixel_size_m, 100.0);
    assert_eq!((map.origin_x, map.origin_y), (grid.origin_x, grid.origin_y));
    for i in 0..48 {
        for j in 0..64 {
            let border = !(2..46).contains(&i) || !(2..62).contains(&j);
            let v = map.get(0, i, j);
            assert_eq!(map.is_nodata(v), border, "cell ({i},{j})");
            if !border {
                assert_eq!(v, 5.0);
            }
        }
    }

    // a nodata pixel knocks out only the cells whose patch covers it
    let mut holed = grid.clone();
    holed.set(1, 205, 305, holed.nodata);
    let map = classify_map(&Constant(LczClass::LCZ6), &holed, 100.0).unwrap();
    let dead: Vec<(usize, usize)> = (0..48)
        .flat_map(|i| (0..64).map(move |j| (i, j)))
        .filter(|&(i, j)| !(!(2..46).contains(&i) || !(2..62).contains(&j)) && map.is_nodata(map.get(0, i, j)))
        .collect();
    assert_eq!(dead.len(), 9);
    assert!(dead.iter().all(|&(i, j)| (19..=21).contains(&i) && (29..=31).contains(&j)));

    assert!(classify_map(&Constant(LczClass::A), &grid, 25.0).is_err());
    assert!(classify_map(&Constant(LczClass::A), &RasterGrid::filled(9, 40, 1, 10.0, 0.0), 100.0).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.rawg");
    save_map(&map, &path).unwrap();
    assert_eq!(load_raster(&path).unwrap(), map);
    let palette: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("map.palette.json")).unwrap()).unwrap();
    assert_eq!(palette.as_array().unwrap().len(), 17);
    assert_eq!(palette_json().unwrap(), std::fs::read(dir.path().join("map.palette.json")).unwrap());
}

#[test]
fn forest_map_of_a_means_scene_tracks_ground_truth() {
    let spec = ScenarioSpec {
        classes: six(),
        width: 960,
        height: 960,
        blob_size_min: 200,
        blob_size_max: 320,
        seed: 8,
        ..ScenarioSpec::default()
    };
    let train = generate_dataset(&ScenarioSpec { blob_size_min: 48, blob_size_max: 96, width: 512, height: 512, ..spec.clone() }, 40).unwrap();
    let rf = train_rf(&train, &ForestParams { n_trees: 30, ..ForestParams::default() }, 1).unwrap();
    let scene = generate_scene(&spec).unwrap();
    let map = classify_map(&rf, &scene.bands, 100.0).unwrap();
    let (mut hit, mut total) = (0, 0);
    for i in 0..map.height {
        for j in 0..map.width {
            let v = map.get(0, i, j);
            let truth = scene.truth.get(0, i * 10 + 5, j * 10 + 5);
            if map.is_nodata(v) || scene.truth.is_nodata(truth) {
                continue;
            }
            total += 1;
            hit += usize::from(v == truth);
        }
    }
    let acc = hit as f64 / total as f64;
    assert!(total > 3000 && acc >= 0.9, "{hit}/{total}");
}
