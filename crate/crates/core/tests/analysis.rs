use maf_core::algorithms::{derive_run_seed, train_run, Algorithm, RunSpec, TrainSettings};
use maf_core::analysis::{analyze_bundle, collect_features, Space, DEFAULT_SHRINKAGE};
use maf_core::protocols::{materialize, trial_hparams, Protocol};
use maf_core::synthworld::{generate_world, PerceptorMode, Split, WorldConfig};

fn analysis() -> maf_core::analysis::AnalysisReport {
    let world = generate_world(&WorldConfig {
        samples_per_modality: 800,
        ..WorldConfig::default()
    })
    .unwrap();
    let data = materialize(&world, PerceptorMode::Semantic, 2).unwrap();
    let spec = RunSpec {
        algorithm: Algorithm::Irm,
        hparams: trial_hparams(Algorithm::Irm, 0, 0).unwrap(),
        trial: 0,
        seed_index: 0,
        run_seed: derive_run_seed(0, Algorithm::Irm, 0, 0, 2),
        linear_head: false,
    };
    let settings = TrainSettings {
        steps: 100,
        eval_cadence: 50,
    };
    let out = train_run(&data, &[0, 1], 2, Protocol::Oracle, &spec, settings).unwrap();
    let bundle = collect_features(&out.model, &data, Split::Test).unwrap();
    analyze_bundle(&bundle, DEFAULT_SHRINKAGE, None).unwrap()
}

#[test]
fn report_is_complete_and_well_formed() {
    let a = analysis();
    let d = 64;
    assert_eq!(a.modalities, vec![0, 1, 2]);
    for space in Space::ALL {
        for label in [0u8, 1] {
            let kl = a.kl(space, label).unwrap();
            for (i, row) in kl.matrix.iter().enumerate() {
                assert_eq!(row[i], 0.0);
                assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
            for m in 0..3 {
                let k = a.k95(space, label, m).unwrap();
                assert!(k >= 1 && k <= d, "{k}");
            }
        }
        let (style, essence) = a.mean_r2(space);
        assert!((0.0..=1.0).contains(&style) && (0.0..=1.0).contains(&essence));
    }
    assert_eq!(a.coactivation.top_n, d / 4);
    assert!(a.coactivation.core.iter().all(|&n| n < d));
    // two spaces, three modalities, test rows of both labels
    assert_eq!(a.projection.len(), 2 * 3 * 160);
}

#[test]
fn semantic_features_are_dominated_by_style() {
    let a = analysis();
    let (style, essence) = a.mean_r2(Space::Semantic);
    assert!(style > 0.8 && essence < style, "style {style} essence {essence}");
}

#[test]
fn analysis_is_deterministic_and_serializes() {
    let a = analysis();
    let b = analysis();
    assert_eq!(a.to_json(), b.to_json());
    let back: maf_core::analysis::AnalysisReport = serde_json::from_str(&a.to_json()).unwrap();
    assert_eq!(back.k95, a.k95);
    assert!(a.kl_csv().lines().count() == 1 + 4 * 9);
}
