use vcsl_core::probe::toy_model_config;
use vcsl_core::scalar::Scalar;
use vcsl_core::training::corpus::{generate_corpus, SyntheticCorpusSpec};
use vcsl_core::training::{run_stage, ModelConfig, ModelState, Stage, StageConfig, TrainConfig};
use vcsl_core::volume::Volume;
use vcsl_core::Error;

fn corpus<T: Scalar>(cfg: &ModelConfig) -> Vec<Volume<T>> {
    let spec = SyntheticCorpusSpec {
        volumes_per_dataset: vec![4, 4],
        slices: cfg.slices,
        extent: cfg.encoder.input_extent,
        classes: 2,
        ..SyntheticCorpusSpec::default()
    };
    generate_corpus::<T>(&spec).unwrap().volumes().to_vec()
}

fn stage_config(lr: f64) -> StageConfig {
    StageConfig {
        train: TrainConfig {
            epochs: 2,
            slice_batch: 8,
            volume_batch: 4,
            learning_rate: lr,
            cold_start: true,
            ..TrainConfig::default()
        },
        ..StageConfig::default()
    }
}

fn snapshot(state: &ModelState<f64>, prefix: &str) -> Vec<(String, Vec<u64>)> {
    state
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let cfg = toy_model_config();
    let volumes = corpus::<f64>(&cfg);
    for stage in [Stage::Slice, Stage::Mask, Stage::Volume] {
        let mut state = ModelState::<f64>::new(&cfg, 3).unwrap();
        let before = snapshot(&state, "");
        run_stage(stage, &mut state, &volumes, &stage_config(0.0)).unwrap();
        assert_eq!(snapshot(&state, ""), before, "{stage:?} moved parameters at lr 0");
    }
}

#[test]
fn slice_stage_leaves_attention_and_decoder_alone() {
    let cfg = toy_model_config();
    let volumes = corpus::<f64>(&cfg);
    let mut state = ModelState::<f64>::new(&cfg, 1).unwrap();
    let frozen: Vec<_> = ["attention.", "decoder.", "mask."].iter().map(|p| snapshot(&state, p)).collect();
    let encoder = snapshot(&state, "encoder.");
    run_stage(Stage::Slice, &mut state, &volumes, &stage_config(0.05)).unwrap();
    for (p, before) in ["attention.", "decoder.", "mask."].iter().zip(frozen) {
        assert_eq!(snapshot(&state, p), before, "{p} changed in stage 1");
    }
    assert_ne!(snapshot(&state, "encoder."), encoder);
    assert!(state.progress.done(Stage::Slice));
}

#[test]
fn mask_stage_freezes_encoder_and_prototypes() {
    let cfg = toy_model_config();
    let volumes = corpus::<f64>(&cfg);
    let mut state = ModelState::<f64>::new(&cfg, 2).unwrap();
    let encoder = snapshot(&state, "encoder.");
    let prototypes = snapshot(&state, "prototypes");
    let attention = snapshot(&state, "attention.");
    run_stage(Stage::Mask, &mut state, &volumes, &stage_config(0.05)).unwrap();
    assert_eq!(snapshot(&state, "encoder."), encoder);
    assert_eq!(snapshot(&state, "prototypes"), prototypes);
    assert_ne!(snapshot(&state, "attention."), attention);
}

#[test]
fn volume_stage_moves_the_shared_prototypes() {
    let cfg = toy_model_config();
    let volumes = corpus::<f64>(&cfg);
    let mut state = ModelState::<f64>::new(&cfg, 4).unwrap();
    let prototypes = snapshot(&state, "prototypes");
    run_stage(Stage::Volume, &mut state, &volumes, &stage_config(0.05)).unwrap();
    assert_ne!(snapshot(&state, "prototypes"), prototypes);
    for j in 0..state.prototypes.count() {
        let norm: f64 = state.prototypes.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn later_stages_require_earlier_ones() {
    let cfg = toy_model_config();
    let volumes = corpus::<f64>(&cfg);
    let mut state = ModelState::<f64>::new(&cfg, 0).unwrap();
    let mut sc = stage_config(0.05);
    sc.train.cold_start = false;
    let err = run_stage(Stage::Mask, &mut state, &volumes, &sc).unwrap_err();
    assert!(matches!(err, Error::Prerequisite(_)), "{err}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = toy_model_config();
    let volumes = corpus::<f64>(&cfg);
    let run = || {
        let mut state = ModelState::<f64>::new(&cfg, 9).unwrap();
        let metrics = run_stage(Stage::Slice, &mut state, &volumes, &stage_config(0.05)).unwrap();
        (metrics, snapshot(&state, ""))
    };
    assert_eq!(run(), run());
}

#[test]
fn single_precision_trains() {
    let cfg = toy_model_config();
    let volumes = corpus::<f32>(&cfg);
    let mut state = ModelState::<f32>::new(&cfg, 5).unwrap();
    let metrics = run_stage(Stage::Slice, &mut state, &volumes, &stage_config(0.05)).unwrap();
    assert_eq!(metrics.len(), 2);
    assert!(metrics.iter().all(|m| m.loss.is_finite()));
}
