//! Folder corpus to trained checkpoint to metrics, through the public API.

use fakescope_core::data::{build_index, EpochSpec, FileStore, LabeledRoot, PreprocessConfig, Split, SplitRule};
use fakescope_core::evalbench::{evaluate, render_report};
use fakescope_core::metrics::metrics_report;
use fakescope_core::models::ModelConfig;
use fakescope_core::toy::write_toy_corpus;
use fakescope_core::training::{fit, load_checkpoint, save_checkpoint, DataContext, TrainConfig, TrainHooks, TrainingState};

#[test]
fn folder_corpus_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    write_toy_corpus(&corpus, 30, 24, 9).unwrap();
    let rule = SplitRule::Stratified { val_fraction: 0.15, test_fraction: 0.3, seed: 9 };
    let (index, report) = build_index(&LabeledRoot::corpus(&corpus), &rule).unwrap();
    assert!(report.exclusions.is_empty());
    assert_eq!(report.train.total() + report.val.total() + report.test.total(), 60);

    let path = dir.path().join("index.txt");
    index.save(&path).unwrap();
    let index = fakescope_core::DatasetIndex::load(&path).unwrap();

    let preprocess = PreprocessConfig::with_size(32);
    let spec = EpochSpec { images_per_epoch: 32, batch_size: 8, seed: 9 };
    let data = DataContext { index: &index, store: &FileStore, preprocess: &preprocess, epoch_spec: &spec, threshold: 0.5 };
    let mut state = TrainingState::new(&ModelConfig::tiny(), &TrainConfig::default()).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    fit(&mut state, &data, 6, &TrainHooks::default(), |st, _| save_checkpoint(st, &ckpt)).unwrap();

    let model = load_checkpoint(&ckpt, None).unwrap().model;
    assert_eq!(model.weights_digest().unwrap(), state.model.weights_digest().unwrap());
    let test = index.split_records(Split::Test);
    let (scores, labels) = evaluate(&model, &test, &FileStore, &preprocess, 16).unwrap();
    let m = metrics_report(&scores, &labels, 0.5).unwrap();
    assert!(m.auc >= 0.95, "test AUC {}", m.auc);
    let table = render_report(&[("tiny".into(), m)]).unwrap().table;
    assert!(table.starts_with("Model"));
}
