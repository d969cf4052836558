use geognn::graph::Graph;
use geognn::model::{GeoModel, GraphContext, ModelConfig};
use geognn::synth::{generate, SynthSpec};
use geognn::train::{
    gradient_check_geognn, train_mlp_classifier, train_node_classifier, train_seeds, Aggregate, NodeSplits, TaskData,
    TrainConfig,
};

fn small_data() -> (ndarray::Array2<f64>, Graph, Vec<usize>, NodeSplits) {
    let data = generate(&SynthSpec {
        n: 120,
        d: 8,
        classes: 3,
        kappa: 30.0,
        p_in: 0.1,
        p_out: 0.01,
        seed: 5,
    })
    .unwrap();
    let graph = Graph::undirected_with_self_loops(&data.edges, 120).unwrap();
    let splits = NodeSplits::random(120, (0.6, 0.2, 0.2), 0).unwrap();
    (data.features, graph, data.labels, splits)
}

fn model_config() -> ModelConfig {
    ModelConfig {
        heads: 2,
        head_dim: 8,
        dropout: 0.0,
        ..Default::default()
    }
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-2,
        seeds: vec![0, 1],
        ..Default::default()
    }
}

#[test]
fn smoothed_loss_does_not_increase() {
    let (x, g, y, s) = small_data();
    let run = train_node_classifier(&model_config(), &train_config(60), &x, &g, &y, &s, 0).unwrap();
    let losses: Vec<f64> = run.record.epochs.iter().map(|e| e.train_loss).collect();
    let window = |i: usize| losses[i..i + 10].iter().sum::<f64>() / 10.0;
    for i in (0..losses.len() - 20).step_by(10) {
        assert!(window(i + 10) <= window(i) + 1e-9, "{losses:?}");
    }
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn reported_test_is_at_best_validation_epoch() {
    let (x, g, y, s) = small_data();
    let run = train_node_classifier(&model_config(), &train_config(40), &x, &g, &y, &s, 1).unwrap();
    let rec = &run.record;
    let best = &rec.epochs[rec.best_epoch - 1];
    assert_eq!(best.epoch, rec.best_epoch);
    assert_eq!(best.val, rec.best_val);
    assert!(rec.epochs.iter().all(|e| e.val <= rec.best_val));

    // the returned model is the checkpoint, so re-evaluating it reproduces the record
    let probs = run.model.predict_proba(&x, &GraphContext::new(&g)).unwrap();
    let test = geognn::train::evaluate_accuracy(&probs, &y, &s.test).unwrap();
    assert_eq!(test, rec.test);
}

#[test]
fn same_seed_same_record() {
    let (x, g, y, s) = small_data();
    let a = train_node_classifier(&model_config(), &train_config(15), &x, &g, &y, &s, 3).unwrap();
    let b = train_node_classifier(&model_config(), &train_config(15), &x, &g, &y, &s, 3).unwrap();
    assert_eq!(a.record, b.record);
    assert_eq!(a.model, b.model);
    let m1 = train_mlp_classifier(16, 0.5, &train_config(15), &x, &y, &s, 3).unwrap();
    let m2 = train_mlp_classifier(16, 0.5, &train_config(15), &x, &y, &s, 3).unwrap();
    assert_eq!(m1.record, m2.record);
}

#[test]
fn aggregate_is_mean_over_seeds() {
    let (x, g, y, s) = small_data();
    let data = TaskData::Node {
        features: &x,
        graph: &g,
        labels: &y,
        splits: &s,
    };
    let (runs, agg) = train_seeds(&model_config(), &train_config(10), &data).unwrap();
    assert_eq!(runs.len(), 2);
    let mean = runs.iter().map(|r| r.record.test).sum::<f64>() / 2.0;
    assert!((agg.mean - mean).abs() < 1e-15);
    let again = Aggregate::from_records(&runs.iter().map(|r| r.record.clone()).collect::<Vec<_>>()).unwrap();
    assert_eq!(again, agg);
}

#[test]
fn patience_stops_early() {
    let (x, g, y, s) = small_data();
    let mut tc = train_config(200);
    tc.patience = Some(3);
    let run = train_node_classifier(&model_config(), &tc, &x, &g, &y, &s, 0).unwrap();
    assert!(run.record.epochs.len() < 200);
    assert!(run.record.epochs.len() - run.record.best_epoch <= 3);
}

#[test]
fn geognn_gradients_match_finite_differences() {
    let report = gradient_check_geognn(0, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn checkpoint_restores_predictions() {
    let (x, g, y, s) = small_data();
    let run = train_node_classifier(&model_config(), &train_config(5), &x, &g, &y, &s, 0).unwrap();
    let bytes = geognn::io::encode_checkpoint(&run.model).unwrap();
    let back: GeoModel = geognn::io::decode_checkpoint(&bytes).unwrap();
    let ctx = GraphContext::new(&g);
    assert_eq!(
        run.model.predict_proba(&x, &ctx).unwrap(),
        back.predict_proba(&x, &ctx).unwrap()
    );
}
