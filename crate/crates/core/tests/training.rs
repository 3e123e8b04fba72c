use permgnn::autodiff::{Optimizer, OptimizerConfig};
use permgnn::graph::{make_split, EvalSplit, Graph, SplitRatios};
use permgnn::trainer::{Mode, Phase, TrainConfig, Trainer};
use permgnn::Error;

/// Two 4-cliques joined by one bridge edge.
fn toy() -> (Graph, EvalSplit, Graph) {
    let mut edges = Vec::new();
    for base in [0, 4] {
        for u in base..base + 4 {
            for v in (u + 1)..base + 4 {
                edges.push((u, v));
            }
        }
    }
    edges.push((3, 4));
    let g = Graph::new(8, edges, None).unwrap();
    let split = make_split(&g, SplitRatios::new(0.8, 0.1, 0.1).unwrap(), 5).unwrap();
    let train = split.training_graph(&g).unwrap();
    (g, split, train)
}

fn config(mode: Mode) -> TrainConfig {
    let mut c = TrainConfig::preset("twitter").unwrap();
    c.mode = mode;
    c.optimizer = OptimizerConfig::adam(0.01);
    c.margin = 0.5;
    c.batch_queries = 0;
    c.epochs_max = 150;
    c.seed = 11;
    c
}

#[test]
fn toy_loss_falls_tenfold() {
    let (_, split, train) = toy();
    for mode in [Mode::OnePerm, Mode::PermGnn, Mode::MultiPerm(2)] {
        let t = Trainer::new(&train, &split, config(mode)).unwrap();
        let (theta, phi) = t.init_params().unwrap();
        let triples = t.exhaustive_triples();
        let (before, _) = t
            .batch_objective(&theta, Some(&phi), &triples, 0, Phase::Theta, false)
            .unwrap();
        let out = t.run(Some(theta), Some(phi)).unwrap();
        let trained = &out.trace.records.last().unwrap().loss;
        assert!(*trained < 0.1 * before, "{mode}: {before} -> {trained}");
    }
}

#[test]
fn training_is_deterministic() {
    let (_, split, train) = toy();
    let mut c = config(Mode::PermGnn);
    c.epochs_max = 5;
    c.batch_queries = 2;
    let strip = |o: &permgnn::trainer::TrainOutcome| -> Vec<(usize, f64, f64, f64)> {
        o.trace
            .records
            .iter()
            .map(|r| (r.epoch, r.loss, r.val_auc, r.val_ap))
            .collect()
    };
    let a = Trainer::new(&train, &split, c.clone())
        .unwrap()
        .run(None, None)
        .unwrap();
    let b = Trainer::new(&train, &split, c)
        .unwrap()
        .run(None, None)
        .unwrap();
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.phi, b.phi);
}

#[test]
fn min_max_steps_move_the_loss_in_opposite_directions() {
    let (_, split, train) = toy();
    let c = config(Mode::PermGnn);
    let t = Trainer::new(&train, &split, c).unwrap();
    let (theta, phi) = t.init_params().unwrap();
    let batch = t.exhaustive_triples();
    let (l0, g_theta) = t
        .batch_objective(&theta, Some(&phi), &batch, 3, Phase::Theta, true)
        .unwrap();
    let (_, g_phi) = t
        .batch_objective(&theta, Some(&phi), &batch, 3, Phase::Phi, true)
        .unwrap();

    let mut th = theta.clone();
    Optimizer::new(OptimizerConfig::sgd(1e-3))
        .unwrap()
        .step(&mut th, &g_theta)
        .unwrap();
    let (l_theta, _) = t
        .batch_objective(&th, Some(&phi), &batch, 3, Phase::Theta, false)
        .unwrap();
    assert!(l_theta <= l0, "descent raised the loss: {l0} -> {l_theta}");

    let mut ph = phi.clone();
    let ascent = g_phi.into_iter().map(|(k, v)| (k, -v)).collect();
    Optimizer::new(OptimizerConfig::sgd(1e-3))
        .unwrap()
        .step(&mut ph, &ascent)
        .unwrap();
    let (l_phi, _) = t
        .batch_objective(&theta, Some(&ph), &batch, 3, Phase::Theta, false)
        .unwrap();
    assert!(l_phi >= l0, "ascent lowered the loss: {l0} -> {l_phi}");
}

#[test]
fn non_finite_parameters_report_divergence() {
    let (_, split, train) = toy();
    let t = Trainer::new(&train, &split, config(Mode::OnePerm)).unwrap();
    let (mut theta, _) = t.init_params().unwrap();
    theta.get_mut(permgnn::model::W_H).unwrap()[[0, 0]] = f64::NAN;
    match t.run(Some(theta), None) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.best_epoch)),
    }
}

#[test]
fn early_stopping_halts_flat_runs() {
    let (_, split, train) = toy();
    let mut c = config(Mode::OnePerm);
    // a vanishing learning rate keeps validation metrics constant
    c.optimizer = OptimizerConfig::sgd(1e-300);
    c.patience = 4;
    c.epochs_max = 50;
    let out = Trainer::new(&train, &split, c)
        .unwrap()
        .run(None, None)
        .unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.trace.records.len(), 4);
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn relabeling_leaves_one_perm_probe_at_identity_unchanged() {
    let (g, split, train) = toy();
    let t = Trainer::new(&train, &split, config(Mode::OnePerm)).unwrap();
    let (theta, _) = t.init_params().unwrap();
    let ident: Vec<usize> = (0..g.num_nodes()).collect();
    let a = t.probe_loss(&theta, None).unwrap();
    let b = t.probe_loss(&theta, Some(&ident)).unwrap();
    assert_eq!(a, b);
}
