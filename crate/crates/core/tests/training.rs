use dcl_core::latentspaces::{ConditionalSpec, LatentSpaceSpec, QSpec, Scenario};
use dcl_core::losses::LossKind;
use dcl_core::netmodels::{checkpoint, Model};
use dcl_core::diffmath::Rng;
use dcl_core::trainer::{eval_set, evaluate, streams, train, Experiment, TrainConfig};

fn small(loss: LossKind, seed: u64, iterations: usize) -> Experiment {
    let space = LatentSpaceSpec::new(2, Scenario::BoxSimple).unwrap();
    let cond = ConditionalSpec::new(1.0, space.default_sigma(), QSpec::Constant).unwrap();
    let train = TrainConfig { loss, batch: 128, iterations, seed, eval_every: 0, eval_size: 1024, ..Default::default() };
    let mut exp = Experiment::new(space, cond, train);
    exp.mixer_seed = seed;
    exp
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn loss_decreases_over_the_first_thousand_steps() {
    for loss in [LossKind::DeltaNce, LossKind::DeltaInce, LossKind::DeltaNwj] {
        let mut drops: Vec<f64> = (0..5)
            .map(|seed| {
                let h = train(&small(loss, seed, 1000)).unwrap().history;
                mean(&h.losses[..100]) - mean(&h.losses[900..])
            })
            .collect();
        drops.sort_by(f64::total_cmp);
        assert!(drops[2] > 0.0, "{}: median drop {}", loss.name(), drops[2]);
    }
}

#[test]
fn checkpoint_reproduces_the_final_metrics() {
    let exp = small(LossKind::DeltaNce, 4, 300);
    let out = train(&exp).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&out.model.store, dir.path()).unwrap();
    let store = checkpoint::load(dir.path()).unwrap();
    let mut model = Model::new(exp.model_config(), &mut Rng::stream(99, streams::MODEL_INIT)).unwrap();
    model.load_params(&store).unwrap();
    let set = eval_set(&exp, &exp.build_mixer().unwrap()).unwrap();
    let report = evaluate(&model, &set).unwrap();
    assert_eq!(report, out.report);
}

#[test]
fn constant_only_alpha_mode_still_trains() {
    let mut exp = small(LossKind::DeltaNce, 1, 400);
    exp.train.alpha_mode = dcl_core::netmodels::AlphaMode::ConstantOnly;
    let out = train(&exp).unwrap();
    assert!(out.model.alpha_net().is_none() && out.model.alpha_tilde_net().is_none());
    assert!(out.report.mcc_mean.is_finite());
}
