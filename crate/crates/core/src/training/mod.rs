//! Splitting, optimization, early stopping and batch prediction.

mod optim;
mod split;
mod trainer;

pub use optim::{Adam, AdamConfig};
pub use split::{make_split, SplitPlan, MIN_HEALTHY, N_STRATA, TEST_FRACTION, VAL_FRACTION};
pub use trainer::{
    batch_gradient, check_provenance, initial_params, predict_batch, predict_samples, MERGE_BIAS_INIT,
    sample_gradient, train, train_on_split, write_log_csv, EpochLog, LossKind, SampleSet,
    StopReason, TrainConfig, TrainOutcome,
};

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::diffcore::{Matrix, Tape};
    use crate::ingest::{build_node_features, synth_cohort, SynthConfig};
    use crate::model::{model_forward, Architecture, GraphSet, ModelParams, ParamVars, ALL_BRANCHES};
    use crate::relgraphs::GraphBundle;

    fn cohort(n_samples: usize, seed: u64) -> crate::ingest::SynthCohort {
        synth_cohort(
            &SynthConfig {
                n_cpg: 12,
                n_samples,
                n_clock_sites: 4,
                disease_fraction: 0.1,
                ..SynthConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn split_proportions_on_100_healthy() {
        let s = synth_cohort(
            &SynthConfig {
                n_cpg: 5,
                n_samples: 100,
                n_clock_sites: 1,
                disease_fraction: 0.0,
                ..SynthConfig::default()
            },
            1,
        )
        .unwrap();
        let plan = make_split(&s.cohort, 3).unwrap();
        assert_eq!(
            (plan.test_ids.len(), plan.train_ids.len(), plan.val_ids.len()),
            (20, 64, 16)
        );
        assert_eq!(plan, make_split(&s.cohort, 3).unwrap());
        assert_ne!(plan, make_split(&s.cohort, 4).unwrap());
    }

    #[test]
    fn split_is_a_partition_of_healthy_samples() {
        let s = cohort(60, 2);
        let plan = make_split(&s.cohort, 0).unwrap();
        let all: Vec<&String> = plan.test_ids.iter().chain(&plan.train_ids).chain(&plan.val_ids).collect();
        let set: HashSet<&String> = all.iter().copied().collect();
        assert_eq!(set.len(), all.len());
        let healthy: HashSet<&String> = s
            .cohort
            .healthy_indices()
            .into_iter()
            .map(|i| &s.cohort.samples[i].id)
            .collect();
        assert_eq!(set, healthy);
    }

    #[test]
    fn split_rejects_tiny_cohorts() {
        assert!(make_split(&cohort(9, 0).cohort, 0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let arch = Architecture {
            d_mid: 2,
            d_hidden: 2,
            gate_hidden: 2,
            head_hidden: 2,
            ..Architecture::new(3)
        };
        let mut p = ModelParams::zeros(arch).unwrap();
        let mut grads: Vec<Matrix> = p.blocks().iter().map(|(_, b)| Matrix::zeros(b.dim())).collect();
        grads[0][[0, 0]] = 3.0;
        grads[0][[0, 1]] = -0.5;
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &grads);
        let w = &p.branches[0].pre.weight;
        assert!((w[[0, 0]] + 1e-3).abs() < 1e-9);
        assert!((w[[0, 1]] - 1e-3).abs() < 1e-9);
        assert_eq!(w[[1, 0]], 0.0);
        assert_eq!(adam.steps(), 1);
    }

    fn tiny_setup() -> (ModelParams, GraphSet, SampleSet) {
        let s = cohort(30, 5);
        let t = build_node_features(&s.annotations);
        let ids: Vec<String> = s.cohort.samples.iter().map(|m| m.id.clone()).collect();
        let bundle = GraphBundle::build(&s.annotations, &s.cohort.beta, &ids, 0.8).unwrap();
        let data = SampleSet::from_cohort(&t, &s.cohort, &ids).unwrap();
        let arch = Architecture {
            d_mid: 3,
            d_hidden: 4,
            gate_hidden: 4,
            head_hidden: 8,
            ..Architecture::new(12)
        };
        let p = initial_params(arch, &data.ages).unwrap();
        (p, GraphSet::from_bundle(&bundle).unwrap(), data)
    }

    #[test]
    fn initial_params_start_with_live_compression() {
        let (p, g, data) = tiny_setup();
        assert!(p.head.merge.bias.iter().all(|&b| b == MERGE_BIAS_INIT));
        assert_eq!(p.head.out.bias[[0, 0]], crate::evaluation::mean(&data.ages));
        let preds = predict_samples(&p, &g, &data, ALL_BRANCHES).unwrap();
        assert!(preds.iter().any(|&y| (y - preds[0]).abs() > 1e-9), "constant predictions at init");
    }

    #[test]
    fn accumulated_gradient_is_the_mean_of_sample_gradients() {
        let (p, g, data) = tiny_setup();
        let members = [0, 3, 7, 11];
        let opts: Vec<_> = (0..4)
            .map(|i| crate::model::ForwardOptions {
                train: true,
                seed: i,
                mask: ALL_BRANCHES,
            })
            .collect();
        let (loss, grads) = batch_gradient(&p, &g, &data, &members, LossKind::Mse, &opts).unwrap();

        // one tape holding the whole batch
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &p, true).unwrap();
        let mut total = None;
        for (k, &i) in members.iter().enumerate() {
            let x = tape.constant(data.features[i].clone()).unwrap();
            let t = model_forward(&mut tape, &p.arch, &vars, &g, x, &opts[k]).unwrap();
            let y = tape.constant(Matrix::from_elem((1, 1), data.ages[i])).unwrap();
            let d = tape.sub(t.y, y).unwrap();
            let l = tape.square(d).unwrap();
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l).unwrap(),
            });
        }
        let mean_loss = tape.scale(total.unwrap(), 0.25).unwrap();
        let joint = tape.grad(mean_loss, &vars.all).unwrap();
        assert!((loss - tape.scalar(mean_loss)).abs() < 1e-10);
        for (a, b) in grads.iter().zip(&joint) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn training_memorizes_a_single_sample() {
        let (p, g, data) = tiny_setup();
        let one = SampleSet {
            ids: vec![data.ids[0].clone()],
            ages: vec![data.ages[0] + 10.0],
            features: vec![data.features[0].clone()],
        };
        let val = SampleSet {
            ids: vec![one.ids[0].clone(), one.ids[0].clone()],
            ages: vec![one.ages[0]; 2],
            features: vec![one.features[0].clone(); 2],
        };
        let mut arch = p.arch.clone();
        arch.dropout = 0.0;
        let p = initial_params(arch, &data.ages).unwrap();
        let cfg = TrainConfig {
            lr: 1e-2,
            max_epochs: 400,
            patience: 400,
            ..TrainConfig::default()
        };
        let out = train(p, &g, &one, &val, &cfg, ALL_BRANCHES).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.train_loss < 1e-2, "{last:?}");
        let best = out.log.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(out.log[out.best_epoch - 1].val_mae, best);
    }

    #[test]
    fn training_is_deterministic_and_keeps_best_epoch() {
        let (p, g, data) = tiny_setup();
        let split = 22;
        let tr = SampleSet {
            ids: data.ids[..split].to_vec(),
            ages: data.ages[..split].to_vec(),
            features: data.features[..split].to_vec(),
        };
        let va = SampleSet {
            ids: data.ids[split..].to_vec(),
            ages: data.ages[split..].to_vec(),
            features: data.features[split..].to_vec(),
        };
        let cfg = TrainConfig {
            max_epochs: 6,
            patience: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train(p.clone(), &g, &tr, &va, &cfg, ALL_BRANCHES).unwrap();
        let b = train(p, &g, &tr, &va, &cfg, ALL_BRANCHES).unwrap();
        assert_eq!(a.params.to_json(None).unwrap(), b.params.to_json(None).unwrap());
        assert_eq!(a.log, b.log);
        let best = a.log.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(a.log[a.best_epoch - 1].val_mae, best);
        let preds = predict_samples(&a.params, &g, &va, ALL_BRANCHES).unwrap();
        let m = crate::evaluation::regression_metrics(&va.ages, &preds).unwrap();
        assert_eq!(m.mae, best);
    }

    #[test]
    fn zero_model_predicts_a_constant() {
        let (p, g, data) = tiny_setup();
        let z = ModelParams::zeros(p.arch.clone()).unwrap();
        let preds = predict_samples(&z, &g, &data, ALL_BRANCHES).unwrap();
        assert!(preds.iter().all(|&v| v == preds[0]));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
