//! End-to-end actuation baseline: regress the expert's steer/accel directly
//! from observations and apply it without a trajectory controller.

use thiserror::Error;

use crate::expert::{ActuationLabel, Dataset};
use crate::network::{Model, NetError};
use crate::simulator::{Action, ActionLimits, Observation};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("record {index} (track {track_id}, t={t:.2}s) carries no expert action")]
    MissingAction { index: usize, track_id: u32, t: f64 },
    #[error("model has no actuation head")]
    NoActuationHead,
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Attaches the executed expert action to every record as its actuation label.
pub fn record_actuation_labels(mut dataset: Dataset) -> Result<Dataset, BaselineError> {
    for (index, r) in dataset.records.iter_mut().enumerate() {
        let action = r.meta.action.ok_or(BaselineError::MissingAction {
            index,
            track_id: r.meta.track_id,
            t: r.meta.t,
        })?;
        r.actuation = Some(ActuationLabel { steer: action.steer, accel: action.accel });
    }
    Ok(dataset)
}

/// Inverse-normalized actuation head output, clamped to the action bounds.
pub fn baseline_policy(model: &Model, observation: &Observation, limits: &ActionLimits) -> Result<Action, BaselineError> {
    let head = model.head("actuation").ok_or(BaselineError::NoActuationHead)?;
    let cache = model.forward_observation(observation)?;
    let out = model.normalizer("actuation")?.invert(&cache.output(head, 0));
    Ok(Action::clamped(out[0], out[1], limits))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::expert::{AffordanceVector, DatasetHeader, DemoMeta, Demonstration, FsmPhase, DATASET_SCHEMA_VERSION};
    use crate::geometry::Pose;
    use crate::network::{Checkpoint, HeadKind, InputScaling, NetSpec, Network, Normalizer, TrainingMeta};

    fn record(action: Option<Action>) -> Demonstration {
        Demonstration {
            observation: Observation { ranges: vec![10.0; 3], speed: 5.0 },
            trajectory: vec![[1.5, 0.0], [3.0, 0.0]],
            affordance: AffordanceVector {
                heading_error: 0.0,
                lateral_offset: 0.0,
                dist_left_mark: 1.75,
                dist_right_mark: 1.75,
                dist_ahead_same_lane: 60.0,
                dist_ahead_adjacent_lane: 60.0,
            },
            actuation: None,
            meta: DemoMeta {
                track_id: 0,
                episode: 0,
                t: 0.0,
                fsm_state: FsmPhase::LaneKeep,
                action,
                pose: Pose::new(0.0, 0.0, 0.0),
            },
        }
    }

    fn dataset(records: Vec<Demonstration>) -> Dataset {
        Dataset {
            header: DatasetHeader {
                schema_version: DATASET_SCHEMA_VERSION,
                k: 2,
                dt_label: 0.3,
                n_beams: 3,
                range_scale: 60.0,
                speed_scale: 30.0,
                train_tracks: vec![0],
                val_tracks: vec![1],
                master_seed: 0,
            },
            records,
        }
    }

    #[test]
    fn labels_copy_the_executed_action() {
        let a = Action { steer: 0.01, accel: -0.2 };
        let ds = record_actuation_labels(dataset(vec![record(Some(a))])).unwrap();
        assert_eq!(ds.records[0].actuation, Some(ActuationLabel { steer: 0.01, accel: -0.2 }));
        let err = record_actuation_labels(dataset(vec![record(Some(a)), record(None)]));
        assert!(matches!(err, Err(BaselineError::MissingAction { index: 1, .. })));
    }

    #[test]
    fn zero_model_returns_mean_action() {
        let spec = NetSpec { input_dim: 4, fusion_layers: vec![8], heads: vec![HeadKind::Actuation] };
        let net = Network::new(spec.clone()).unwrap();
        let mut norms = BTreeMap::new();
        norms.insert("actuation".to_string(), Normalizer { mean: vec![0.02, 0.4], std: vec![0.1, 1.0] });
        let meta = TrainingMeta {
            seed: 0,
            epoch: 0,
            k: 2,
            dt_label: 0.3,
            input: InputScaling::new(3, 60.0, 30.0),
            weights: crate::losses::MultiTaskWeights::default(),
            history: vec![],
        };
        let model = Model::new(Checkpoint::new(spec, net.zero_params(), norms, meta)).unwrap();
        let obs = Observation { ranges: vec![5.0, 20.0, 60.0], speed: 12.0 };
        let a = baseline_policy(&model, &obs, &ActionLimits::default()).unwrap();
        assert_eq!(a, Action { steer: 0.02, accel: 0.4 });
    }
}
