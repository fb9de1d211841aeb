//! The two-state traffic-routing game used as the reference experiment.
//!
//! States: 0 = light traffic, 1 = heavy traffic.
//! Actions: 0 = main road, 1 = alternative route.

use ndarray::{array, Array3};

use crate::model::{MfgModel, Policy};
use crate::rkhs::{FeatureMap, KernelSpec};

pub const DISCOUNT: f64 = 0.8;
pub const BANDWIDTH: f64 = 0.5;
pub const STEP_SIZE: f64 = 0.001;
pub const ITERATIONS: usize = 10_000;

pub fn model() -> MfgModel {
    #[rustfmt::skip]
    let t = Array3::from_shape_vec(
        (2, 2, 2),
        vec![
            0.9, 0.1, // x=0, a=0
            0.7, 0.3, // x=0, a=1
            0.2, 0.8, // x=1, a=0
            0.6, 0.4, // x=1, a=1
        ],
    )
    .expect("static shape");
    MfgModel::validated(t, DISCOUNT, array![0.6, 0.4])
        .expect("traffic model is valid")
        .with_labels(
            Some(vec!["light".into(), "heavy".into()]),
            Some(vec!["main".into(), "alt".into()]),
        )
        .expect("label counts match")
}

pub fn expert_policy() -> Policy {
    Policy::new(array![[0.8, 0.2], [0.3, 0.7]]).expect("expert policy is stochastic")
}

/// Gaussian kernel with anchors at all four (x, a) pairs.
pub fn feature_map() -> FeatureMap {
    let m = model();
    FeatureMap::all_state_action_pairs(
        KernelSpec::gaussian(BANDWIDTH).expect("positive bandwidth"),
        m.n_states(),
        m.n_actions(),
        m.mean_field().clone(),
    )
    .expect("consistent feature map")
}
