//! Matching head: compares an instance representation against one
//! representation per prompt choice.
//!
//! Relation representations are the encoder states at the [C] markers; the
//! instance representation pools the entity-marker states; scores are
//! Euclidean distances turned into probabilities with a softmax over their
//! negations; the loss is the negative log-probability of the gold choice,
//! evaluated in the log domain for stability.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::prompt::ModelInput;

/// Guard against division by zero when an instance representation coincides
/// with a relation representation (distance exactly 0).
const DIST_EPS: f64 = 1e-12;

/// Which encoder states form the instance representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntityPooling {
    /// Average of the [e1] and [e2] opening-marker states.
    #[default]
    OpenMarkers,
    /// Average of all four entity-marker states.
    OpenAndCloseMarkers,
}

impl EntityPooling {
    pub fn marker_positions(self, input: &ModelInput) -> Vec<usize> {
        match self {
            EntityPooling::OpenMarkers => vec![input.e1_open, input.e2_open],
            EntityPooling::OpenAndCloseMarkers => {
                vec![input.e1_open, input.e1_close, input.e2_open, input.e2_close]
            }
        }
    }
}

/// Outcome of matching one instance against the prompt choices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchResult {
    pub distances: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Argmax of `probabilities`; ties resolve to the lowest index.
    pub predicted: usize,
    /// Negative log-probability of the gold choice, when a gold was given.
    pub loss: Option<f64>,
}

/// One relation representation per choice: the rows of `encoded` at the [C]
/// marker positions.
pub fn relation_reps(encoded: ArrayView2<f64>, choice_markers: &[usize]) -> Array2<f64> {
    let d = encoded.ncols();
    let mut reps = Array2::zeros((choice_markers.len(), d));
    for (i, &pos) in choice_markers.iter().enumerate() {
        reps.row_mut(i).assign(&encoded.row(pos));
    }
    reps
}

/// Instance representation: average of the pooled entity-marker states.
pub fn instance_rep(
    encoded: ArrayView2<f64>,
    input: &ModelInput,
    pooling: EntityPooling,
) -> Array1<f64> {
    let positions = pooling.marker_positions(input);
    let mut rep = Array1::zeros(encoded.ncols());
    for &pos in &positions {
        rep += &encoded.row(pos);
    }
    rep / positions.len() as f64
}

/// Euclidean distance from the instance representation to each relation
/// representation.
pub fn euclidean_distances(instance: ArrayView1<f64>, relations: ArrayView2<f64>) -> Array1<f64> {
    relations
        .axis_iter(Axis(0))
        .map(|rel| {
            let diff = &instance - &rel;
            diff.dot(&diff).sqrt()
        })
        .collect()
}

/// Softmax over negated distances, shifted by the minimum distance so the
/// largest exponent is exactly 0.
pub fn probabilities_from_distances(distances: ArrayView1<f64>) -> Array1<f64> {
    let min = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let exps: Array1<f64> = distances.mapv(|d| (min - d).exp());
    let total: f64 = exps.sum();
    exps / total
}

/// Index of the most probable choice; ties resolve to the lowest index.
pub fn predict(probabilities: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > probabilities[best] {
            best = i;
        }
    }
    best
}

/// Negative log-probability of `gold`, computed in the log domain:
/// `D_gold - min(D) + ln(sum_j exp(min(D) - D_j))`.
pub fn loss_from_distances(distances: ArrayView1<f64>, gold: usize) -> f64 {
    let min = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let log_norm = distances.mapv(|d| (min - d).exp()).sum().ln();
    distances[gold] - min + log_norm
}

/// Runs the full matching head over an encoded sequence.
pub fn match_encoded(
    encoded: ArrayView2<f64>,
    input: &ModelInput,
    pooling: EntityPooling,
    gold: Option<usize>,
) -> MatchResult {
    let rels = relation_reps(encoded, &input.choice_markers);
    let inst = instance_rep(encoded, input, pooling);
    let distances = euclidean_distances(inst.view(), rels.view());
    let probabilities = probabilities_from_distances(distances.view());
    let predicted = predict(probabilities.view());
    let loss = gold.map(|g| loss_from_distances(distances.view(), g));
    MatchResult {
        distances: distances.to_vec(),
        probabilities: probabilities.to_vec(),
        predicted,
        loss,
    }
}

/// Matching head with its analytic backward pass: returns the result and
/// dLoss/dEncoded (same shape as `encoded`).
///
/// With `g` the gold index, `dL/dD_i = delta_ig - P_i`; each distance pulls
/// on the instance representation with `(X - rel_i)/D_i` and pushes on its
/// relation representation with the negation. The instance-representation
/// gradient is split evenly over the pooled marker rows.
pub fn match_with_grad(
    encoded: ArrayView2<f64>,
    input: &ModelInput,
    pooling: EntityPooling,
    gold: usize,
) -> (MatchResult, Array2<f64>) {
    let rels = relation_reps(encoded, &input.choice_markers);
    let inst = instance_rep(encoded, input, pooling);
    let distances = euclidean_distances(inst.view(), rels.view());
    let probabilities = probabilities_from_distances(distances.view());
    let predicted = predict(probabilities.view());
    let loss = loss_from_distances(distances.view(), gold);

    let mut d_encoded = Array2::zeros(encoded.raw_dim());
    let mut d_instance = Array1::<f64>::zeros(encoded.ncols());
    for (i, &marker_pos) in input.choice_markers.iter().enumerate() {
        let d_loss_d_dist = if i == gold { 1.0 } else { 0.0 } - probabilities[i];
        let unit = (&inst - &rels.row(i)) / distances[i].max(DIST_EPS);
        d_instance.scaled_add(d_loss_d_dist, &unit);
        d_encoded
            .row_mut(marker_pos)
            .scaled_add(-d_loss_d_dist, &unit);
    }
    let positions = pooling.marker_positions(input);
    let share = 1.0 / positions.len() as f64;
    for &pos in &positions {
        d_encoded.row_mut(pos).scaled_add(share, &d_instance);
    }

    (
        MatchResult {
            distances: distances.to_vec(),
            probabilities: probabilities.to_vec(),
            predicted,
            loss: Some(loss),
        },
        d_encoded,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_input(n_choices: usize, len: usize) -> ModelInput {
        // Synthetic marker layout good enough for the head: choices first,
        // then the four entity markers, all within `len`.
        assert!(n_choices + 6 <= len);
        ModelInput {
            ids: vec![0; len],
            choice_markers: (1..=n_choices).collect(),
            e1_open: n_choices + 2,
            e1_close: n_choices + 3,
            e2_open: n_choices + 4,
            e2_close: n_choices + 5,
            sep_positions: [n_choices + 1, len - 1],
        }
    }

    #[test]
    fn known_softmax_values() {
        let probs = probabilities_from_distances(array![1.0, 2.0].view());
        assert!((probs[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((probs[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((probs.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_distances_give_log2_loss() {
        let d = array![3.0, 3.0];
        let loss = loss_from_distances(d.view(), 0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let probs = probabilities_from_distances(d.view());
        assert!((probs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pythagorean_distance() {
        let rels = array![[0.0, 0.0], [3.0, 0.0]];
        let d = euclidean_distances(array![3.0, 4.0].view(), rels.view());
        assert!((d[0] - 5.0).abs() < 1e-12);
        assert!((d[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_negative_log_probability() {
        let d = array![0.3, 1.7, 0.9, 2.4];
        let probs = probabilities_from_distances(d.view());
        for g in 0..4 {
            let loss = loss_from_distances(d.view(), g);
            assert!((loss - (-probs[g].ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_distances_stay_finite() {
        let d = array![1000.0, 1004.0, 1001.0];
        let probs = probabilities_from_distances(d.view());
        assert!(probs.iter().all(|p| p.is_finite() && *p > 0.0));
        assert!((probs.sum() - 1.0).abs() < 1e-12);
        let loss = loss_from_distances(d.view(), 1);
        assert!(loss.is_finite());
    }

    #[test]
    fn prediction_tie_breaks_low() {
        let probs = probabilities_from_distances(array![2.0, 2.0, 3.0].view());
        assert_eq!(predict(probs.view()), 0);
        let probs = probabilities_from_distances(array![5.0, 2.0, 2.0].view());
        assert_eq!(predict(probs.view()), 1);
    }

    #[test]
    fn nearest_choice_wins() {
        let probs = probabilities_from_distances(array![4.0, 0.5, 2.0].view());
        assert_eq!(predict(probs.view()), 1);
    }

    #[test]
    fn match_encoded_gathers_marker_rows() {
        let input = toy_input(2, 10);
        let mut encoded = Array2::<f64>::zeros((10, 3));
        encoded.row_mut(input.choice_markers[0]).assign(&array![1.0, 0.0, 0.0]);
        encoded.row_mut(input.choice_markers[1]).assign(&array![0.0, 2.0, 0.0]);
        encoded.row_mut(input.e1_open).assign(&array![1.0, 0.0, 0.0]);
        encoded.row_mut(input.e2_open).assign(&array![1.0, 0.0, 0.0]);
        let res = match_encoded(encoded.view(), &input, EntityPooling::OpenMarkers, Some(0));
        // instance rep is exactly choice 0's rep: distance 0 vs sqrt(1+4)
        assert!(res.distances[0].abs() < 1e-12);
        assert!((res.distances[1] - 5.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(res.predicted, 0);
        assert!(res.loss.unwrap() > 0.0);
    }

    #[test]
    fn pooling_modes_differ_when_close_markers_differ() {
        let input = toy_input(1, 10);
        let mut encoded = Array2::<f64>::zeros((10, 2));
        encoded.row_mut(input.e1_open).assign(&array![2.0, 0.0]);
        encoded.row_mut(input.e2_open).assign(&array![0.0, 2.0]);
        encoded.row_mut(input.e1_close).assign(&array![-2.0, 0.0]);
        encoded.row_mut(input.e2_close).assign(&array![0.0, -2.0]);
        let open = instance_rep(encoded.view(), &input, EntityPooling::OpenMarkers);
        let all = instance_rep(encoded.view(), &input, EntityPooling::OpenAndCloseMarkers);
        assert_eq!(open, array![1.0, 1.0]);
        assert_eq!(all, array![0.0, 0.0]);
    }

    #[test]
    fn distance_gradient_sums_to_zero() {
        // dL/dD_i = delta_ig - P_i sums to zero over i, so nudging all
        // distances together leaves the loss unchanged.
        let d = array![0.7, 1.1, 2.0];
        let probs = probabilities_from_distances(d.view());
        let total: f64 = (0..3)
            .map(|i| if i == 1 { 1.0 } else { 0.0 } - probs[i])
            .sum();
        assert!(total.abs() < 1e-12);
        let shifted = loss_from_distances(d.mapv(|x| x + 0.37).view(), 1);
        assert!((shifted - loss_from_distances(d.view(), 1)).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let input = toy_input(3, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut encoded = Array2::<f64>::zeros((12, 5));
        encoded.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        for pooling in [EntityPooling::OpenMarkers, EntityPooling::OpenAndCloseMarkers] {
            let (_, grad) = match_with_grad(encoded.view(), &input, pooling, 1);
            let step = 1e-5;
            for r in 0..12 {
                for c in 0..5 {
                    let mut plus = encoded.clone();
                    plus[[r, c]] += step;
                    let mut minus = encoded.clone();
                    minus[[r, c]] -= step;
                    let fd = (match_encoded(plus.view(), &input, pooling, Some(1)).loss.unwrap()
                        - match_encoded(minus.view(), &input, pooling, Some(1)).loss.unwrap())
                        / (2.0 * step);
                    let a = grad[[r, c]];
                    let denom = fd.abs().max(a.abs()).max(1e-6);
                    assert!(
                        ((a - fd) / denom).abs() < 1e-5,
                        "row {r} col {c}: analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn non_marker_rows_get_zero_gradient() {
        let input = toy_input(2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut encoded = Array2::<f64>::zeros((10, 4));
        encoded.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let (_, grad) = match_with_grad(encoded.view(), &input, EntityPooling::OpenMarkers, 0);
        let touched: Vec<usize> = input
            .choice_markers
            .iter()
            .copied()
            .chain([input.e1_open, input.e2_open])
            .collect();
        for r in 0..10 {
            let norm: f64 = grad.row(r).dot(&grad.row(r));
            if touched.contains(&r) {
                assert!(norm > 0.0, "marker row {r} should receive gradient");
            } else {
                assert_eq!(norm, 0.0, "row {r} should be untouched");
            }
        }
    }

    #[test]
    fn match_result_serializes() {
        let res = MatchResult {
            distances: vec![1.0, 2.0],
            probabilities: vec![0.7311, 0.2689],
            predicted: 0,
            loss: Some(0.3133),
        };
        let json = serde_json::to_string(&res).unwrap();
        let back: MatchResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back.predicted, 0);
        assert_eq!(back.distances, res.distances);
    }
}
