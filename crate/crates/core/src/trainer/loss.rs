use super::{Adapter, Triplet};
use crate::data::EmbeddingMatrix;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(‖a − p‖ − ‖a − n‖ + margin, 0)` with Euclidean distances.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    hinge(distance(anchor, positive) - distance(anchor, negative) + margin)
}

// `f64::max` would turn NaN into 0 and hide a diverged adapter
fn hinge(x: f64) -> f64 {
    if x.is_nan() { x } else { x.max(0.0) }
}

/// Gradients of the triplet loss with respect to the three input vectors,
/// or `None` when the hinge is not strictly active. A coincident pair
/// contributes a zero subgradient for its distance term.
pub fn output_gradients(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> (f64, Option<[Vec<f64>; 3]>) {
    let d_pos = distance(anchor, positive);
    let d_neg = distance(anchor, negative);
    let loss = hinge(d_pos - d_neg + margin);
    if !(loss > 0.0) {
        return (loss, None);
    }
    let unit = |from: &[f64], to: &[f64], norm: f64| -> Vec<f64> {
        if norm > 0.0 {
            from.iter().zip(to).map(|(f, t)| (f - t) / norm).collect()
        } else {
            vec![0.0; from.len()]
        }
    };
    let u_pos = unit(anchor, positive, d_pos);
    let u_neg = unit(anchor, negative, d_neg);
    let g_anchor = u_pos.iter().zip(&u_neg).map(|(p, n)| p - n).collect();
    let g_positive = u_pos.iter().map(|v| -v).collect();
    (loss, Some([g_anchor, g_positive, u_neg]))
}

/// Loss of one triplet of base embeddings under `adapter`, with its exact
/// gradient with respect to every adapter parameter (all zero when the
/// hinge is inactive).
pub fn triplet_loss_grad(
    adapter: &Adapter,
    triplet: &Triplet,
    base: &EmbeddingMatrix,
    margin: f64,
) -> (f64, Adapter) {
    let mut grad = adapter.zeros_like();
    let loss = accumulate_triplet_grad(adapter, triplet, base, margin, &mut grad);
    (loss, grad)
}

pub(crate) fn accumulate_triplet_grad(
    adapter: &Adapter,
    triplet: &Triplet,
    base: &EmbeddingMatrix,
    margin: f64,
    grad: &mut Adapter,
) -> f64 {
    let inputs = [base.row(triplet.anchor), base.row(triplet.positive), base.row(triplet.negative)];
    let traces = inputs.map(|x| adapter.trace(x));
    let (loss, grads) = output_gradients(&traces[0].output, &traces[1].output, &traces[2].output, margin);
    if let Some(grads) = grads {
        for ((x, trace), g) in inputs.iter().zip(&traces).zip(&grads) {
            adapter.backward(x, trace, g, grad);
        }
    }
    loss
}
