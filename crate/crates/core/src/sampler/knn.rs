use super::{squared_distance, SamplerError};
use crate::data::EmbeddingMatrix;

/// The `k` nearest rows to row `query_id` by Euclidean distance, query
/// excluded, closest first with ties broken by ascending id.
pub fn knn_query(matrix: &EmbeddingMatrix, query_id: usize, k: usize) -> Result<Vec<usize>, SamplerError> {
    let n = matrix.n_rows();
    if query_id >= n {
        return Err(SamplerError::UnknownId { id: query_id, n });
    }
    if k >= n {
        return Err(SamplerError::KTooLarge { k, n });
    }
    let query = matrix.row(query_id);
    let candidates = (0..n).filter(|&j| j != query_id);
    Ok(nearest_among(matrix, query, candidates, k))
}

/// The `k` nearest of `candidates` to `query` (fewer if there are fewer
/// candidates), ordered by (distance, id).
pub fn nearest_among(
    matrix: &EmbeddingMatrix,
    query: &[f64],
    candidates: impl IntoIterator<Item = usize>,
    k: usize,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates
        .into_iter()
        .map(|j| (squared_distance(query, matrix.row(j)), j))
        .collect();
    let by_distance_then_id = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, by_distance_then_id);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance_then_id);
    scored.into_iter().map(|(_, j)| j).collect()
}
