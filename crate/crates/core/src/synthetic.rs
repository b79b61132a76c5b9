//! Gaussian intent clusters with a known ground truth, for smoke runs and
//! end-to-end checks without a real encoder.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{write_dataset, write_embeddings_binary, DataError, DatasetBundle, DatasetFormat, EmbeddingMatrix, Utterance};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub dim: usize,
    pub per_cluster: usize,
    /// Pairwise distance between cluster centers, in units of `sigma`.
    pub separation: f64,
    /// Per-coordinate standard deviation.
    pub sigma: f64,
    /// Evaluate on the training points themselves instead of fresh draws.
    pub transductive: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { clusters: 6, dim: 32, per_cluster: 60, separation: 4.0, sigma: 1.0, transductive: true, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub bundle: DatasetBundle,
    pub train: EmbeddingMatrix,
    pub test: EmbeddingMatrix,
}

/// Files written by [`SyntheticData::write_to`].
#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    pub dataset: PathBuf,
    pub train_embeddings: PathBuf,
    pub test_embeddings: PathBuf,
}

fn draw(spec: &SyntheticSpec, rng: &mut impl Rng, tag: &str) -> (Vec<Utterance>, Vec<Vec<f64>>) {
    // centers are scaled basis vectors, so every pair sits at the same distance
    let scale = spec.separation * spec.sigma / std::f64::consts::SQRT_2;
    let mut utts = Vec::with_capacity(spec.clusters * spec.per_cluster);
    let mut rows = Vec::with_capacity(spec.clusters * spec.per_cluster);
    for c in 0..spec.clusters {
        for i in 0..spec.per_cluster {
            let row: Vec<f64> = (0..spec.dim)
                .map(|j| {
                    let center = if j == c { scale } else { 0.0 };
                    center + spec.sigma * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            utts.push(Utterance { id: utts.len(), text: format!("{tag} intent {c} sample {i}"), label: Some(format!("intent_{c:02}")) });
            rows.push(row);
        }
    }
    (utts, rows)
}

/// Generate the clusters. Panics if `dim < clusters`, since the centers need
/// one axis each.
pub fn generate(spec: &SyntheticSpec) -> SyntheticData {
    assert!(spec.dim >= spec.clusters, "need dim >= clusters for equidistant centers");
    let mut rng = seed::rng(seed::derive(spec.seed, "synthetic"));
    let (train_utts, train_rows) = draw(spec, &mut rng, "train");
    let (test_utts, test_rows) = if spec.transductive {
        let utts = train_utts.iter().map(|u| Utterance { text: u.text.replacen("train", "test", 1), ..u.clone() }).collect();
        (utts, train_rows.clone())
    } else {
        draw(spec, &mut rng, "test")
    };
    let bundle = DatasetBundle::unsupervised(train_utts, Vec::new(), test_utts);
    let train = EmbeddingMatrix::from_rows(train_rows).expect("finite rows").with_fingerprint(bundle.train_fingerprint());
    let test = EmbeddingMatrix::from_rows(test_rows).expect("finite rows").with_fingerprint(bundle.test_fingerprint());
    SyntheticData { bundle, train, test }
}

impl SyntheticData {
    /// Write `dataset.tsv`, `train.emb` and `test.emb` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<SyntheticFiles, DataError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| DataError::Io { path: path.clone(), source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let files = SyntheticFiles {
            dataset: dir.join("dataset.tsv"),
            train_embeddings: dir.join("train.emb"),
            test_embeddings: dir.join("test.emb"),
        };
        let out = std::fs::File::create(&files.dataset).map_err(io(&files.dataset))?;
        write_dataset(&self.bundle, DatasetFormat::Tsv, BufWriter::new(out))?;
        for (path, matrix) in [(&files.train_embeddings, &self.train), (&files.test_embeddings, &self.test)] {
            let out = std::fs::File::create(path).map_err(io(path))?;
            write_embeddings_binary(matrix, BufWriter::new(out)).map_err(io(path))?;
        }
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_labels() {
        let data = generate(&SyntheticSpec::default());
        assert_eq!((data.train.n_rows(), data.train.dim()), (360, 32));
        assert_eq!(data.bundle.test_label_ids().unwrap().iter().max(), Some(&5));
        assert_eq!(data.train.as_slice(), data.test.as_slice());
    }

    #[test]
    fn centers_are_equidistant() {
        let spec = SyntheticSpec { per_cluster: 4000, clusters: 3, dim: 3, ..SyntheticSpec::default() };
        let data = generate(&spec);
        let mean = |c: usize| -> Vec<f64> {
            let mut m = vec![0.0; 3];
            for i in c * 4000..(c + 1) * 4000 {
                m.iter_mut().zip(data.train.row(i)).for_each(|(a, b)| *a += b / 4000.0);
            }
            m
        };
        let (a, b) = (mean(0), mean(1));
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((d - 4.0).abs() < 0.15, "{d}");
    }

    #[test]
    fn fresh_test_draws_differ() {
        let data = generate(&SyntheticSpec { transductive: false, ..SyntheticSpec::default() });
        assert_ne!(data.train.as_slice(), data.test.as_slice());
    }
}
