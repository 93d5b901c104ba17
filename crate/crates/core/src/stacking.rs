//! Combining raw features with their embeddings: concatenation or convex fusion.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, Sample};

#[derive(Debug, Error)]
pub enum StackingError {
    #[error("fusion needs equal dimensions, got d={d} and d'={d_prime}")]
    FuseDimension { d: usize, d_prime: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("{rows} embeddings for {samples} samples")]
    RowCount { rows: usize, samples: usize },
    #[error("embedding row {row} has length {got}, expected {expected}")]
    RaggedEmbedding {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("embeddings must have at least one dimension")]
    EmptyEmbedding,
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = StackingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackingMode {
    OriginOnly,
    EmbeddingOnly,
    Concat,
    Fuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackingConfig {
    pub mode: StackingMode,
    /// Weight of the raw features in fusion.
    pub alpha: f64,
}

impl Default for StackingConfig {
    fn default() -> Self {
        Self {
            mode: StackingMode::Concat,
            alpha: 0.9,
        }
    }
}

impl StackingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(StackingError::BadAlpha(self.alpha));
        }
        Ok(())
    }
}

/// Feature vectors ready for a downstream classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedDataset {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub stacked_dim: usize,
}

impl StackedDataset {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn m(&self) -> usize {
        self.class_names.len()
    }

    /// The raw features of `data`, unchanged.
    pub fn from_dataset(data: &Dataset) -> Self {
        Self {
            vectors: data.feature_rows(),
            labels: data.labels(),
            class_names: data.class_names().to_vec(),
            stacked_dim: data.d(),
        }
    }

    /// Converts back to a [`Dataset`] with `x0..` feature names.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let samples = self
            .vectors
            .iter()
            .zip(&self.labels)
            .map(|(v, &label)| Sample {
                features: v.clone(),
                label,
            })
            .collect();
        let names = (0..self.stacked_dim).map(|j| format!("x{j}")).collect();
        Ok(Dataset::new(samples, names, self.class_names.clone())?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_dataset()?.write_csv(path, "label")?)
    }
}

/// `c` followed by `c_prime`.
pub fn concat(c: &[f64], c_prime: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(c.len() + c_prime.len());
    out.extend_from_slice(c);
    out.extend_from_slice(c_prime);
    out
}

/// `alpha * c + (1 - alpha) * c_prime`, returning an operand verbatim at the endpoints.
pub fn fuse(c: &[f64], c_prime: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if c.len() != c_prime.len() {
        return Err(StackingError::FuseDimension {
            d: c.len(),
            d_prime: c_prime.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(StackingError::BadAlpha(alpha));
    }
    if alpha == 1.0 {
        return Ok(c.to_vec());
    }
    if alpha == 0.0 {
        return Ok(c_prime.to_vec());
    }
    Ok(c.iter()
        .zip(c_prime)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect())
}

/// Applies the configured combiner row by row. Row order and labels are kept.
pub fn stack_dataset(
    data: &Dataset,
    embeddings: &[Vec<f64>],
    config: &StackingConfig,
) -> Result<StackedDataset> {
    config.validate()?;
    if embeddings.len() != data.n() {
        return Err(StackingError::RowCount {
            rows: embeddings.len(),
            samples: data.n(),
        });
    }
    let d_prime = embeddings.first().map_or(0, Vec::len);
    if d_prime == 0 {
        return Err(StackingError::EmptyEmbedding);
    }
    if let Some((row, e)) = embeddings
        .iter()
        .enumerate()
        .find(|(_, e)| e.len() != d_prime)
    {
        return Err(StackingError::RaggedEmbedding {
            row,
            expected: d_prime,
            got: e.len(),
        });
    }
    let d = data.d();
    if config.mode == StackingMode::Fuse && d != d_prime {
        return Err(StackingError::FuseDimension { d, d_prime });
    }
    let rows = data.samples().iter().zip(embeddings);
    let (vectors, stacked_dim) = match config.mode {
        StackingMode::OriginOnly => (data.feature_rows(), d),
        StackingMode::EmbeddingOnly => (embeddings.to_vec(), d_prime),
        StackingMode::Concat => (
            rows.map(|(s, e)| concat(&s.features, e)).collect(),
            d + d_prime,
        ),
        StackingMode::Fuse => (
            rows.map(|(s, e)| fuse(&s.features, e, config.alpha))
                .collect::<Result<_>>()?,
            d,
        ),
    };
    Ok(StackedDataset {
        vectors,
        labels: data.labels(),
        class_names: data.class_names().to_vec(),
        stacked_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn data(d: usize, n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| Sample {
                    features: (0..d).map(|j| (i * d + j) as f64).collect(),
                    label: i % 2,
                })
                .collect(),
            (0..d).map(|j| format!("f{j}")).collect(),
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn concat_example_and_length() {
        assert_eq!(
            concat(&[1.0, 2.0], &[3.0, 4.0, 5.0]),
            vec![1.0, 2.0, 3.0, 4.0, 5.0]
        );
        assert_eq!(concat(&[0.0; 39], &[1.0; 39]).len(), 78);
    }

    #[test]
    fn fuse_examples() {
        let c = [0.1, -3.7];
        let cp = [2.5, 1e-7];
        assert_eq!(fuse(&c, &cp, 1.0).unwrap(), c.to_vec());
        assert_eq!(fuse(&c, &cp, 0.0).unwrap(), cp.to_vec());
        assert_eq!(fuse(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(
            fuse(&[1.0], &[1.0, 2.0], 0.5),
            Err(StackingError::FuseDimension { .. })
        ));
        assert!(matches!(
            fuse(&[1.0], &[1.0], 1.5),
            Err(StackingError::BadAlpha(_))
        ));
    }

    #[test]
    fn stack_modes() {
        let ds = data(39, 4);
        let emb16: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64; 16]).collect();
        let origin = stack_dataset(
            &ds,
            &emb16,
            &StackingConfig {
                mode: StackingMode::OriginOnly,
                alpha: 0.5,
            },
        )
        .unwrap();
        assert_eq!(origin.vectors, ds.feature_rows());
        let cat = stack_dataset(&ds, &emb16, &StackingConfig::default()).unwrap();
        assert_eq!(cat.stacked_dim, 55);
        assert_eq!(cat.labels, ds.labels());
        assert!(matches!(
            stack_dataset(
                &ds,
                &emb16,
                &StackingConfig {
                    mode: StackingMode::Fuse,
                    alpha: 0.5
                }
            ),
            Err(StackingError::FuseDimension { d: 39, d_prime: 16 })
        ));
        assert!(matches!(
            stack_dataset(&ds, &emb16[..3], &StackingConfig::default()),
            Err(StackingError::RowCount { .. })
        ));
    }

    proptest! {
        #[test]
        fn concat_slices_recover_operands(
            c in proptest::collection::vec(any::<f64>(), 0..20),
            e in proptest::collection::vec(any::<f64>(), 0..20),
        ) {
            let x = concat(&c, &e);
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&x[..c.len()]), bits(&c));
            prop_assert_eq!(bits(&x[c.len()..]), bits(&e));
        }

        #[test]
        fn fuse_endpoints_bitwise(
            pair in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..20),
        ) {
            let (c, e): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
            prop_assert_eq!(fuse(&c, &e, 1.0).unwrap(), c.clone());
            prop_assert_eq!(fuse(&c, &e, 0.0).unwrap(), e);
        }
    }
}
