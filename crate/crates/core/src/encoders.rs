//! Encoders mapping a raw feature vector into the representation space.
//!
//! Two architectures share one graph-building entry point:
//!
//! * **MLP**: affine + ReLU per hidden width, then a final affine map.
//! * **Transformer**: every scalar feature becomes a token
//!   `x_i * lift_w[i] + lift_b + pos_i`; `tf_blocks` post-norm blocks of
//!   multi-head self-attention and a two-layer ReLU feed-forward network
//!   (width `2 * tf_model_dim`) follow; tokens are mean-pooled and mapped to
//!   `d_out` by an affine layer.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::diff::{forward, DiffError, Graph, Inputs, Matrix, NodeId, ParamStore};
use crate::seed::rng_from_seed;

/// Rows encoded per graph evaluation in [`encode_rows`].
const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("input has {got} features, encoder expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("checkpoint does not match its config: {0}")]
    CheckpointMismatch(String),
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Mlp,
    Transformer,
}

impl FromStr for EncoderKind {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(EncoderKind::Mlp),
            "transformer" | "tf" => Ok(EncoderKind::Transformer),
            other => Err(EncoderError::InvalidConfig(format!(
                "unknown encoder kind `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_in: usize,
    pub d_out: usize,
    pub mlp_hidden: Vec<usize>,
    pub tf_model_dim: usize,
    pub tf_heads: usize,
    pub tf_blocks: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Defaults for `d` input features: `d_out = d`, one hidden layer of 64
    /// for the MLP, one 2-head block of width 16 for the Transformer.
    pub fn new(kind: EncoderKind, d: usize) -> Self {
        Self {
            kind,
            d_in: d,
            d_out: d,
            mlp_hidden: vec![64],
            tf_model_dim: 16,
            tf_heads: 2,
            tf_blocks: 1,
            seed: 0,
        }
    }

    pub fn ff_dim(&self) -> usize {
        2 * self.tf_model_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.d_in == 0 || self.d_out == 0 {
            return bad("d_in and d_out must be at least 1".into());
        }
        match self.kind {
            EncoderKind::Mlp => {
                if self.mlp_hidden.contains(&0) {
                    return bad("hidden widths must be positive".into());
                }
            }
            EncoderKind::Transformer => {
                if self.tf_model_dim == 0 || self.tf_heads == 0 {
                    return bad("tf_model_dim and tf_heads must be positive".into());
                }
                if self.tf_model_dim > usize::MAX / 2 {
                    return bad("tf_model_dim too large".into());
                }
                if self.tf_model_dim % self.tf_heads != 0 {
                    return bad(format!(
                        "tf_model_dim {} not divisible by tf_heads {}",
                        self.tf_model_dim, self.tf_heads
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of named tensors, or `None` on overflow.
    fn tensor_count(&self) -> Option<usize> {
        match self.kind {
            EncoderKind::Mlp => self.mlp_hidden.len().checked_add(1)?.checked_mul(2),
            EncoderKind::Transformer => self.tf_blocks.checked_mul(13)?.checked_add(5),
        }
    }

    /// Every parameter name with its shape and init bound (`None` = constant).
    fn parameter_layout(&self) -> Vec<(String, (usize, usize), Init)> {
        let mut out = Vec::new();
        match self.kind {
            EncoderKind::Mlp => {
                let mut widths = vec![self.d_in];
                widths.extend(&self.mlp_hidden);
                widths.push(self.d_out);
                for (l, w) in widths.windows(2).enumerate() {
                    out.push((format!("mlp.{l}.weight"), (w[0], w[1]), Init::fan_in(w[0])));
                    out.push((format!("mlp.{l}.bias"), (1, w[1]), Init::Const(0.0)));
                }
            }
            EncoderKind::Transformer => {
                let dm = self.tf_model_dim;
                let ff = self.ff_dim();
                out.push(("tf.lift.weight".into(), (self.d_in, dm), Init::fan_in(1)));
                out.push(("tf.lift.bias".into(), (1, dm), Init::Const(0.0)));
                out.push(("tf.pos".into(), (self.d_in, dm), Init::fan_in(self.d_in)));
                for b in 0..self.tf_blocks {
                    for proj in ["q", "k", "v", "o"] {
                        out.push((format!("tf.{b}.attn.{proj}"), (dm, dm), Init::fan_in(dm)));
                    }
                    out.push((format!("tf.{b}.attn.o_bias"), (1, dm), Init::Const(0.0)));
                    out.push((format!("tf.{b}.ln1.gain"), (1, dm), Init::Const(1.0)));
                    out.push((format!("tf.{b}.ln1.bias"), (1, dm), Init::Const(0.0)));
                    out.push((format!("tf.{b}.ff1.weight"), (dm, ff), Init::fan_in(dm)));
                    out.push((format!("tf.{b}.ff1.bias"), (1, ff), Init::Const(0.0)));
                    out.push((format!("tf.{b}.ff2.weight"), (ff, dm), Init::fan_in(ff)));
                    out.push((format!("tf.{b}.ff2.bias"), (1, dm), Init::Const(0.0)));
                    out.push((format!("tf.{b}.ln2.gain"), (1, dm), Init::Const(1.0)));
                    out.push((format!("tf.{b}.ln2.bias"), (1, dm), Init::Const(0.0)));
                }
                out.push(("tf.out.weight".into(), (dm, self.d_out), Init::fan_in(dm)));
                out.push(("tf.out.bias".into(), (1, self.d_out), Init::Const(0.0)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Const(f64),
}

impl Init {
    fn fan_in(n: usize) -> Self {
        Init::Uniform(1.0 / (n as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub weights: ParamStore,
}

/// Seeded uniform `±1/sqrt(fan_in)` weights, zero biases, unit layer-norm gains.
pub fn init_encoder(config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = rng_from_seed(config.seed);
    let mut weights = ParamStore::new();
    for (name, (r, c), init) in config.parameter_layout() {
        let data = match init {
            Init::Uniform(bound) => (0..r * c)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
            Init::Const(v) => vec![v; r * c],
        };
        weights.insert(name, Matrix::from_vec(r, c, data));
    }
    Ok(EncoderParams {
        config: config.clone(),
        weights,
    })
}

/// Appends the encoder to `g`. `x` must evaluate to a (`views` × `d_in`)
/// matrix; the returned node is (`views` × `d_out`).
pub fn build_encoder(g: &mut Graph, config: &EncoderConfig, x: NodeId, views: usize) -> NodeId {
    match config.kind {
        EncoderKind::Mlp => {
            let layers = config.mlp_hidden.len() + 1;
            let mut h = x;
            for l in 0..layers {
                let w = g.param(&format!("mlp.{l}.weight"));
                let b = g.param(&format!("mlp.{l}.bias"));
                let z = g.matmul(h, w);
                h = g.add(z, b);
                if l + 1 < layers {
                    h = g.relu(h);
                }
            }
            h
        }
        EncoderKind::Transformer => build_transformer(g, config, x, views),
    }
}

fn build_transformer(g: &mut Graph, config: &EncoderConfig, x: NodeId, views: usize) -> NodeId {
    let seq = config.d_in;
    let dm = config.tf_model_dim;
    let dh = dm / config.tf_heads;

    // tokens: (views*seq × dm)
    let col = g.reshape(x, views * seq, 1);
    let lift_w = g.param("tf.lift.weight");
    let lift_b = g.param("tf.lift.bias");
    let pos = g.param("tf.pos");
    // feature i: x_i * w_i + b + pos_i
    let lift_all = g.tile_rows(lift_w, views);
    let lifted = g.mul(col, lift_all);
    let lifted = g.add(lifted, lift_b);
    let pos_all = g.tile_rows(pos, views);
    let mut h = g.add(lifted, pos_all);

    let attn_scale = 1.0 / (dh as f64).sqrt();
    for b in 0..config.tf_blocks {
        let p = |name: &str| format!("tf.{b}.{name}");
        let wq = g.param(&p("attn.q"));
        let wk = g.param(&p("attn.k"));
        let wv = g.param(&p("attn.v"));
        let wo = g.param(&p("attn.o"));
        let bo = g.param(&p("attn.o_bias"));
        let q = g.matmul(h, wq);
        let k = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let mut heads = Vec::with_capacity(config.tf_heads);
        for head in 0..config.tf_heads {
            let qh = g.slice_cols(q, head * dh, dh);
            let kh = g.slice_cols(k, head * dh, dh);
            let vh = g.slice_cols(v, head * dh, dh);
            let scores = g.block_matmul_nt(qh, kh, seq);
            let scores = g.scale(scores, attn_scale);
            let weights = g.softmax_rows(scores);
            heads.push(g.block_matmul(weights, vh, seq));
        }
        let attn = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(heads)
        };
        let attn = g.matmul(attn, wo);
        let attn = g.add(attn, bo);
        let res = g.add(h, attn);
        h = affine_norm(g, res, &p("ln1.gain"), &p("ln1.bias"));

        let w1 = g.param(&p("ff1.weight"));
        let b1 = g.param(&p("ff1.bias"));
        let w2 = g.param(&p("ff2.weight"));
        let b2 = g.param(&p("ff2.bias"));
        let f = g.matmul(h, w1);
        let f = g.add(f, b1);
        let f = g.relu(f);
        let f = g.matmul(f, w2);
        let f = g.add(f, b2);
        let res = g.add(h, f);
        h = affine_norm(g, res, &p("ln2.gain"), &p("ln2.bias"));
    }

    let pooled = g.mean_rows(h, seq);
    let wout = g.param("tf.out.weight");
    let bout = g.param("tf.out.bias");
    let out = g.matmul(pooled, wout);
    g.add(out, bout)
}

fn affine_norm(g: &mut Graph, x: NodeId, gain: &str, bias: &str) -> NodeId {
    let gain = g.param(gain);
    let bias = g.param(bias);
    let n = g.layer_norm(x);
    let n = g.mul(n, gain);
    g.add(n, bias)
}

/// Encodes one feature vector.
pub fn encode(params: &EncoderParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(encode_rows(params, &[x])?.pop().expect("one row"))
}

/// Encodes many rows; row `i` of the result equals `encode(params, rows[i])` bitwise.
pub fn encode_rows<R: AsRef<[f64]>>(params: &EncoderParams, rows: &[R]) -> Result<Vec<Vec<f64>>> {
    let d = params.config.d_in;
    if let Some(bad) = rows.iter().find(|r| r.as_ref().len() != d) {
        return Err(EncoderError::DimensionMismatch {
            expected: d,
            got: bad.as_ref().len(),
        });
    }
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(ENCODE_CHUNK) {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = build_encoder(&mut g, &params.config, x, chunk.len());
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), Matrix::from_rows(chunk));
        let vals = forward(&g, &params.weights, &inputs)?;
        out.extend(vals.into_value(y).to_rows());
    }
    Ok(out)
}

/// Embeddings for every sample, in dataset order.
pub fn encode_dataset(params: &EncoderParams, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    if data.d() != params.config.d_in {
        return Err(EncoderError::DimensionMismatch {
            expected: params.config.d_in,
            got: data.d(),
        });
    }
    let rows: Vec<&[f64]> = data
        .samples()
        .iter()
        .map(|s| s.features.as_slice())
        .collect();
    encode_rows(params, &rows)
}

impl EncoderParams {
    /// Checkpoint bytes: the parameter container with the config as JSON metadata.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        self.weights.encode(&meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, weights) = ParamStore::decode(bytes)?;
        let config: EncoderConfig =
            serde_json::from_str(&meta).map_err(|e| EncoderError::Metadata(e.to_string()))?;
        config.validate()?;
        if config.tensor_count() != Some(weights.len()) {
            return Err(EncoderError::CheckpointMismatch(format!(
                "config implies {:?} tensors, found {}",
                config.tensor_count(),
                weights.len()
            )));
        }
        let layout = config.parameter_layout();
        for (name, shape, _) in &layout {
            match weights.get(name) {
                Some(m) if m.shape() == *shape => {}
                Some(m) => {
                    return Err(EncoderError::CheckpointMismatch(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        m.shape()
                    )))
                }
                None => {
                    return Err(EncoderError::CheckpointMismatch(format!(
                        "missing `{name}`"
                    )))
                }
            }
        }
        Ok(Self { config, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tf_config(d: usize) -> EncoderConfig {
        EncoderConfig {
            tf_model_dim: 8,
            tf_heads: 2,
            d_out: 3,
            seed: 4,
            ..EncoderConfig::new(EncoderKind::Transformer, d)
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = EncoderConfig::new(EncoderKind::Mlp, 5);
        assert_eq!(init_encoder(&cfg).unwrap(), init_encoder(&cfg).unwrap());
        let tf = tf_config(5);
        assert_eq!(init_encoder(&tf).unwrap(), init_encoder(&tf).unwrap());
    }

    #[test]
    fn heads_must_divide_model_dim() {
        let cfg = EncoderConfig {
            tf_model_dim: 8,
            tf_heads: 3,
            ..EncoderConfig::new(EncoderKind::Transformer, 4)
        };
        assert!(matches!(
            init_encoder(&cfg),
            Err(EncoderError::InvalidConfig(_))
        ));
    }

    #[test]
    fn no_hidden_layer_is_single_affine() {
        let cfg = EncoderConfig {
            mlp_hidden: vec![],
            ..EncoderConfig::new(EncoderKind::Mlp, 3)
        };
        let mut p = init_encoder(&cfg).unwrap();
        assert_eq!(p.weights.len(), 2);
        p.weights.insert("mlp.0.weight", Matrix::identity(3));
        let x = [0.5, -2.0, 7.25];
        assert_eq!(encode(&p, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn output_shape_and_dimension_errors() {
        for cfg in [
            EncoderConfig {
                d_out: 7,
                ..EncoderConfig::new(EncoderKind::Mlp, 4)
            },
            tf_config(4),
        ] {
            let p = init_encoder(&cfg).unwrap();
            assert_eq!(encode(&p, &[1.0, 2.0, 3.0, 4.0]).unwrap().len(), cfg.d_out);
            assert!(matches!(
                encode(&p, &[1.0]),
                Err(EncoderError::DimensionMismatch {
                    expected: 4,
                    got: 1
                })
            ));
        }
    }

    #[test]
    fn batched_rows_match_single_rows_bitwise() {
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 5) as f64 - 2.0).collect())
            .collect();
        for cfg in [EncoderConfig::new(EncoderKind::Mlp, 6), tf_config(6)] {
            let p = init_encoder(&cfg).unwrap();
            let batch = encode_rows(&p, &rows).unwrap();
            for (r, b) in rows.iter().zip(&batch) {
                assert_eq!(&encode(&p, r).unwrap(), b);
            }
        }
    }

    #[test]
    fn zero_blocks_is_lift_pool_affine() {
        let cfg = EncoderConfig {
            tf_blocks: 0,
            ..tf_config(3)
        };
        let p = init_encoder(&cfg).unwrap();
        let x = [0.3, -1.0, 2.0];
        let w = p.weights.get("tf.lift.weight").unwrap();
        let b = p.weights.get("tf.lift.bias").unwrap();
        let pos = p.weights.get("tf.pos").unwrap();
        let dm = cfg.tf_model_dim;
        let mut pooled = vec![0.0; dm];
        for (i, xi) in x.iter().enumerate() {
            for c in 0..dm {
                pooled[c] += (xi * w.get(i, c) + b.get(0, c) + pos.get(i, c)) / 3.0;
            }
        }
        let wo = p.weights.get("tf.out.weight").unwrap();
        let expected: Vec<f64> = (0..cfg.d_out)
            .map(|o| (0..dm).map(|c| pooled[c] * wo.get(c, o)).sum())
            .collect();
        let got = encode(&p, &x).unwrap();
        for (a, e) in got.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn transformer_is_order_sensitive() {
        let p = init_encoder(&tf_config(4)).unwrap();
        let a = encode(&p, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = encode(&p, &[2.0, 1.0, 3.0, 4.0]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        for cfg in [EncoderConfig::new(EncoderKind::Mlp, 5), tf_config(5)] {
            let p = init_encoder(&cfg).unwrap();
            let back = EncoderParams::from_bytes(&p.to_bytes()).unwrap();
            assert_eq!(back, p);
        }
        let mut p = init_encoder(&EncoderConfig::new(EncoderKind::Mlp, 5)).unwrap();
        p.weights.insert("mlp.0.bias", Matrix::zeros(1, 3));
        assert!(matches!(
            EncoderParams::from_bytes(&p.to_bytes()),
            Err(EncoderError::CheckpointMismatch(_))
        ));
    }
}
