//! Instance encoder: an affine+relu stack producing embeddings, plus a
//! projection head feeding the contrastive similarity.
//!
//! The projection output is L2-normalized by default so the contrastive
//! dot products stay in [-1, 1]; a config flag can disable this.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Architecture of the encoder, fixed for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    /// Layer widths `[d_in, hidden..., L]`; the last entry is the
    /// embedding dimension.
    pub dims: Vec<usize>,
    /// Projection head output dimension.
    pub proj_dim: usize,
    /// L2-normalize projections.
    pub normalize: bool,
}

impl EncoderArch {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.iter().any(|&d| d == 0) || self.proj_dim == 0 {
            return Err(Error::Validation(format!(
                "encoder architecture dims {:?} proj {} invalid",
                self.dims, self.proj_dim
            )));
        }
        if self.embedding_dim() < 2 {
            return Err(Error::Validation("embedding dim must be >= 2".into()));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub arch: EncoderArch,
    /// One (weights `[d x m]`, bias `[m]`) pair per layer.
    pub layers: Vec<(Tensor, Tensor)>,
    /// Projection weights `[L x p]`.
    pub proj: Tensor,
}

fn he_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("positive std");
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| normal.sample(rng)).collect(),
    )
    .expect("he_matrix shape")
}

impl EncoderParams {
    /// Seeded He-style initialization; biases start at zero.
    pub fn init(arch: EncoderArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .dims
            .windows(2)
            .map(|w| (he_matrix(w[0], w[1], rng), Tensor::vector(vec![0.0; w[1]])))
            .collect();
        let proj = he_matrix(arch.embedding_dim(), arch.proj_dim, rng);
        Ok(EncoderParams { arch, layers, proj })
    }

    /// Parameters flattened in a fixed order for the optimizer.
    pub fn flat(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for (w, b) in &self.layers {
            out.push(w.clone());
            out.push(b.clone());
        }
        out.push(self.proj.clone());
        out
    }

    /// Inverse of [`EncoderParams::flat`].
    pub fn set_flat(&mut self, flat: &[Tensor]) {
        debug_assert_eq!(flat.len(), 2 * self.layers.len() + 1);
        for (i, (w, b)) in self.layers.iter_mut().enumerate() {
            *w = flat[2 * i].clone();
            *b = flat[2 * i + 1].clone();
        }
        self.proj = flat[flat.len() - 1].clone();
    }

    /// Register all parameters on a graph.
    pub fn vars(&self, g: &Graph) -> EncoderVars {
        EncoderVars {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (g.input(w.clone()), g.input(b.clone())))
                .collect(),
            proj: g.input(self.proj.clone()),
            normalize: self.arch.normalize,
        }
    }

    /// Encode a batch of raw feature rows without tracking gradients.
    pub fn embed_rows(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let g = Graph::new();
        let vars = self.vars(&g);
        let x = g.input(Tensor::from_rows(rows)?);
        let h = encode_rows(&g, &vars, x)?;
        Ok(g.value(h))
    }

    /// Embedding of a single instance.
    pub fn encode(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.arch.d_in() {
            return Err(Error::shape("encode", &[self.arch.d_in()], &[features.len()]));
        }
        Ok(self.embed_rows(&[features.to_vec()])?.row_slice(0).to_vec())
    }

    /// Projected (and, by default, unit-norm) vector for an embedding.
    pub fn project(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.arch.embedding_dim() {
            return Err(Error::shape(
                "project",
                &[self.arch.embedding_dim()],
                &[embedding.len()],
            ));
        }
        let g = Graph::new();
        let vars = self.vars(&g);
        let h = g.input(Tensor::from_rows(&[embedding.to_vec()])?);
        let z = project_rows(&g, &vars, h)?;
        Ok(g.value(z).row_slice(0).to_vec())
    }
}

/// Graph-registered encoder parameters.
pub struct EncoderVars {
    pub layers: Vec<(Var, Var)>,
    pub proj: Var,
    pub normalize: bool,
}

impl EncoderVars {
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for &(w, b) in &self.layers {
            out.push(w);
            out.push(b);
        }
        out.push(self.proj);
        out
    }
}

/// Differentiable forward pass: `x [n x d_in] -> embeddings [n x L]`.
pub fn encode_rows(g: &Graph, vars: &EncoderVars, x: Var) -> Result<Var> {
    let mut h = x;
    for &(w, b) in &vars.layers {
        h = g.relu(g.affine(h, w, b)?);
    }
    Ok(h)
}

/// Differentiable projection: `h [n x L] -> z [n x p]`, row-normalized when
/// the architecture says so.
pub fn project_rows(g: &Graph, vars: &EncoderVars, h: Var) -> Result<Var> {
    let z = g.matmul(h, vars.proj)?;
    if vars.normalize {
        g.l2_normalize_rows(z)
    } else {
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand_chacha::rand_core::SeedableRng;

    fn identity_params(d: usize) -> EncoderParams {
        let arch = EncoderArch {
            dims: vec![d, d],
            proj_dim: d,
            normalize: true,
        };
        let eye = Tensor::new(
            vec![d, d],
            (0..d * d)
                .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        EncoderParams {
            arch,
            layers: vec![(eye.clone(), Tensor::vector(vec![0.0; d]))],
            proj: eye,
        }
    }

    #[test]
    fn identity_encoder_passes_nonnegative_input() {
        let p = identity_params(3);
        assert_eq!(p.encode(&[1.0, 2.0, 0.5]).unwrap(), vec![1.0, 2.0, 0.5]);
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut p = identity_params(2);
        p.layers[0].0 = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert_eq!(p.encode(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_computed_layer() {
        // x=[1,1], W=[[1,-1],[1,-1]], b=0, relu -> [2, 0]
        let mut p = identity_params(2);
        p.layers[0].0 = Tensor::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        assert_eq!(p.encode(&[1.0, 1.0]).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn projection_normalizes() {
        let p = identity_params(2);
        assert_eq!(p.project(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let z = p.project(&[0.3, -1.7]).unwrap();
        let norm: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(p.project(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = identity_params(2);
        assert!(p.encode(&[1.0, 2.0, 3.0]).is_err());
        assert!(p.project(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn deterministic_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = EncoderParams::init(
            EncoderArch {
                dims: vec![3, 4, 2],
                proj_dim: 2,
                normalize: true,
            },
            &mut rng,
        )
        .unwrap();
        let x = vec![0.4, -0.3, 1.1];
        assert_eq!(params.encode(&x).unwrap(), params.encode(&x).unwrap());

        // scalar loss through encode matches finite differences
        let flat = params.flat();
        let arch = params.arch.clone();
        let n_layer_tensors = 2 * params.layers.len();
        let err = grad_check(
            |g, vs| {
                let vars = EncoderVars {
                    layers: vs[..n_layer_tensors]
                        .chunks(2)
                        .map(|c| (c[0], c[1]))
                        .collect(),
                    proj: vs[n_layer_tensors],
                    normalize: arch.normalize,
                };
                let x = g.input(Tensor::from_rows(&[vec![0.4, -0.3, 1.1]]).unwrap());
                let h = encode_rows(g, &vars, x)?;
                let hv = g.row(h, 0)?;
                let s = g.sigmoid(hv);
                g.mean(s)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
