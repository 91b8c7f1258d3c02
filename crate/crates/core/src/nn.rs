//! Minimal dense inference primitives shared by the pooling, decoder and head
//! modules. Row-major semantics: an `n x c` matrix holds `n` feature rows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// In-place numerically stable softmax. Entries equal to `-inf` get weight 0;
/// a slice that is entirely `-inf` is left untouched.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Affine map `y = W x + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::config(format!(
                "linear layer weight is {}x{} but bias has {} entries",
                weight.nrows(),
                weight.ncols(),
                bias.len()
            )));
        }
        if !weight.iter().chain(bias.iter()).all(|x| x.is_finite()) {
            return Err(Error::config("linear layer has non-finite parameters"));
        }
        Ok(Linear { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }

    /// Square identity map.
    pub fn identity(dim: usize) -> Self {
        Linear {
            weight: DMatrix::identity(dim, dim),
            bias: DVector::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Applies the layer to every row of `x`.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::config(format!(
                "linear layer expects {} input channels, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut y = x * self.weight.transpose();
        for mut row in y.row_iter_mut() {
            row += self.bias.transpose();
        }
        Ok(y)
    }
}

/// Stack of linear layers with ReLU between consecutive layers and no
/// activation after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::config(format!(
                    "MLP layers do not chain: {} outputs feed {} inputs",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn single(layer: Linear) -> Self {
        Mlp {
            layers: vec![layer],
        }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            h.apply(|v| *v = v.max(0.0));
            h = layer.forward(&h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(gamma: DVector<f64>, beta: DVector<f64>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::config("layer norm gamma and beta lengths differ"));
        }
        Ok(LayerNorm { gamma, beta })
    }

    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: DVector::from_element(dim, 1.0),
            beta: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::config(format!(
                "layer norm over {} channels applied to {}",
                self.dim(),
                x.ncols()
            )));
        }
        let c = x.ncols() as f64;
        let mut y = x.clone();
        for mut row in y.row_iter_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + Self::EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma[j] + self.beta[j];
            }
        }
        Ok(y)
    }
}
