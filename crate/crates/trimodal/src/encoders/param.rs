//! Named parameter tensors and deterministic initializers.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// A learnable tensor with its accumulated gradient. Shapes are recorded for
/// checkpoint manifests and topology checks; data is flat row-major f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            data: vec![0.0; len],
            grad: vec![0.0; len],
        }
    }

    pub fn from_data(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        let len = data.len();
        Param {
            name: name.into(),
            shape,
            data,
            grad: vec![0.0; len],
        }
    }

    /// U(−bound, bound) entries, the fan-in style init used by the backbones.
    pub fn uniform(
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        Param::from_data(name, shape, data)
    }

    /// Orthogonal init for projection heads: Gaussian matrix, Gram-Schmidt
    /// over the smaller side, so rows (or columns when rows > cols) are
    /// orthonormal.
    pub fn orthogonal(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let transpose = rows > cols;
        let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
        let mut m: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..c).map(|_| gaussian(rng)).collect())
            .collect();
        for i in 0..r {
            // Two Gram-Schmidt sweeps keep orthogonality tight numerically.
            for _ in 0..2 {
                for j in 0..i {
                    let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        m[i][k] -= dot * m[j][k];
                    }
                }
            }
            let norm: f64 = m[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut m[i] {
                *v /= norm;
            }
        }
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = if transpose { m[j][i] } else { m[i][j] };
            }
        }
        Param::from_data(name, vec![rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Standard normal via Box-Muller; two uniforms per draw keep the stream
/// layout simple and platform-stable.
pub(crate) fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
