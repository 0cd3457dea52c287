use rand::Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Mutable view of one parameter tensor together with its gradient accumulator.
pub struct ParamRef<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Anything that owns named parameter tensors with gradient accumulators.
///
/// Visitation order is fixed and defines the layout used by the optimizer
/// state and by checkpoints.
pub trait Parameterized {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>));

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64], &[f64]));

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |p| p.grad.fill(0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params_ref("", &mut |_, v, _| n += v.len());
        n
    }

    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params_ref("", &mut |_, v, _| out.extend_from_slice(v));
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params_ref("", &mut |_, _, g| out.extend_from_slice(g));
        out
    }

    /// Name of the tensor holding flat coordinate `idx` and the offset within it.
    fn locate(&self, idx: usize) -> Option<(String, usize)> {
        let mut seen = 0;
        let mut found = None;
        self.visit_params_ref("", &mut |name, v, _| {
            if found.is_none() && idx < seen + v.len() {
                found = Some((name.to_string(), idx - seen));
            }
            seen += v.len();
        });
        found
    }

    /// Applies `f` to the flat coordinate `idx`, returning whether it existed.
    fn with_coordinate(&mut self, idx: usize, f: &mut dyn FnMut(&mut f64)) -> bool {
        let mut seen = 0;
        let mut done = false;
        self.visit_params("", &mut |p| {
            if !done && idx < seen + p.value.len() {
                f(&mut p.value[idx - seen]);
                done = true;
            }
            seen += p.value.len();
        });
        done
    }
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully-connected layer `y = x·Wᵀ + b` with gradient accumulators.
///
/// An empty `bias` means the layer has no bias term.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub grad_weight: Matrix,
    pub grad_bias: Vec<f64>,
}

impl LinearLayer {
    /// Glorot-uniform weights on `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        let weight = Matrix::from_vec(out_dim, in_dim, data).expect("sized above");
        Self::from_parts(
            weight,
            if with_bias {
                vec![0.0; out_dim]
            } else {
                Vec::new()
            },
        )
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>) -> Self {
        let (o, i) = weight.shape();
        let nb = bias.len();
        assert!(nb == 0 || nb == o, "bias length {nb} for {o} outputs");
        Self {
            weight,
            bias,
            grad_weight: Matrix::zeros(o, i),
            grad_bias: vec![0.0; nb],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, with_bias: bool) -> Self {
        Self::from_parts(
            Matrix::zeros(out_dim, in_dim),
            if with_bias {
                vec![0.0; out_dim]
            } else {
                Vec::new()
            },
        )
    }

    pub fn identity(n: usize, with_bias: bool) -> Self {
        Self::from_parts(
            Matrix::identity(n),
            if with_bias { vec![0.0; n] } else { Vec::new() },
        )
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn has_bias(&self) -> bool {
        !self.bias.is_empty()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "LinearLayer::forward",
                self.in_dim(),
                x.cols(),
            ));
        }
        let mut y = x.matmul_t(&self.weight)?;
        if self.has_bias() {
            for r in 0..y.rows() {
                for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                    *v += b;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients for upstream `dy` and returns `dx`.
    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        if dy.cols() != self.out_dim() || dy.rows() != x.rows() {
            return Err(Error::shape(
                "LinearLayer::backward",
                format!("{}x{}", x.rows(), self.out_dim()),
                format!("{:?}", dy.shape()),
            ));
        }
        self.grad_weight.add_assign(&dy.t_matmul(x)?)?;
        if self.has_bias() {
            for (g, s) in self.grad_bias.iter_mut().zip(dy.col_sums()) {
                *g += s;
            }
        }
        dy.matmul(&self.weight)
    }
}

impl Parameterized for LinearLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_>)) {
        f(ParamRef {
            name: join_name(prefix, "weight"),
            value: self.weight.data_mut(),
            grad: self.grad_weight.data_mut(),
        });
        if !self.bias.is_empty() {
            f(ParamRef {
                name: join_name(prefix, "bias"),
                value: &mut self.bias,
                grad: &mut self.grad_bias,
            });
        }
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64], &[f64])) {
        f(
            &join_name(prefix, "weight"),
            self.weight.data(),
            self.grad_weight.data(),
        );
        if !self.bias.is_empty() {
            f(&join_name(prefix, "bias"), &self.bias, &self.grad_bias);
        }
    }
}
