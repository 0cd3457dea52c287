use super::linear::Parameterized;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one vector per parameter tensor in
/// visitation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    fn ensure_shapes<P: Parameterized + ?Sized>(&mut self, params: &P) -> Result<()> {
        let mut sizes = Vec::new();
        params.visit_params_ref("", &mut |_, v, _| sizes.push(v.len()));
        if self.first.is_empty() && self.step == 0 {
            self.first = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.second = self.first.clone();
            return Ok(());
        }
        let have: Vec<usize> = self.first.iter().map(Vec::len).collect();
        if have != sizes || self.second.iter().map(Vec::len).ne(sizes.iter().copied()) {
            return Err(Error::shape(
                "AdamState",
                format!("{sizes:?}"),
                format!("{have:?}"),
            ));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update using the gradients accumulated in `params`.
///
/// Gradients are validated before anything is modified, so a non-finite
/// gradient leaves both parameters and state untouched.
pub fn adam_step<P: Parameterized + ?Sized>(
    params: &mut P,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    let mut bad = None;
    params.visit_params_ref("", &mut |name, _, g| {
        if bad.is_none() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                bad = Some(format!("{name}[{i}] (gradient)"));
            }
        }
    });
    if let Some(path) = bad {
        return Err(Error::Diverged { path });
    }
    state.ensure_shapes(params)?;

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let mut k = 0;
    let (first, second) = (&mut state.first, &mut state.second);
    params.visit_params("", &mut |p| {
        let m = &mut first[k];
        let v = &mut second[k];
        for i in 0..p.value.len() {
            let g = p.grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        k += 1;
    });
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: Parameterized + ?Sized>(params: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    params.visit_params_ref("", &mut |_, _, g| {
        sq += g.iter().map(|x| x * x).sum::<f64>()
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        params.visit_params("", &mut |p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
    norm
}
