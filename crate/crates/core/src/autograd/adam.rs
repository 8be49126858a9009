use indexmap::IndexMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per named parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: IndexMap<String, Tensor4<T>>,
    pub v: IndexMap<String, Tensor4<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Zero moments for every parameter, in the parameters' order.
    pub fn with_params(config: AdamConfig, params: &IndexMap<String, Tensor4<T>>) -> Result<Self> {
        let mut st = Self::new(config);
        for (name, p) in params {
            st.m.insert(name.clone(), Tensor4::zeros(p.shape())?);
            st.v.insert(name.clone(), Tensor4::zeros(p.shape())?);
        }
        Ok(st)
    }

    /// One bias-corrected Adam update: `p ← p − lr·m̂/(√v̂ + ε)`.
    ///
    /// Parameters without an entry in `grads` are left untouched (their
    /// moments are not decayed either). A gradient naming an unknown
    /// parameter is an error.
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor4<T>>,
        grads: &IndexMap<String, Tensor4<T>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(shape_err!(
                    "gradient for {name} has shape {} but parameter is {}",
                    g.shape(),
                    p.shape()
                ));
            }
            for moments in [&self.m, &self.v] {
                if let Some(mt) = moments.get(name) {
                    if mt.shape() != p.shape() {
                        return Err(shape_err!("optimizer moment for {name} has shape {}", mt.shape()));
                    }
                }
            }
        }

        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));

        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor4::from_parts(p.shape(), vec![T::zero(); p.numel()]));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor4::from_parts(p.shape(), vec![T::zero(); p.numel()]));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                if c.lr != 0.0 {
                    let m_hat = *mv * inv_bc1;
                    let v_hat = *vv * inv_bc2;
                    *pv -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
