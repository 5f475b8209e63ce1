//! Conditional flow matching along the linear interpolant
//! `x_t = (1 - t) x_0 + t x_1` with target field `x_1 - x_0`.

use rand::Rng;

use crate::cnf::draw_standard_normal;
use crate::error::{Error, Result};
use crate::field::VectorFieldNet;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDraw {
    pub t: f64,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub x_t: Vec<f64>,
    pub u_target: Vec<f64>,
}

impl ConditionalDraw {
    pub fn new(t: f64, x0: Vec<f64>, x1: Vec<f64>) -> Self {
        let x_t = x0.iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let u_target = x0.iter().zip(&x1).map(|(a, b)| b - a).collect();
        Self {
            t,
            x0,
            x1,
            x_t,
            u_target,
        }
    }
}

/// Draws `t ~ U[0, 1]` and `x_0 ~ N(0, I)` (in that order) for endpoint `x1`.
pub fn draw_conditional<R: Rng + ?Sized>(x1: &[f64], rng: &mut R) -> ConditionalDraw {
    let t: f64 = rng.random();
    let x0 = draw_standard_normal(rng, x1.len());
    ConditionalDraw::new(t, x0, x1.to_vec())
}

/// `||u_t(x_t) - u_target||^2` and its parameter gradient.
pub fn cfm_sample_loss(net: &VectorFieldNet, draw: &ConditionalDraw) -> Result<(f64, Vec<f64>)> {
    if draw.x_t.len() != net.dim() {
        return Err(Error::InvalidInput(format!(
            "draw has dimension {}, network has {}",
            draw.x_t.len(),
            net.dim()
        )));
    }
    let (u, tape) = net.forward(draw.t, &draw.x_t)?;
    let residual: Vec<f64> = u.iter().zip(&draw.u_target).map(|(a, b)| a - b).collect();
    let loss = residual.iter().map(|r| r * r).sum();
    let upstream: Vec<f64> = residual.iter().map(|r| 2.0 * r).collect();
    let grad = net.backward_params(&tape, &upstream)?;
    Ok((loss, grad))
}
