//! Layer-level stochastic depth.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Applies `layer(g, z, scale)`, which must return `z + scale·branches(z)`.
///
/// In training the whole layer is skipped with probability `p` and kept
/// branches are scaled by `1/(1−p)`; at inference the scale is 1.
pub fn stochastic_depth<R, F>(
    g: &mut Graph,
    z: Var,
    p: f64,
    rng: &mut R,
    training: bool,
    layer: F,
) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnOnce(&mut Graph, Var, f64) -> Result<Var>,
{
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("stochastic_depth", format!("p = {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return layer(g, z, 1.0);
    }
    if rng.random::<f64>() < p {
        Ok(z)
    } else {
        layer(g, z, 1.0 / (1.0 - p))
    }
}
