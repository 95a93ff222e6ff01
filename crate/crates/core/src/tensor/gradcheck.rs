//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::value::Tensor;
use crate::error::Result;

/// Relative-error floor shared by every gradient comparison.
pub const DENOM_FLOOR: f64 = 1e-8;

/// `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Maximum relative error between the analytic gradient of `f` at `x` and the
/// central difference `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)`.
///
/// `f` builds a scalar from its input inside the supplied graph.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let xv = g.param(x.clone())?;
        let y = f(&mut g, xv)?;
        let mut grads = g.backward(y, &[xv])?;
        grads.remove(xv).expect("gradient present")
    };
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(t)?;
        let y = f(&mut g, xv)?;
        Ok(g.checked_value(y, "grad_check")?.item())
    };
    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}


/// Random linear readout `Σ r ⊙ y` used to turn tensor outputs into scalars.
pub fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = Tensor::randn(g.shape(y), 1.0, &mut rng);
    let w = g.mul_const(y, r)?;
    g.sum(w)
}

/// Finite-difference check of every differentiable primitive, one entry per
/// (operation, differentiated input) pair, at the given seed.
pub fn primitive_suite(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let a = t(&[3, 4]);
    let b = t(&[3, 4]);
    let bias = t(&[4]);
    let w = t(&[4, 5]);
    let x3 = t(&[2, 3, 4]);
    let y3 = t(&[2, 4, 5]);
    let yt = t(&[2, 5, 4]);
    let gamma = t(&[4]);
    let beta = t(&[4]);
    let c = t(&[2, 4]);
    let probs: Vec<f64> = {
        let raw = t(&[3, 4]);
        let soft = super::graph::softmax_values(&raw, 1);
        soft.into_data()
    };
    let soft_targets = Tensor::new(vec![3, 4], probs)?;
    let bin_targets = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 3) as f64 / 2.0);
    let mask = t(&[3, 4]);

    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, $x:expr, |$g:ident, $v:ident| $body:expr) => {{
            let err = grad_check(
                |$g: &mut Graph, $v: Var| {
                    let y = $body;
                    readout($g, y, seed)
                },
                $x,
                eps,
            )?;
            out.push(($name, err));
        }};
    }

    check!("add.lhs", &a, |g, v| {
        let k = g.constant(b.clone())?;
        g.add(v, k)?
    });
    check!("add.broadcast_rhs", &bias, |g, v| {
        let k = g.constant(a.clone())?;
        g.add(k, v)?
    });
    check!("sub.rhs", &b, |g, v| {
        let k = g.constant(a.clone())?;
        g.sub(k, v)?
    });
    check!("mul", &a, |g, v| {
        let k = g.constant(b.clone())?;
        g.mul(v, k)?
    });
    check!("mul.self", &a, |g, v| g.mul(v, v)?);
    check!("scale", &a, |g, v| g.scale(v, -1.7)?);
    check!("mul_const", &a, |g, v| g.mul_const(v, mask.clone())?);
    check!("matmul.lhs", &a, |g, v| {
        let k = g.constant(w.clone())?;
        g.matmul(v, k)?
    });
    check!("matmul.rhs", &w, |g, v| {
        let k = g.constant(x3.clone())?;
        g.matmul(k, v)?
    });
    check!("bmm.lhs", &x3, |g, v| {
        let k = g.constant(y3.clone())?;
        g.bmm(v, k, false)?
    });
    check!("bmm.rhs", &y3, |g, v| {
        let k = g.constant(x3.clone())?;
        g.bmm(k, v, false)?
    });
    check!("bmm_t.lhs", &x3, |g, v| {
        let k = g.constant(yt.clone())?;
        g.bmm(v, k, true)?
    });
    check!("bmm_t.rhs", &yt, |g, v| {
        let k = g.constant(x3.clone())?;
        g.bmm(k, v, true)?
    });
    check!("softmax.last", &x3, |g, v| g.softmax(v, 2)?);
    check!("softmax.middle", &x3, |g, v| g.softmax(v, 1)?);
    check!("layer_norm.x", &x3, |g, v| {
        let gm = g.constant(gamma.clone())?;
        let bt = g.constant(beta.clone())?;
        g.layer_norm(v, gm, bt, 1e-6)?
    });
    check!("layer_norm.gamma", &gamma, |g, v| {
        let xs = g.constant(x3.clone())?;
        let bt = g.constant(beta.clone())?;
        g.layer_norm(xs, v, bt, 1e-6)?
    });
    check!("layer_norm.beta", &beta, |g, v| {
        let xs = g.constant(x3.clone())?;
        let gm = g.constant(gamma.clone())?;
        g.layer_norm(xs, gm, v, 1e-6)?
    });
    check!("gelu", &a, |g, v| g.gelu(v)?);
    check!("concat", &a, |g, v| {
        let k = g.constant(c.clone())?;
        g.concat(&[k, v, k], 0)?
    });
    check!("slice", &x3, |g, v| g.slice(v, 1, 1, 3)?);
    check!("stack", &a, |g, v| {
        let k = g.constant(b.clone())?;
        g.stack(&[v, k], 1)?
    });
    check!("mean_axis", &x3, |g, v| g.mean_axis(v, 1)?);
    check!("reshape", &x3, |g, v| g.reshape(v, &[6, 4])?);
    check!("permute", &x3, |g, v| g.permute(v, &[2, 0, 1])?);
    check!("expand_leading", &a, |g, v| g.expand_leading(v, 3)?);
    check!("sum", &a, |g, v| {
        let s = g.sum(v)?;
        g.scale(s, 0.5)?
    });
    check!("bce_loss", &a, |g, v| g.bce_with_logits(v, bin_targets.clone())?);
    check!("ce_loss", &a, |g, v| g.softmax_cross_entropy(v, soft_targets.clone())?);
    Ok(out)
}
