use super::{ForwardOptions, Mbt, ModelInputs};
use crate::error::Result;
use crate::params::{Bound, ParamId};
use crate::tensor::{grad_check, Graph, Tensor, Var};

/// Finite-difference outcome for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Key-projection biases leave the loss invariant; their gradient is
    /// checked to vanish instead.
    pub shift_invariant: bool,
    pub max_abs_grad: f64,
}

impl GroupCheck {
    pub fn passes(&self, tol: f64) -> bool {
        if self.shift_invariant {
            self.max_abs_grad < 1e-12
        } else {
            self.max_rel_error < tol
        }
    }
}

impl Mbt {
    /// Summed cross-entropy over heads against soft `targets`.
    pub fn loss(
        &self,
        g: &mut Graph,
        vars: &Bound,
        inputs: &ModelInputs,
        targets: &[Tensor],
        opts: &mut ForwardOptions,
    ) -> Result<Var> {
        let out = self.forward(g, vars, inputs, opts)?;
        let mut total: Option<Var> = None;
        for (&logits, t) in out.logits.iter().zip(targets) {
            let l = g.softmax_cross_entropy(logits, t.clone())?;
            total = Some(match total {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        Ok(total.expect("at least one head"))
    }

    fn is_key_bias(&self, id: ParamId) -> bool {
        self.store.name(id).ends_with(".attn.bk")
    }

    /// Central-difference check of the loss gradient for every parameter tensor.
    pub fn loss_grad_check(
        &self,
        inputs: &ModelInputs,
        targets: &[Tensor],
        eps: f64,
    ) -> Result<Vec<GroupCheck>> {
        let analytic = {
            let mut g = Graph::new();
            let vars = self.store.bind(&mut g)?;
            let loss = self.loss(&mut g, &vars, inputs, targets, &mut ForwardOptions::default())?;
            let mut grads = g.backward(loss, vars.vars())?;
            vars.collect(&mut grads, &self.store)
        };
        let mut out = Vec::new();
        for id in self.store.ids() {
            let max_abs_grad = analytic[id.index()].data().iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            let shift_invariant = self.is_key_bias(id);
            let max_rel_error = if shift_invariant {
                0.0
            } else {
                grad_check(
                    |g, w| {
                        let mut v = self.bind_constants(g)?.vars().to_vec();
                        v[id.index()] = w;
                        self.loss(g, &Bound::from_vars(v), inputs, targets, &mut ForwardOptions::default())
                    },
                    self.store.get(id),
                    eps,
                )?
            };
            out.push(GroupCheck {
                name: self.store.name(id).to_string(),
                max_rel_error,
                shift_invariant,
                max_abs_grad,
            });
        }
        Ok(out)
    }
}
