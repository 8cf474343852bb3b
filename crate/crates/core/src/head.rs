//! Two-layer classification head `softmax(W₂ act(W₁ x + b₁) + b₂)`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoder::Scope;
use crate::error::{Error, Result};
use crate::params::{glorot, ParamStore};

/// Activation between the two layers. The default is the identity, i.e.
/// two stacked affine maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    #[default]
    Identity,
    Tanh,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl HeadShape {
    pub fn init<R: Rng>(&self, rng: &mut R, prefix: &str, store: &mut ParamStore) {
        store.insert(format!("{prefix}.hidden.weight"), glorot(rng, self.input, self.hidden));
        store.insert(format!("{prefix}.hidden.bias"), Array2::zeros((1, self.hidden)));
        store.insert(format!("{prefix}.out.weight"), glorot(rng, self.hidden, self.classes));
        store.insert(format!("{prefix}.out.bias"), Array2::zeros((1, self.classes)));
    }

    pub fn check(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        let expected = [
            ("hidden.weight", (self.input, self.hidden)),
            ("hidden.bias", (1, self.hidden)),
            ("out.weight", (self.hidden, self.classes)),
            ("out.bias", (1, self.classes)),
        ];
        for (name, shape) in expected {
            let full = format!("{prefix}.{name}");
            let p = store.require(&full)?;
            if p.dim() != shape {
                return Err(Error::Config(format!(
                    "`{full}` has shape {:?} but the model expects {shape:?}",
                    p.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Logits of the head on each row of `x`.
pub fn logits(tape: &mut Tape, scope: Scope<'_>, prefix: &str, activation: HeadActivation, x: Var) -> Var {
    let w1 = scope.var(&format!("{prefix}.hidden.weight"));
    let b1 = scope.var(&format!("{prefix}.hidden.bias"));
    let w2 = scope.var(&format!("{prefix}.out.weight"));
    let b2 = scope.var(&format!("{prefix}.out.bias"));
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = match activation {
        HeadActivation::Identity => h,
        HeadActivation::Tanh => tape.tanh(h),
        HeadActivation::Gelu => tape.gelu(h),
    };
    let o = tape.matmul(h, w2);
    tape.add_row(o, b2)
}

/// Row-stochastic class probabilities.
pub fn probabilities(tape: &mut Tape, scope: Scope<'_>, prefix: &str, activation: HeadActivation, x: Var) -> Var {
    let z = logits(tape, scope, prefix, activation, x);
    tape.softmax_rows(z)
}
