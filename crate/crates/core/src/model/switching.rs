use crate::error::{Error, Result};
use crate::numerics::{init, sigmoid, ParamId, ParamStore, Tape, Var};

/// Floor applied to joint probabilities before taking logs, so items the
/// baseline cannot emit get a large finite NLL.
pub const NLL_FLOOR: f64 = 1e-12;

/// `p_s = σ(W_s·e + b_s)`.
#[derive(Clone, Debug)]
pub struct SwitchingHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl SwitchingHead {
    pub fn new(params: &mut ParamStore, d_model: usize) -> Self {
        SwitchingHead {
            weight: params.add("switch.weight", init::zeros(&[d_model, 1])),
            bias: params.add("switch.bias", init::zeros(&[1])),
        }
    }

    /// Pre-sigmoid switch value per row of `hidden` (`n × 1`).
    pub fn logit(&self, tape: &mut Tape<'_>, hidden: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let z = tape.matmul(hidden, w)?;
        tape.add_row(z, b)
    }

    pub fn switch_probability(&self, params: &ParamStore, e: &[f64]) -> Result<f64> {
        let w = params.get(self.weight).data();
        if w.len() != e.len() {
            return Err(Error::Shape {
                op: "switch_probability",
                lhs: vec![w.len()],
                rhs: vec![e.len()],
            });
        }
        let z: f64 = w.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() + params.get(self.bias).data()[0];
        Ok(sigmoid(z))
    }
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (s - 1.0).abs() > 1e-4 {
        return Err(Error::contract(format!("{name} is not a distribution (sum {s})")));
    }
    Ok(())
}

/// `[p_s·P_dial, (1 − p_s)·P_rec]`, vocabulary block first.
pub fn mix(p_dial: &[f64], p_rec: &[f64], p_s: f64) -> Result<Vec<f64>> {
    check_distribution("P_dial", p_dial)?;
    check_distribution("P_rec", p_rec)?;
    if !(0.0..=1.0).contains(&p_s) {
        return Err(Error::contract(format!("switch probability {p_s} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(p_dial.len() + p_rec.len());
    out.extend(p_dial.iter().map(|p| p_s * p));
    out.extend(p_rec.iter().map(|p| (1.0 - p_s) * p));
    Ok(out)
}
