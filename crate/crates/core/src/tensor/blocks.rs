use super::{BnMode, Real, Tape, Var};
use crate::error::{Error, Result};

/// Trainable affine parameters of a batch norm plus its running estimates.
pub struct BnVars<'a, T> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: &'a mut [T],
    pub running_var: &'a mut [T],
}

/// Parameters of `x + bn(conv(relu(bn(conv(x)))))`, both convs 3x3 / stride 1 / pad 1.
pub struct ResidualVars<'a, T> {
    pub conv1_weight: Var,
    pub conv1_bias: Option<Var>,
    pub bn1: BnVars<'a, T>,
    pub conv2_weight: Var,
    pub conv2_bias: Option<Var>,
    pub bn2: BnVars<'a, T>,
}

impl<T: Real> Tape<T> {
    pub fn batch_norm(&mut self, x: Var, bn: BnVars<'_, T>, mode: BnMode) -> Result<Var> {
        self.batch_norm2d(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, mode)
    }

    /// Residual block: `output = input + F(input)` with
    /// `F = conv -> bn -> relu -> conv -> bn`. Shape is preserved.
    pub fn residual_block(&mut self, x: Var, p: ResidualVars<'_, T>, mode: BnMode) -> Result<Var> {
        let c = match self.shape(x) {
            [_, c, _, _] => *c,
            s => {
                return Err(Error::shape(
                    "residual_block",
                    format!("input must be 4-D, got {s:?}"),
                ))
            }
        };
        let w1 = self.shape(p.conv1_weight).to_vec();
        let w2 = self.shape(p.conv2_weight).to_vec();
        if w1.len() != 4 || w2.len() != 4 || w1[1] != c || w2[0] != c || w1[0] != w2[1] {
            return Err(Error::shape(
                "residual_block",
                format!("{c} input channels vs conv weights {w1:?} and {w2:?}"),
            ));
        }
        let h = self.conv2d(x, p.conv1_weight, p.conv1_bias, 1, 1)?;
        let h = self.batch_norm(h, p.bn1, mode)?;
        let h = self.relu(h)?;
        let h = self.conv2d(h, p.conv2_weight, p.conv2_bias, 1, 1)?;
        let h = self.batch_norm(h, p.bn2, mode)?;
        self.add(x, h)
    }
}
