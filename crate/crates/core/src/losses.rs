//! Adversarial, cycle-consistency and combined objectives.
//!
//! Naming: `G1: X -> Y`, `G2: Y -> X`, `D1` judges images of `Y`, `D2` judges
//! images of `X`. Discriminators emit patch probabilities in `(0, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssim::{ssim_loss, SsimConfig};
use crate::tensor::{Real, Tape, Var};

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before `ln`.
pub const PROB_FLOOR: f64 = 1e-7;

fn log_prob<T: Real>(tape: &mut Tape<T>, p: Var) -> Result<Var> {
    tape.clamped_log(p, T::c(PROB_FLOOR), T::c(1.0 - PROB_FLOOR))
}

fn log_one_minus<T: Real>(tape: &mut Tape<T>, p: Var) -> Result<Var> {
    let q = tape.affine(p, -T::one(), T::one())?;
    log_prob(tape, q)
}

/// `-1/2 * (mean ln D(real) + mean ln(1 - D(fake)))`.
///
/// Zero for a perfect discriminator, `ln 2` for one that outputs 0.5 everywhere.
pub fn discriminator_loss<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let lr = log_prob(tape, d_real)?;
    let lr = tape.mean(lr)?;
    let lf = log_one_minus(tape, d_fake)?;
    let lf = tape.mean(lf)?;
    let s = tape.add(lr, lf)?;
    tape.affine(s, T::c(-0.5), T::zero())
}

/// Non-saturating generator loss `-mean ln D(G(x))`.
pub fn generator_adv_loss<T: Real>(tape: &mut Tape<T>, d_fake: Var) -> Result<Var> {
    let l = log_prob(tape, d_fake)?;
    let m = tape.mean(l)?;
    tape.affine(m, -T::one(), T::zero())
}

/// Minimax-form generator loss `mean ln(1 - D(G(x)))`, kept for comparison:
/// its gradient vanishes when the discriminator confidently rejects fakes.
pub fn saturating_generator_loss<T: Real>(tape: &mut Tape<T>, d_fake: Var) -> Result<Var> {
    let l = log_one_minus(tape, d_fake)?;
    tape.mean(l)
}

/// `lambda * (mean |x_rec - x| + mean |y_rec - y|)`.
pub fn cycle_loss<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    x_rec: Var,
    y: Var,
    y_rec: Var,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::config("lambda", "must be >= 0"));
    }
    let dx = tape.sub(x_rec, x)?;
    let dx = tape.abs(dx)?;
    let dx = tape.mean(dx)?;
    let dy = tape.sub(y_rec, y)?;
    let dy = tape.abs(dy)?;
    let dy = tape.mean(dy)?;
    let s = tape.add(dx, dy)?;
    tape.affine(s, T::c(lambda), T::zero())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda_ssim: f64,
    /// Images are divided by this before the L1 cycle term, so `lambda`
    /// weighs an error measured as a fraction of the pixel range.
    pub pixel_max: f64,
}

/// Everything the generator objective reads, for one batch.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub x: Var,
    pub y: Var,
    /// `G1(x)`
    pub fake_y: Var,
    /// `G2(y)`
    pub fake_x: Var,
    /// `G2(G1(x))`
    pub rec_x: Var,
    /// `G1(G2(y))`
    pub rec_y: Var,
    /// `D1(G1(x))`
    pub d1_fake: Var,
    /// `D2(G2(y))`
    pub d2_fake: Var,
}

/// Discriminator outputs on real images and on (buffered, detached) fakes.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorTerms {
    pub d1_real: Var,
    pub d1_fake: Var,
    pub d2_real: Var,
    pub d2_fake: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_d1: f64,
    pub adv_d2: f64,
    pub cycle: f64,
    pub ssim: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,adv_g,adv_d1,adv_d2,cycle,ssim,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.adv_g, self.adv_d1, self.adv_d2, self.cycle, self.ssim, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.adv_g,
            self.adv_d1,
            self.adv_d2,
            self.cycle,
            self.ssim,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub struct Objective {
    /// `adv_g + cycle + ssim`, the scalar the generators minimize.
    pub generator: Var,
    pub adv_g: Var,
    pub cycle: Var,
    pub ssim: Var,
    pub d1: Option<Var>,
    pub d2: Option<Var>,
    pub report: LossReport,
}

/// Assembles the combined objective: non-saturating adversarial terms for
/// both generators, the weighted cycle term, and the weighted SSIM term over
/// the pairs `(x, G1(x))` and `(y, G2(y))`. Discriminator objectives are
/// added when `disc` is given.
pub fn total_objective<T: Real>(
    tape: &mut Tape<T>,
    terms: &GeneratorTerms,
    disc: Option<&DiscriminatorTerms>,
    weights: &LossWeights,
    ssim_cfg: &SsimConfig,
) -> Result<Objective> {
    let a1 = generator_adv_loss(tape, terms.d1_fake)?;
    let a2 = generator_adv_loss(tape, terms.d2_fake)?;
    let adv_g = tape.add(a1, a2)?;

    let inv = T::c(1.0 / weights.pixel_max);
    let norm = |tape: &mut Tape<T>, v: Var| tape.affine(v, inv, T::zero());
    let (x, rx, y, ry) = (
        norm(tape, terms.x)?,
        norm(tape, terms.rec_x)?,
        norm(tape, terms.y)?,
        norm(tape, terms.rec_y)?,
    );
    let cycle = cycle_loss(tape, x, rx, y, ry, weights.lambda)?;

    let sp = ssim_loss(tape, &[(terms.x, terms.fake_y)], ssim_cfg, weights.lambda_ssim)?;
    let sq = ssim_loss(tape, &[(terms.y, terms.fake_x)], ssim_cfg, weights.lambda_ssim)?;
    let ssim = tape.add(sp, sq)?;

    let g = tape.add(adv_g, cycle)?;
    let generator = tape.add(g, ssim)?;

    let (d1, d2) = match disc {
        Some(d) => (
            Some(discriminator_loss(tape, d.d1_real, d.d1_fake)?),
            Some(discriminator_loss(tape, d.d2_real, d.d2_fake)?),
        ),
        None => (None, None),
    };
    let f = |v: Var| tape.scalar(v).to_f64().unwrap();
    let report = LossReport {
        adv_g: f(adv_g),
        adv_d1: d1.map(f).unwrap_or(0.0),
        adv_d2: d2.map(f).unwrap_or(0.0),
        cycle: f(cycle),
        ssim: f(ssim),
        total: f(generator),
    };
    Ok(Objective {
        generator,
        adv_g,
        cycle,
        ssim,
        d1,
        d2,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn probs(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.constant(Tensor::from_vec(v.to_vec()))
    }

    #[test]
    fn chance_discriminator_is_ln2() {
        let mut tape = Tape::new();
        let r = probs(&mut tape, &[0.5; 4]);
        let f = probs(&mut tape, &[0.5; 4]);
        let l = discriminator_loss(&mut tape, r, f).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-12);
        let g = generator_adv_loss(&mut tape, f).unwrap();
        assert!((tape.scalar(g) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_is_zero() {
        let mut tape = Tape::new();
        let r = probs(&mut tape, &[0.999999]);
        let f = probs(&mut tape, &[1e-6]);
        let l = discriminator_loss(&mut tape, r, f).unwrap();
        assert!(tape.scalar(l).abs() < 1e-5);
    }

    #[test]
    fn clamps_exact_zero_and_one() {
        let mut tape = Tape::new();
        let r = probs(&mut tape, &[1.0, 0.0]);
        let f = probs(&mut tape, &[0.0, 1.0]);
        let l = discriminator_loss(&mut tape, r, f).unwrap();
        assert!(tape.scalar(l).is_finite());
        let g = generator_adv_loss(&mut tape, f).unwrap();
        assert!(tape.scalar(g).is_finite());
    }

    #[test]
    fn generator_wins_at_one() {
        let mut tape = Tape::new();
        let f = probs(&mut tape, &[1.0 - 1e-9; 3]);
        let g = generator_adv_loss(&mut tape, f).unwrap();
        assert!(tape.scalar(g) < 1e-6);
    }

    #[test]
    fn cycle_with_paper_lambda() {
        let mut tape = Tape::new();
        let x = probs(&mut tape, &[0.0, 0.0]);
        let xr = probs(&mut tape, &[0.1, -0.1]);
        let y = probs(&mut tape, &[0.5, 0.5]);
        let yr = probs(&mut tape, &[0.6, 0.4]);
        let l = cycle_loss(&mut tape, x, xr, y, yr, 10.0).unwrap();
        assert!((tape.scalar(l) - 2.0).abs() < 1e-12);
        let l = cycle_loss(&mut tape, x, x, y, y, 10.0).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let bad = probs(&mut tape, &[0.0]);
        assert!(cycle_loss(&mut tape, x, bad, y, yr, 10.0).is_err());
    }

    #[test]
    fn report_row() {
        let r = LossReport {
            adv_g: 1.0,
            adv_d1: 0.5,
            adv_d2: 0.25,
            cycle: 2.0,
            ssim: 0.01,
            total: 3.01,
        };
        assert_eq!(r.csv_row(7), "7,1,0.5,0.25,2,0.01,3.01");
    }
}
