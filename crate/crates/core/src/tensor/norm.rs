use super::Real;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

pub(crate) struct BnForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// `x` is `[n, c, hw]` flattened.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: BnMode,
) -> BnForward<T> {
    let eps = T::c(BN_EPSILON);
    let mom = T::c(BN_MOMENTUM);
    let m = n * hw;
    let mf = T::from_usize(m).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let plane = |b: usize| b * c * hw + ch * hw;
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut s = T::zero();
                for b in 0..n {
                    s = s + x[plane(b)..plane(b) + hw].iter().copied().sum();
                }
                let mean = s / mf;
                let mut ss = T::zero();
                for b in 0..n {
                    for &v in &x[plane(b)..plane(b) + hw] {
                        ss = ss + (v - mean) * (v - mean);
                    }
                }
                let var = ss / mf;
                let unbiased = if m > 1 {
                    ss / T::from_usize(m - 1).unwrap()
                } else {
                    var
                };
                running_mean[ch] = (T::one() - mom) * running_mean[ch] + mom * mean;
                running_var[ch] = (T::one() - mom) * running_var[ch] + mom * unbiased;
                (mean, var)
            }
            BnMode::Eval => (running_mean[ch], running_var[ch]),
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        for b in 0..n {
            let p = plane(b);
            for i in p..p + hw {
                let xh = (x[i] - mean) * is;
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnForward { out, xhat, inv_std }
}

/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    dout: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    hw: usize,
    mode: BnMode,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mf = T::from_usize(n * hw).unwrap();
    let mut dx = vec![T::zero(); dout.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let plane = |b: usize| b * c * hw + ch * hw;
        let mut sdy = T::zero();
        let mut sdyx = T::zero();
        for b in 0..n {
            let p = plane(b);
            for i in p..p + hw {
                sdy = sdy + dout[i];
                sdyx = sdyx + dout[i] * xhat[i];
            }
        }
        dbeta[ch] = sdy;
        dgamma[ch] = sdyx;
        let k = gamma[ch] * inv_std[ch];
        for b in 0..n {
            let p = plane(b);
            for i in p..p + hw {
                dx[i] = match mode {
                    BnMode::Train => k * (dout[i] - sdy / mf - xhat[i] * sdyx / mf),
                    BnMode::Eval => k * dout[i],
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
