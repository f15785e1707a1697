//! Structural re-parameterization: fold sequential and parallel convolution
//! branches into a single 3x3 convolution.
//!
//! All arithmetic runs in f64 and the result is cast back to the caller's
//! precision.

use crate::error::{Error, Result};
use crate::kernel_prior::GraftSpec;
use crate::ops::conv2d;
use crate::tensor::{ConvParams, Real, Tensor4};

/// Folds `f2(f1(x))`, with `f1` a 1x1 conv and `f2` a `K x K` conv, into one
/// `K x K` conv: `W'[o, i] = sum_m f2[o, m] * f1[m, i]` and
/// `b' = sum_m b1[m] * sum(f2[o, m]) + b2`.
///
/// Exact when `f1` sees the zero-padded input so its bias also fills the
/// border, as [`GraftSpec::forward`] does.
pub fn merge_sequential<T: Real>(f1: &ConvParams<T>, f2: &ConvParams<T>) -> Result<ConvParams<T>> {
    f1.validate()?;
    f2.validate()?;
    if f1.kernel_size() != 1 {
        return Err(Error::shape("first conv of a sequential merge must be 1x1"));
    }
    if f1.c_out() != f2.c_in() {
        return Err(Error::shape(format!(
            "sequential merge: f1 has {} outputs, f2 expects {} inputs",
            f1.c_out(),
            f2.c_in()
        )));
    }
    let (c_out, c_mid, c_in, k) = (f2.c_out(), f2.c_in(), f1.c_in(), f2.kernel_size());
    let w1 = f1.weight.data();
    let w2 = f2.weight.data();
    let kk = k * k;
    let mut w = vec![0.0f64; c_out * c_in * kk];
    let mut b = vec![0.0f64; c_out];
    for o in 0..c_out {
        for m in 0..c_mid {
            let taps = &w2[(o * c_mid + m) * kk..(o * c_mid + m + 1) * kk];
            let tap_sum: f64 = taps.iter().map(|v| v.as_f64()).sum();
            b[o] += f1.bias[m].as_f64() * tap_sum;
            for i in 0..c_in {
                let s = w1[m * c_in + i].as_f64();
                if s == 0.0 {
                    continue;
                }
                let dst = &mut w[(o * c_in + i) * kk..(o * c_in + i + 1) * kk];
                for (d, t) in dst.iter_mut().zip(taps) {
                    *d += t.as_f64() * s;
                }
            }
        }
        b[o] += f2.bias[o].as_f64();
    }
    ConvParams::new(
        Tensor4::new([c_out, c_in, k, k], w.into_iter().map(T::cast).collect())?,
        b.into_iter().map(T::cast).collect(),
        f1.trainable || f2.trainable,
    )
}

/// Sums parallel branches into one conv. 1x1 kernels are embedded at the
/// center of a 3x3 when any branch is 3x3.
pub fn merge_parallel<T: Real>(branches: &[ConvParams<T>]) -> Result<ConvParams<T>> {
    let first = branches
        .first()
        .ok_or_else(|| Error::invalid("no branches to merge"))?;
    let (c_out, c_in) = (first.c_out(), first.c_in());
    for b in branches {
        b.validate()?;
        if b.c_out() != c_out || b.c_in() != c_in {
            return Err(Error::shape(format!(
                "parallel merge: branch is {}x{}, expected {c_out}x{c_in}",
                b.c_out(),
                b.c_in()
            )));
        }
    }
    let k = branches.iter().map(|b| b.kernel_size()).max().unwrap_or(1);
    let mut w = vec![0.0f64; c_out * c_in * k * k];
    let mut bias = vec![0.0f64; c_out];
    for b in branches {
        let bk = b.kernel_size();
        let off = (k - bk) / 2;
        for o in 0..c_out {
            bias[o] += b.bias[o].as_f64();
            for i in 0..c_in {
                for y in 0..bk {
                    for x in 0..bk {
                        w[((o * c_in + i) * k + y + off) * k + x + off] +=
                            b.weight.get(o, i, y, x).as_f64();
                    }
                }
            }
        }
    }
    ConvParams::new(
        Tensor4::new([c_out, c_in, k, k], w.into_iter().map(T::cast).collect())?,
        bias.into_iter().map(T::cast).collect(),
        branches.iter().any(|b| b.trainable),
    )
}

/// Train-form bypass-graft block: a trainable 3x3 main branch, graft
/// branches and an optional identity shortcut, summed before the activation.
#[derive(Debug, Clone, PartialEq)]
pub struct BGBParams<T> {
    pub main: ConvParams<T>,
    pub grafts: Vec<GraftSpec<T>>,
    pub identity: bool,
}

impl<T: Real> BGBParams<T> {
    pub fn channels(&self) -> usize {
        self.main.c_out()
    }

    /// Total branch count including main and identity.
    pub fn branch_count(&self) -> usize {
        1 + self.grafts.len() + usize::from(self.identity)
    }

    pub fn validate(&self) -> Result<()> {
        self.main.validate()?;
        let (c_out, c_in) = (self.main.c_out(), self.main.c_in());
        if self.main.kernel_size() != 3 {
            return Err(Error::shape("main branch must be 3x3"));
        }
        if self.identity && c_in != c_out {
            return Err(Error::shape("identity branch needs C_in = C_out"));
        }
        for g in &self.grafts {
            g.validate()?;
            if g.c_in() != c_in || g.c_out() != c_out {
                return Err(Error::shape("graft channels differ from main branch"));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.main.param_count()
            + self
                .grafts
                .iter()
                .map(|g| g.mix_1x1.param_count() + g.fixed_3x3.param_count())
                .sum::<usize>()
    }

    /// Pre-activation output of the multi-branch block.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.validate()?;
        let mut out = conv2d(x, &self.main)?;
        for g in &self.grafts {
            add_into(&mut out, &g.forward(x)?);
        }
        if self.identity {
            add_into(&mut out, x);
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> BGBParams<U> {
        BGBParams {
            main: self.main.cast(),
            grafts: self.grafts.iter().map(|g| g.cast()).collect(),
            identity: self.identity,
        }
    }
}

fn add_into<T: Real>(acc: &mut Tensor4<T>, x: &Tensor4<T>) {
    for (a, b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += *b;
    }
}

/// Deploy-form single 3x3 conv equivalent to [`BGBParams::forward`].
pub fn collapse_bgb<T: Real>(bgb: &BGBParams<T>) -> Result<ConvParams<T>> {
    bgb.validate()?;
    let wide: BGBParams<f64> = bgb.cast();
    let mut branches = vec![wide.main.clone()];
    for g in &wide.grafts {
        branches.push(merge_sequential(&g.mix_1x1, &g.fixed_3x3)?);
    }
    if wide.identity {
        branches.push(ConvParams::dirac(wide.channels(), false));
    }
    let mut merged = merge_parallel(&branches)?;
    merged.trainable = bgb.main.trainable;
    Ok(merged.cast())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv2d_with, pad_zero, Padding};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_conv(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvParams<f64> {
        let w = Tensor4::from_fn([c_out, c_in, k, k], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let b = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ConvParams::new(w, b, true).unwrap()
    }

    fn random_input(c: usize, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        Tensor4::from_fn([2, c, 6, 7], |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_mixer_returns_second_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f2 = random_conv(3, 4, 3, &mut rng);
        let f1 = ConvParams::new(
            Tensor4::from_fn([4, 4, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 }),
            vec![0.0; 4],
            true,
        )
        .unwrap();
        assert_eq!(merge_sequential(&f1, &f2).unwrap().weight, f2.weight);
        assert_eq!(merge_sequential(&f1, &f2).unwrap().bias, f2.bias);
    }

    #[test]
    fn bias_through_all_ones_kernel() {
        let f1 = ConvParams::new(Tensor4::filled([1, 1, 1, 1], 1.0), vec![0.5], true).unwrap();
        let f2 = ConvParams::new(Tensor4::filled([1, 1, 3, 3], 1.0), vec![0.0], true).unwrap();
        assert_eq!(merge_sequential(&f1, &f2).unwrap().bias, vec![4.5]);
    }

    #[test]
    fn sequential_matches_two_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f1 = random_conv(6, 4, 1, &mut rng);
        let f2 = random_conv(5, 6, 3, &mut rng);
        let x = random_input(4, &mut rng);
        let two = conv2d_with(
            &conv2d_with(&pad_zero(&x, 1), &f1, Padding::Same).unwrap(),
            &f2,
            Padding::Valid,
        )
        .unwrap();
        let one = conv2d(&x, &merge_sequential(&f1, &f2).unwrap()).unwrap();
        assert!(one.max_abs_diff(&two).unwrap() <= 1e-10);
    }

    #[test]
    fn parallel_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_conv(3, 3, 3, &mut rng);
        assert_eq!(merge_parallel(&[a.clone()]).unwrap(), a);
        let doubled = merge_parallel(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(doubled.weight, a.weight.map(|v| 2.0 * v));
        let bs = [a, random_conv(3, 3, 1, &mut rng), random_conv(3, 3, 3, &mut rng)];
        let x = random_input(3, &mut rng);
        let merged = conv2d(&x, &merge_parallel(&bs).unwrap()).unwrap();
        let mut summed = conv2d(&x, &bs[0]).unwrap();
        for b in &bs[1..] {
            add_into(&mut summed, &conv2d(&x, b).unwrap());
        }
        assert!(merged.max_abs_diff(&summed).unwrap() <= 1e-10);
        assert!(merge_parallel::<f64>(&[]).is_err());
        let odd = random_conv(2, 3, 3, &mut rng);
        assert!(merge_parallel(&[bs[0].clone(), odd]).is_err());
    }

    #[test]
    fn collapse_trivial_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let main = random_conv(3, 3, 3, &mut rng);
        let only_main = BGBParams {
            main: main.clone(),
            grafts: vec![],
            identity: false,
        };
        assert_eq!(collapse_bgb(&only_main).unwrap(), main);
        let zero = ConvParams::zeros(3, 3, 3, true).unwrap();
        let only_id = BGBParams {
            main: zero,
            grafts: vec![],
            identity: true,
        };
        assert_eq!(collapse_bgb(&only_id).unwrap().weight, ConvParams::<f64>::dirac(3, true).weight);
    }

    #[test]
    fn merge_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_conv(3, 3, 3, &mut rng);
        let once = merge_parallel(&[a]).unwrap();
        assert_eq!(merge_parallel(&[once.clone()]).unwrap(), once);
    }
}
