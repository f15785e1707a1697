//! Define-by-run reverse-mode differentiation over [`Tensor4`] values.
//!
//! Each tape method evaluates its operator immediately and records a node.
//! [`Tape::backward`] walks the nodes from the loss back to the leaves once,
//! in reverse recording order, which is a reverse topological order because
//! a node can only reference nodes recorded before it.

use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::tensor::{ConvParams, FlowField, Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Leaf {
    Input,
    Constant,
    Param { trainable: bool },
}

#[derive(Debug)]
enum Op<T> {
    Leaf(Leaf),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        padding: Padding,
    },
    Pad {
        x: Var,
        pad: usize,
    },
    Warp {
        x: Var,
        flow: FlowField<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Upsample {
        x: Var,
        r: usize,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Sum {
        x: Var,
    },
    Charbonnier {
        sr: Var,
        gt: Var,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A conv layer's weight and bias registered on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to inputs and trainable parameters.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, dims: [usize; 4]) -> Tensor4<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor4::zeros(dims))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Whether `v` is a parameter leaf that receives updates.
    pub fn is_trainable(&self, v: Var) -> bool {
        matches!(
            self.nodes[v.0].op,
            Op::Leaf(Leaf::Param { trainable: true })
        )
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    /// A differentiable input; its gradient is reported by `backward`.
    pub fn input(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Leaf(Leaf::Input), true)
    }

    /// A value treated as constant; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Leaf(Leaf::Constant), false)
    }

    /// A parameter leaf. Non-trainable parameters receive no gradient.
    pub fn param(&mut self, t: Tensor4<T>, trainable: bool) -> Var {
        self.push(t, Op::Leaf(Leaf::Param { trainable }), trainable)
    }

    pub fn conv_params(&mut self, p: &ConvParams<T>) -> ConvVars {
        ConvVars {
            weight: self.param(p.weight.clone(), p.trainable),
            bias: self.param(p.bias_tensor(), p.trainable),
        }
    }

    pub fn conv2d(&mut self, x: Var, p: ConvVars) -> Result<Var> {
        self.conv2d_padded(x, p, Padding::Same)
    }

    pub fn conv2d_padded(&mut self, x: Var, p: ConvVars, padding: Padding) -> Result<Var> {
        let out = ops::conv2d_raw(
            self.value(x),
            self.value(p.weight),
            self.value(p.bias).data(),
            padding,
        )?;
        let ng = self.needs(x) || self.needs(p.weight) || self.needs(p.bias);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w: p.weight,
                b: p.bias,
                padding,
            },
            ng,
        ))
    }

    pub fn pad_zero(&mut self, x: Var, pad: usize) -> Var {
        let out = ops::pad_zero(self.value(x), pad);
        let ng = self.needs(x);
        self.push(out, Op::Pad { x, pad }, ng)
    }

    pub fn warp(&mut self, x: Var, flow: &FlowField<T>) -> Result<Var> {
        let out = ops::bilinear_warp(self.value(x), flow)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::Warp {
                x,
                flow: flow.clone(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, ng))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = ops::pixel_shuffle(self.value(x), r)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::PixelShuffle { x, r }, ng))
    }

    pub fn upsample(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = ops::bilinear_upsample(self.value(x), r)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Upsample { x, r }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Relu { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                va.dims(),
                vb.dims()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor4::from_raw(va.dims(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let kk = T::cast(k);
        let out = self.value(x).map(|v| v * kk);
        let ng = self.needs(x);
        self.push(out, Op::Scale { x, k }, ng)
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        let ng = self.needs(x);
        self.push(Tensor4::scalar(T::cast(s)), Op::Sum { x }, ng)
    }

    /// Batch-averaged Charbonnier term of one frame, see
    /// [`ops::charbonnier_frame`].
    pub fn charbonnier(&mut self, sr: Var, gt: Var, eps: f64) -> Result<Var> {
        let v = ops::charbonnier_frame(self.value(sr), self.value(gt), eps)?;
        let ng = self.needs(sr) || self.needs(gt);
        Ok(self.push(Tensor4::scalar(T::cast(v)), Op::Charbonnier { sr, gt, eps }, ng))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).dims() != [1, 1, 1, 1] {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            match &node.op {
                Op::Leaf(_) => unreachable!(),
                Op::Conv { x, w, b, padding } => {
                    let (gx, gw, gb) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *padding,
                        self.needs(*x),
                        self.needs(*w) || self.needs(*b),
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut grads[x.0], gx);
                    }
                    if self.needs(*w) {
                        if let Some(gw) = gw {
                            accumulate(&mut grads[w.0], gw);
                        }
                    }
                    if self.needs(*b) {
                        if let Some(gb) = gb {
                            accumulate(&mut grads[b.0], gb);
                        }
                    }
                }
                Op::Pad { x, pad } => accumulate(&mut grads[x.0], ops::crop(&g, *pad)),
                Op::Warp { x, flow } => {
                    accumulate(&mut grads[x.0], ops::bilinear_warp_backward(&g, flow))
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).c();
                    let cb = self.value(*b).c();
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], ops::slice_channels(&g, 0, ca)?);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], ops::slice_channels(&g, ca, cb)?);
                    }
                }
                Op::PixelShuffle { x, r } => {
                    accumulate(&mut grads[x.0], ops::pixel_unshuffle(&g, *r)?)
                }
                Op::Upsample { x, r } => accumulate(
                    &mut grads[x.0],
                    ops::bilinear_upsample_backward(&g, self.value(*x).dims(), *r),
                ),
                Op::Relu { x } => {
                    accumulate(&mut grads[x.0], ops::relu_backward(self.value(*x), &g))
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Scale { x, k } => {
                    let kk = T::cast(*k);
                    accumulate(&mut grads[x.0], g.map(|v| v * kk));
                }
                Op::Sum { x } => {
                    let dims = self.value(*x).dims();
                    accumulate(&mut grads[x.0], Tensor4::filled(dims, g.data()[0]));
                }
                Op::Charbonnier { sr, gt, eps } => {
                    let up = g.data()[0].as_f64();
                    let gs = ops::charbonnier_frame_backward(
                        self.value(*sr),
                        self.value(*gt),
                        *eps,
                        up,
                    );
                    if self.needs(*gt) {
                        accumulate(&mut grads[gt.0], gs.map(|v| -v));
                    }
                    if self.needs(*sr) {
                        accumulate(&mut grads[sr.0], gs);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn dirac_conv_sum_gradient_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.input(rand_tensor([1, 2, 4, 5], &mut rng));
        let p = tape.conv_params(&ConvParams::dirac(2, true));
        let y = tape.conv2d(x, p).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor4::zeros([1, 1, 2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn concat_sum_gradient_splits_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let a = tape.input(rand_tensor([1, 2, 3, 3], &mut rng));
        let b = tape.input(rand_tensor([1, 1, 3, 3], &mut rng));
        let c = tape.concat(a, b).unwrap();
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.get(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.input(rand_tensor([1, 2, 4, 4], &mut rng));
        let frozen = ConvParams::new(rand_tensor([2, 2, 3, 3], &mut rng), vec![0.0; 2], false)
            .unwrap();
        let p = tape.conv_params(&frozen);
        let y = tape.conv2d(x, p).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(p.weight).is_none());
        assert!(g.get(p.bias).is_none());
        assert!(g.get(x).is_some());
    }
}
