//! Two-layer convolutional denoiser, small enough for exhaustive gradient
//! checks of the training loss.

use super::layers::*;
use super::{Act, EpsNet, ParamStore, Real};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct ToyNet {
    conv1: Conv,
    temb: Linear,
    conv2: Conv,
    hidden: usize,
    temb_dim: usize,
}

pub struct ToyTape<T> {
    x: Act<T>,
    t0: Mat<T>,
    pre: Act<T>,
    act: Act<T>,
}

impl ToyNet {
    pub fn new<T: Real>(hidden: usize, rng: &mut Rng) -> (Self, ParamStore<T>) {
        let mut ps = ParamStore::new();
        let temb_dim = 8;
        let net = ToyNet {
            conv1: Conv::new(&mut ps, "conv1", 1, hidden, 3, rng, false),
            temb: Linear::new(&mut ps, "temb", temb_dim, hidden, rng, false),
            conv2: Conv::new(&mut ps, "conv2", hidden, 1, 3, rng, false),
            hidden,
            temb_dim,
        };
        (net, ps)
    }
}

impl<T: Real> EpsNet<T> for ToyNet {
    type Tape = ToyTape<T>;

    fn forward(&self, p: &[T], x: &Act<T>, ts: &[f64]) -> (Act<T>, ToyTape<T>) {
        let t0 = timestep_embedding::<T>(ts, self.temb_dim);
        let bias = self.temb.forward(p, &t0);
        let mut pre = self.conv1.forward(p, x);
        let (hw, n) = (pre.hw(), pre.plane());
        for c in 0..self.hidden {
            for b in 0..x.b {
                let v = bias.data[b * self.hidden + c];
                for i in c * n + b * hw..c * n + (b + 1) * hw {
                    pre.data[i] += v;
                }
            }
        }
        let act = silu_act(&pre);
        let y = self.conv2.forward(p, &act);
        (
            y,
            ToyTape {
                x: x.clone(),
                t0,
                pre,
                act,
            },
        )
    }

    fn backward(&self, p: &[T], g: &mut [T], tape: ToyTape<T>, dy: &Act<T>) {
        let dact = self.conv2.backward(p, g, &tape.act, dy);
        let dpre = silu_act_backward(&tape.pre, &dact);
        let (hw, n) = (dpre.hw(), dpre.plane());
        let mut dbias = Mat::zeros(tape.x.b, self.hidden);
        for c in 0..self.hidden {
            for b in 0..tape.x.b {
                let mut s = T::ZERO;
                for v in &dpre.data[c * n + b * hw..c * n + (b + 1) * hw] {
                    s += *v;
                }
                dbias.data[b * self.hidden + c] = s;
            }
        }
        self.temb.backward(p, g, &tape.t0, &dbias);
        self.conv1.backward(p, g, &tape.x, &dpre);
    }
}
