use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, ParamId, ParamStore, Var};
use super::tensor::{Tensor, KVOL};

fn uniform_init<R: Rng + ?Sized>(n: usize, fan_in: usize, gain: f32, rng: &mut R) -> Vec<f32> {
    let bound = gain * (3.0 / fan_in as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::new(vec![out, inp], uniform_init(out * inp, inp, 1.0, rng)));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out]));
        Linear { w, b, inp, out }
    }

    /// Zero-initialized weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(vec![out, inp]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out]));
        Linear { w, b, inp, out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

/// 3×3×3 convolution with padding 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * KVOL;
        let w = store.add(
            format!("{name}.w"),
            Tensor::new(vec![cout, fan_in], uniform_init(cout * fan_in, fan_in, 1.0, rng)),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        Conv3d { w, b, cin, cout, stride }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv3d(x, w, b, self.stride)
    }
}

pub const LEAK: f32 = 0.2;

/// conv → leaky ReLU.
pub fn conv_act(g: &mut Graph, conv: &Conv3d, x: Var) -> Var {
    let h = conv.forward(g, x);
    g.leaky_relu(h, LEAK)
}

/// upsample ×2 → conv → leaky ReLU.
pub fn up_conv_act(g: &mut Graph, conv: &Conv3d, x: Var) -> Var {
    let u = g.upsample2(x);
    conv_act(g, conv, u)
}
