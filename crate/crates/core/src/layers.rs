//! Named layers over a [`ParamStore`]. Each layer only remembers the ids
//! of its entries; values live in the store.

use dgmnet_nn::{Graph, Init, NnError, ParamId, ParamStore, Role, Var};

fn he(fan_in: usize) -> Init {
    Init::Normal((2.0 / fan_in as f32).sqrt())
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            w: store.add(&format!("{name}.weight"), &[cout, cin, k, k], he(cin * k * k), Role::Weight),
            b: store.add(&format!("{name}.bias"), &[cout], Init::Zeros, Role::Weight),
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        g.conv2d(x, self.w, Some(self.b), self.pad)
    }
}

/// 2×2 stride-2 transposed convolution.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl UpConv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: store.add(&format!("{name}.weight"), &[cin, cout, 2, 2], he(cin), Role::Weight),
            b: store.add(&format!("{name}.bias"), &[cout], Init::Zeros, Role::Weight),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        g.conv_t2x2(x, self.w, Some(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), &[c], Init::Ones, Role::Weight),
            beta: store.add(&format!("{name}.beta"), &[c], Init::Zeros, Role::Weight),
            running_mean: store.add(&format!("{name}.running_mean"), &[c], Init::Zeros, Role::Buffer),
            running_var: store.add(&format!("{name}.running_var"), &[c], Init::Ones, Role::Buffer),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        g.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self::with_init(store, name, fan_in, fan_out, he(fan_in))
    }

    pub fn with_init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Self {
        Self {
            w: store.add(&format!("{name}.weight"), &[fan_out, fan_in], init, Role::Weight),
            b: store.add(&format!("{name}.bias"), &[fan_out], Init::Zeros, Role::Weight),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        g.linear(x, self.w, Some(self.b))
    }
}

/// Squeeze-and-excitation: global average pool, bottleneck MLP, sigmoid
/// gate, channel rescale.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub fc1: Dense,
    pub fc2: Dense,
}

impl SqueezeExcite {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, reduction: usize) -> Self {
        let mid = (c / reduction).max(1);
        Self {
            fc1: Dense::new(store, &format!("{name}.fc1"), c, mid),
            fc2: Dense::with_init(store, &format!("{name}.fc2"), mid, c, Init::Normal((1.0 / mid as f32).sqrt())),
        }
    }

    pub fn gate(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let s = g.global_avg_pool(x);
        let h = self.fc1.forward(g, s)?;
        let h = g.relu(h);
        let e = self.fc2.forward(g, h)?;
        Ok(g.sigmoid(e))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let gate = self.gate(g, x)?;
        g.scale_channels(x, gate)
    }
}
