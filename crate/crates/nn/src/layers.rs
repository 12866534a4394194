//! Reusable layers: thin structs of [`ParamId`]s plus a forward method.

use rand_chacha::ChaCha8Rng;

use crate::init;
use crate::params::{ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tape::Var;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init::xavier_uniform(rng, &[in_dim, out_dim], in_dim, out_dim),
        );
        let b = ps.add(format!("{name}.b"), init::zeros(&[out_dim]));
        Linear { w, b }
    }

    /// All-zero weights and bias; the adaLN-zero modulation head needs this.
    pub fn zeroed<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), init::zeros(&[in_dim, out_dim]));
        let b = ps.add(format!("{name}.b"), init::zeros(&[out_dim]));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Var {
        s.tape.linear(x, s.param(self.w), s.param(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = ps.add(
            format!("{name}.w"),
            init::kaiming_uniform(rng, &[out_ch, in_ch, k, k], fan_in),
        );
        let b = ps.add(format!("{name}.b"), init::zeros(&[out_ch]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Var {
        s.tape
            .conv2d(x, s.param(self.w), s.param(self.b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), init::ones(&[dim]));
        let beta = ps.add(format!("{name}.beta"), init::zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Var {
        s.tape.layer_norm(
            x,
            s.param(self.gamma),
            s.param(self.beta),
            T::from_f64(1e-5),
        )
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        assert_eq!(channels % groups, 0, "groups must divide channels");
        let gamma = ps.add(format!("{name}.gamma"), init::ones(&[channels]));
        let beta = ps.add(format!("{name}.beta"), init::zeros(&[channels]));
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Var {
        s.tape.group_norm(
            x,
            s.param(self.gamma),
            s.param(self.beta),
            self.groups,
            T::from_f64(1e-5),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let table = ps.add(
            format!("{name}.table"),
            init::normal(rng, &[vocab, dim], 0.02),
        );
        Embedding { table }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, ids: &[usize]) -> Var {
        s.tape.embedding(s.param(self.table), ids)
    }

    /// The raw table as a tape variable (for learned positional/query embeddings).
    pub fn weight<T: Scalar>(&self, s: &Session<'_, T>) -> Var {
        s.param(self.table)
    }
}

/// Two-layer MLP with ReLU, the transformer feed-forward block.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(s, x);
        let h = s.tape.relu(h);
        self.fc2.forward(s, h)
    }
}

/// N-layer MLP with ReLU between layers (DETR-style prediction head).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h);
            if i + 1 < self.layers.len() {
                h = s.tape.relu(h);
            }
        }
        h
    }
}
