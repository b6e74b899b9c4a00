//! Small fully-connected networks evaluated in row batches with a manual
//! backward pass. Weights live in the [`ParamStore`].

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::params::{ParamClass, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    /// `ln(1 + exp(beta x)) / beta`
    Softplus(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => z.clone(),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Softplus(beta) => z.mapv(|v| {
                let t = beta * v;
                if t > 30.0 {
                    v
                } else {
                    t.exp().ln_1p() / beta
                }
            }),
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Sigmoid => z.mapv(crate::geometry::sigmoid),
        }
    }

    fn derivative(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => Array2::ones(z.raw_dim()),
            Activation::Relu => z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Softplus(beta) => z.mapv(|v| crate::geometry::sigmoid(beta * v)),
            Activation::Tanh => z.mapv(|v| 1.0 - v.tanh().powi(2)),
            Activation::Sigmoid => z.mapv(|v| {
                let s = crate::geometry::sigmoid(v);
                s * (1.0 - s)
            }),
        }
    }
}

/// How the last layer is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputInit {
    /// Same uniform fan-in init as hidden layers, multiplied by the factor.
    Scaled(f64),
    Zero,
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Per-layer inputs and pre-activations retained for backward.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    out: Array2<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.out
    }
}

impl Mlp {
    /// Registers `sizes.len() - 1` dense layers named `{prefix}.{l}.weight/bias`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        class: ParamClass,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        output_init: OutputInit,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2);
        let n_layers = sizes.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (n_in, n_out) = (sizes[l], sizes[l + 1]);
                let bound = (6.0 / n_in as f64).sqrt();
                let factor = match (l + 1 == n_layers, output_init) {
                    (false, _) => 1.0,
                    (true, OutputInit::Scaled(k)) => k,
                    (true, OutputInit::Zero) => 0.0,
                };
                let w: Vec<f64> = (0..n_in * n_out)
                    .map(|_| {
                        let u: f64 = rng.random_range(-bound..bound);
                        u * factor
                    })
                    .collect();
                Dense {
                    weight: store.register(format!("{prefix}.{l}.weight"), class, w, 0),
                    bias: store.register(format!("{prefix}.{l}.bias"), class, vec![0.0; n_out], 0),
                    n_in,
                    n_out,
                }
            })
            .collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    /// Looks up an existing network's layers by prefix (used after checkpoint load).
    pub fn attach(
        store: &ParamStore,
        prefix: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
    ) -> Option<Self> {
        let layers = (0..sizes.len() - 1)
            .map(|l| {
                Some(Dense {
                    weight: store.find(&format!("{prefix}.{l}.weight"))?,
                    bias: store.find(&format!("{prefix}.{l}.bias"))?,
                    n_in: sizes[l],
                    n_out: sizes[l + 1],
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self {
            layers,
            hidden,
            output,
        })
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> MlpCache {
        assert_eq!(x.ncols(), self.n_in());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = ArrayView2::from_shape((layer.n_out, layer.n_in), store.value(layer.weight))
                .expect("weight shape");
            let b = ndarray::ArrayView1::from(store.value(layer.bias));
            let z = h.dot(&w.t()) + b;
            let act = if l + 1 == self.layers.len() {
                self.output
            } else {
                self.hidden
            };
            let a = act.apply(&z);
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        MlpCache {
            inputs,
            pre,
            out: h,
        }
    }

    /// Accumulates parameter gradients into `store` and returns `dL/dx`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MlpCache,
        grad_out: ArrayView2<f64>,
    ) -> Array2<f64> {
        let mut g = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let act = if l + 1 == self.layers.len() {
                self.output
            } else {
                self.hidden
            };
            let dz = g * act.derivative(&cache.pre[l]);
            let dw = dz.t().dot(&cache.inputs[l]);
            let db = dz.sum_axis(Axis(0));
            store.accumulate(layer.weight, dw.as_slice().expect("contiguous"));
            store.accumulate(layer.bias, db.as_slice().expect("contiguous"));
            let w = ArrayView2::from_shape((layer.n_out, layer.n_in), store.value(layer.weight))
                .expect("weight shape");
            g = dz.dot(&w);
        }
        g
    }
}
