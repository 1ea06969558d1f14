//! Sequential networks assembled from layer recipes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::layers::{backward_chain, infer_chain, Cache, Layer, LayerSpec, Mode};
use crate::tensor::Tensor;

/// Forward-pass record needed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    caches: Vec<Cache>,
}

/// Parameter gradients, in the same order as [`Network::params`].
#[derive(Clone, Debug)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f32) {
        for t in &mut self.0 {
            t.scale(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(Tensor::all_finite)
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    recipe: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Network {
    /// Build a network for per-item inputs of `input_shape`, initialising
    /// weights deterministically from `seed`.
    pub fn new(recipe: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Result<Self> {
        if recipe.is_empty() {
            return Err(NnError::Recipe("empty layer recipe".into()));
        }
        let output_shape = infer_chain(&recipe, input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = recipe.iter().map(|s| Layer::build(s, &mut rng)).collect();
        Ok(Self {
            recipe,
            input_shape: input_shape.to_vec(),
            output_shape,
            layers,
        })
    }

    pub fn recipe(&self) -> &[LayerSpec] {
        &self.recipe
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() == 0 || x.shape()[1..] != self.input_shape[..] {
            return Err(NnError::Shape(format!(
                "network expects items of shape {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut a = x.clone();
        for l in &self.layers {
            a = l.forward(a, Mode::Eval)?.0;
        }
        Ok(a)
    }

    /// Forward pass that records what the backward pass needs.
    pub fn forward_tape(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for l in &self.layers {
            let (y, c) = l.forward(a, mode)?;
            caches.push(c);
            a = y;
        }
        Ok((a, Tape { caches }))
    }

    /// Backward pass from `grad` (gradient w.r.t. the network output).
    ///
    /// Parameter gradients accumulate into `grads` when given. Returns the
    /// input gradient when `need_input` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        grad: Tensor,
        grads: Option<&mut Grads>,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        if tape.caches.len() != self.layers.len() {
            return Err(NnError::Shape("tape does not belong to this network".into()));
        }
        backward_chain(
            &self.layers,
            &tape.caches,
            grad,
            grads.map(|g| g.0.as_mut_slice()),
            need_input,
        )
    }

    /// Fold batch statistics from a training-mode tape into the running
    /// normalisation estimates.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        for (l, c) in self.layers.iter_mut().zip(&tape.caches) {
            l.update_running_stats(c);
        }
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(
            self.params()
                .into_iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        )
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.collect_params(&mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.collect_params_mut(&mut out);
        }
        out
    }

    /// Non-trainable state (normalisation running statistics).
    pub fn buffers(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.collect_buffers(&mut out);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.collect_buffers_mut(&mut out);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Bitwise equality of all weights and buffers.
    pub fn same_weights(&self, other: &Network) -> bool {
        self.recipe == other.recipe
            && self.params() == other.params()
            && self.buffers() == other.buffers()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{mse, soft_cross_entropy};

    fn probe(net: &Network, x: &Tensor, target: &Tensor) -> f64 {
        let y = net.forward(x).unwrap();
        mse(&y, target).unwrap().0
    }

    /// Central finite differences against the analytic input gradient.
    fn check_input_grad(recipe: Vec<LayerSpec>, in_shape: &[usize], batch: usize) {
        let net = Network::new(recipe, in_shape, 3).unwrap();
        let mut shape = vec![batch];
        shape.extend_from_slice(in_shape);
        let x = Tensor::from_fn(&shape, |i| ((i * 37 % 101) as f32 / 101.0) - 0.3);
        let mut oshape = vec![batch];
        oshape.extend_from_slice(net.output_shape());
        let target = Tensor::from_fn(&oshape, |i| ((i * 13 % 17) as f32) / 17.0);
        let (y, tape) = net.forward_tape(&x, Mode::Eval).unwrap();
        let (_, g) = mse(&y, &target).unwrap();
        let dx = net.backward(&tape, g, None, true).unwrap().unwrap();
        let h = 1e-2f32;
        for idx in (0..x.len()).step_by((x.len() / 17).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (probe(&net, &xp, &target) - probe(&net, &xm, &target)) / (2.0 * h as f64);
            let ana = dx.data()[idx] as f64;
            assert!(
                (num - ana).abs() <= 2e-3 + 2e-2 * num.abs().max(ana.abs()),
                "idx {idx}: numeric {num} vs analytic {ana}"
            );
        }
    }

    #[test]
    fn conv_stack_input_gradient() {
        check_input_grad(
            vec![
                LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::Tanh,
                LayerSpec::Conv2d { in_ch: 3, out_ch: 2, kernel: 2, stride: 1, padding: 0 },
                LayerSpec::Flatten,
                LayerSpec::Linear { inputs: 2 * 2 * 2, outputs: 3 },
            ],
            &[2, 5, 5],
            2,
        );
    }

    #[test]
    fn conv_transpose_stack_input_gradient() {
        check_input_grad(
            vec![
                LayerSpec::Reshape { shape: vec![4, 1, 1] },
                LayerSpec::ConvTranspose2d { in_ch: 4, out_ch: 3, kernel: 3, stride: 1, padding: 0 },
                LayerSpec::Tanh,
                LayerSpec::ConvTranspose2d { in_ch: 3, out_ch: 2, kernel: 4, stride: 2, padding: 1 },
                LayerSpec::Sigmoid,
            ],
            &[4],
            3,
        );
    }

    #[test]
    fn residual_pool_norm_input_gradient() {
        check_input_grad(
            vec![
                LayerSpec::Conv2d { in_ch: 1, out_ch: 3, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::BatchNorm2d { channels: 3 },
                LayerSpec::LeakyRelu { slope: 0.1 },
                LayerSpec::Residual {
                    body: vec![
                        LayerSpec::Conv2d { in_ch: 3, out_ch: 4, kernel: 3, stride: 2, padding: 1 },
                        LayerSpec::Tanh,
                    ],
                    shortcut: vec![LayerSpec::Conv2d { in_ch: 3, out_ch: 4, kernel: 1, stride: 2, padding: 0 }],
                },
                LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear { inputs: 4, outputs: 2 },
            ],
            &[1, 6, 6],
            2,
        );
    }

    /// Parameter gradients in training mode (batch statistics) against
    /// finite differences of the same training-mode loss.
    #[test]
    fn parameter_gradients_train_mode() {
        let recipe = vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::BatchNorm2d { channels: 2 },
            LayerSpec::Tanh,
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 2 * 4 * 4, outputs: 3 },
        ];
        let net = Network::new(recipe, &[1, 4, 4], 11).unwrap();
        let x = Tensor::from_fn(&[3, 1, 4, 4], |i| ((i * 29 % 23) as f32) / 23.0);
        let t = Tensor::new(vec![3, 3], vec![0.2, 0.5, 0.3, 1.0, 0.0, 0.0, 0.1, 0.1, 0.8]).unwrap();
        let loss_of = |n: &Network| {
            let (y, _) = n.forward_tape(&x, Mode::Train).unwrap();
            soft_cross_entropy(&y, &t, 1e-12).unwrap().0
        };
        let (y, tape) = net.forward_tape(&x, Mode::Train).unwrap();
        let (_, g) = soft_cross_entropy(&y, &t, 1e-12).unwrap();
        let mut grads = net.zero_grads();
        net.backward(&tape, g, Some(&mut grads), false).unwrap();
        let h = 1e-2f32;
        for (pi, gt) in grads.0.iter().enumerate() {
            for idx in (0..gt.len()).step_by((gt.len() / 5).max(1)) {
                let mut np = net.clone();
                np.params_mut()[pi].data_mut()[idx] += h;
                let mut nm = net.clone();
                nm.params_mut()[pi].data_mut()[idx] -= h;
                let num = (loss_of(&np) - loss_of(&nm)) / (2.0 * h as f64);
                let ana = gt.data()[idx] as f64;
                assert!(
                    (num - ana).abs() <= 2e-3 + 3e-2 * num.abs().max(ana.abs()),
                    "param {pi}[{idx}]: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn log_confidence_values_and_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.7, 0.2, 0.1, 0.5, 0.25, 0.25]).unwrap();
        let shifted = Network::new(vec![LayerSpec::LogConfidence { floor: -1000.0, offset: 50.0 }], &[3], 0).unwrap();
        let y = shifted.forward(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (b.ln() + 50.0)).abs() < 1e-4);
        }
        let net = Network::new(vec![LayerSpec::LogConfidence { floor: -1000.0, offset: 0.0 }], &[3], 0).unwrap();
        let y = net.forward(&x).unwrap();
        assert!((y.data()[0] - (0.7f32 / 0.1).ln()).abs() < 1e-5);
        assert_eq!(y.data()[2], 0.0);
        let t = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.3);
        let (y, tape) = net.forward_tape(&x, Mode::Eval).unwrap();
        let (_, g) = mse(&y, &t).unwrap();
        let dx = net.backward(&tape, g, None, true).unwrap().unwrap();
        let h = 1e-3f32;
        for idx in [0, 1, 3] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (probe(&net, &xp, &t) - probe(&net, &xm, &t)) / (2.0 * h as f64);
            let ana = dx.data()[idx] as f64;
            assert!((num - ana).abs() <= 1e-2 * num.abs().max(1.0), "idx {idx}: {num} vs {ana}");
        }
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let recipe = vec![
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 4, outputs: 2 },
        ];
        let a = Network::new(recipe.clone(), &[1, 2, 2], 5).unwrap();
        let b = Network::new(recipe.clone(), &[1, 2, 2], 5).unwrap();
        let c = Network::new(recipe, &[1, 2, 2], 6).unwrap();
        assert!(a.same_weights(&b));
        assert!(!a.same_weights(&c));
    }

    #[test]
    fn rejects_inconsistent_recipe() {
        let recipe = vec![LayerSpec::Conv2d { in_ch: 3, out_ch: 2, kernel: 3, stride: 1, padding: 0 }];
        assert!(Network::new(recipe, &[1, 8, 8], 0).is_err());
    }
}
