//! Trunk of invertible layers followed by the loss head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    ActivationKind, ActivationLayer, CouplingLayer, DownsampleLayer, Half, Head, InitSpec, Layer, Subnet, SubnetSpec,
};
use crate::ledger::{AllocTag, Ledger};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    /// Input `[height, width, channels]` after channel padding.
    pub input: [usize; 3],
    /// Coupling layers per block.
    pub blocks: Vec<usize>,
    pub subnet: SubnetSpec,
    /// Inserted after every coupling layer when set.
    pub activation: Option<ActivationKind>,
    /// Downsample at the end of every block.
    pub downsample: bool,
    /// Swap conditioning and transformed halves on every other coupling in a block.
    pub alternate_halves: bool,
    pub classes: usize,
    pub init: InitSpec,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            input: [8, 8, 4],
            blocks: vec![2, 2, 2],
            subnet: SubnetSpec::default(),
            activation: None,
            downsample: true,
            alternate_halves: false,
            classes: 2,
            init: InitSpec::default(),
        }
    }
}

impl NetworkSpec {
    /// Checks every shape precondition without allocating anything.
    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.input;
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if h == 0 || w == 0 || c == 0 {
            return bad(format!("input extents must be positive, got {:?}", self.input));
        }
        if c % 2 != 0 {
            return bad(format!("coupling layers need an even channel count, got {c}"));
        }
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        if self.blocks.contains(&0) {
            return bad("every block needs at least one coupling layer".into());
        }
        if self.subnet.depth == 0 || self.subnet.hidden_width == 0 {
            return bad("subnet depth and hidden width must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if let Some(a) = self.activation {
            a.validate()?;
        }
        if self.downsample {
            let (mut hh, mut ww) = (h, w);
            for b in 0..self.blocks.len() {
                if hh % 2 != 0 || ww % 2 != 0 {
                    return bad(format!("spatial size {hh}x{ww} before downsampling in block {b} is not even"));
                }
                hh /= 2;
                ww /= 2;
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn n_couplings(&self) -> usize {
        self.blocks.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
    head: Head<T>,
    /// Input shape of every trunk layer, followed by the trunk output shape.
    shapes: Vec<(usize, usize, usize)>,
}

pub type Shape3 = (usize, usize, usize);

impl<T: Real> Network<T> {
    pub fn random(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h, w, c] = spec.input;
        let mut shape = (h, w, c);
        let mut layers = Vec::new();
        for &lpb in &spec.blocks {
            for l in 0..lpb {
                let half = if spec.alternate_halves && l % 2 == 1 { Half::High } else { Half::Low };
                let subnet = Subnet::random(shape.2 / 2, spec.subnet, &spec.init, &mut rng);
                layers.push(Layer::Coupling(CouplingLayer::new(shape.2, half, subnet)?));
                if let Some(kind) = spec.activation {
                    layers.push(Layer::Activation(ActivationLayer::new(kind)?));
                }
            }
            if spec.downsample {
                let d = DownsampleLayer;
                shape = d.out_shape(shape)?;
                layers.push(Layer::Downsample(d));
            }
        }
        let head = Head::random(shape.2, spec.classes, spec.init.head_std, &mut rng);
        Self::assemble(spec.clone(), layers, head)
    }

    /// Builds a network from explicit layers; shapes are checked.
    pub fn from_layers(spec: NetworkSpec, layers: Vec<Layer<T>>, head: Head<T>) -> Result<Self> {
        Self::assemble(spec, layers, head)
    }

    fn assemble(spec: NetworkSpec, layers: Vec<Layer<T>>, head: Head<T>) -> Result<Self> {
        let [h, w, c] = spec.input;
        let mut shapes = vec![(h, w, c)];
        for l in &layers {
            let next = l.out_shape(*shapes.last().unwrap())?;
            shapes.push(next);
        }
        let out = *shapes.last().unwrap();
        if out.2 != head.features() {
            return Err(Error::InvalidSpec(format!("head expects {} features, trunk gives {}", head.features(), out.2)));
        }
        Ok(Network { spec, layers, head, shapes })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn head(&self) -> &Head<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head<T> {
        &mut self.head
    }

    pub fn shapes(&self) -> &[Shape3] {
        &self.shapes
    }

    pub fn input_shape(&self) -> Shape3 {
        self.shapes[0]
    }

    pub fn input_len(&self) -> usize {
        let (h, w, c) = self.shapes[0];
        h * w * c
    }

    pub fn n_couplings(&self) -> usize {
        self.layers.iter().filter(|l| l.is_coupling()).count()
    }

    /// Parameter count of every trunk layer, in order.
    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::n_params).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum::<usize>() + self.head.n_params()
    }

    /// Largest per-layer parameter count.
    pub fn max_layer_dim(&self) -> usize {
        self.layers.iter().map(Layer::n_params).max().unwrap_or(0)
    }

    /// Sum of per-layer forward costs from layer `from` to the end of the trunk.
    pub fn flops_from(&self, from: usize) -> usize {
        self.layers[from..].iter().zip(&self.shapes[from..]).map(|(l, &s)| l.flops(s)).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
            head: self.head.cast(),
            shapes: self.shapes.clone(),
        }
    }

    /// All parameters, trunk layers first then the head.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.params().iter().map(|v| v.as_f64()));
        }
        out.extend(self.head.params().iter().map(|v| v.as_f64()));
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::LengthMismatch { op: "set_params_flat", expected: self.n_params(), actual: flat.len() });
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for p in l.params_mut() {
                *p = T::of(*it.next().unwrap());
            }
        }
        for p in self.head.params_mut() {
            *p = T::of(*it.next().unwrap());
        }
        Ok(())
    }

    /// Makes the inverse-Jacobian product of coupling layer `index` use the wrong sign.
    /// Only meant for exercising failure paths.
    pub fn inject_fault(&mut self, index: usize) -> Result<()> {
        match self.layers.get_mut(index) {
            Some(Layer::Coupling(c)) => {
                c.flip_vijp = true;
                Ok(())
            }
            _ => Err(Error::InvalidConfig(format!("layer {index} is not a coupling layer"))),
        }
    }

    /// Loads a sample into `ledger` as an activation tensor.
    pub fn input_tensor(&self, ledger: &Ledger, x0: &[T]) -> Result<Tensor<T>> {
        let (h, w, c) = self.shapes[0];
        Tensor::from_vec(ledger, &[h, w, c], x0.to_vec(), AllocTag::Activation)
    }

    /// Trunk output for `x`, freeing intermediates as it goes.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.copy(AllocTag::Activation)?;
        for (i, l) in self.layers.iter().enumerate() {
            let next = l.forward(&cur).map_err(|e| e.at_layer(i))?;
            cur.free()?;
            cur = next;
        }
        Ok(cur)
    }

    /// Loss on one sample, in a scratch ledger.
    pub fn loss(&self, x0: &[T], label: usize) -> Result<T> {
        let ledger = Ledger::new();
        let x = self.input_tensor(&ledger, x0)?;
        let y = self.forward(&x)?;
        let j = self.head.loss(&y, label)?;
        Ok(j)
    }

    pub fn predict(&self, x0: &[T]) -> Result<usize> {
        let ledger = Ledger::new();
        let x = self.input_tensor(&ledger, x0)?;
        let y = self.forward(&x)?;
        self.head.predict(&y)
    }
}
