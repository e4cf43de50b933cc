//! Named parameter storage and per-tape binding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which set a parameter lives in, and its index there.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PRef {
    Train(usize),
    Frozen(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and the exact value bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Parameters placed on one tape.
pub struct Bound {
    train: Vec<Var>,
    frozen: Vec<Var>,
}

impl Bound {
    /// Trainable tensors become gradient leaves only when `trainable` is set;
    /// frozen tensors are always constants.
    pub fn new<T: Scalar>(tape: &mut Tape<T>, train: &ParamSet<T>, frozen: &ParamSet<T>, trainable: bool) -> Self {
        let train = train
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let frozen = frozen.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        Bound { train, frozen }
    }

    pub fn get(&self, r: PRef) -> Var {
        match r {
            PRef::Train(i) => self.train[i],
            PRef::Frozen(i) => self.frozen[i],
        }
    }

    pub fn train_vars(&self) -> &[Var] {
        &self.train
    }
}

/// Registers freshly initialized tensors into the trainable or frozen set.
pub(crate) struct Init<'a, T> {
    pub rng: ChaCha8Rng,
    pub train: &'a mut ParamSet<T>,
    pub frozen: &'a mut ParamSet<T>,
    pub prefix: String,
    pub freeze: bool,
}

impl<T: Scalar> Init<'_, T> {
    fn register(&mut self, name: &str, t: Tensor<T>) -> PRef {
        let full = format!("{}.{name}", self.prefix);
        if self.freeze {
            PRef::Frozen(self.frozen.push(full, t))
        } else {
            PRef::Train(self.train.push(full, t))
        }
    }

    /// Gaussian with standard deviation `1/sqrt(rows)`.
    pub fn weight(&mut self, name: &str, rows: usize, cols: usize) -> PRef {
        self.normal(name, rows, cols, 1.0 / (rows as f64).sqrt())
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> PRef {
        let t = Tensor::randn(rows, cols, std, &mut self.rng);
        self.register(name, t)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> PRef {
        self.register(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> PRef {
        self.register(name, Tensor::full(rows, cols, T::one()))
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> PRef {
        let t = Tensor::from_fn(rows, cols, |_, _| T::of(self.rng.random_range(-bound..bound)));
        self.register(name, t)
    }
}
