use rand_distr::{Distribution, Normal, Uniform};

use super::config::ViTConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::rng;

/// Affine layer `x · w + b` with `w: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub qkv: Linear<T>,
    pub attn_out: Linear<T>,
    pub ln2_g: T,
    pub ln2_b: T,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Two-layer MLP head (`fc1 -> GELU -> fc2`).
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Encoder weights, generic over the slot type so the same layout can hold
/// tensors, graph variables or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// Patch embedding `W_patch`: `(p²·ch) x d`, rows channel-major.
    pub patch: Linear<T>,
    /// Class token, `1 x d`.
    pub cls: T,
    /// Positional table, `(1 + grid²) x d`; row 0 belongs to the class token.
    pub pos: T,
    pub blocks: Vec<Block<T>>,
    pub norm_g: T,
    pub norm_b: T,
    pub projector: Head<T>,
    pub predictor: Option<Head<T>>,
}

/// Parameters of one encoder with its heads.
pub type ViTParams<F = f32> = Weights<Tensor<F>>;

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear { w: f(&self.w), b: f(&self.b) }
    }
}

impl<T> Head<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Head<U> {
        Head { fc1: self.fc1.map(f), fc2: self.fc2.map(f) }
    }
}

impl<T> Block<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Block<U> {
        Block {
            ln1_g: f(&self.ln1_g),
            ln1_b: f(&self.ln1_b),
            qkv: self.qkv.map(f),
            attn_out: self.attn_out.map(f),
            ln2_g: f(&self.ln2_g),
            ln2_b: f(&self.ln2_b),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }
}

impl<T> Weights<T> {
    /// Same layout with every slot transformed, visited in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        let f = &mut f;
        Weights {
            patch: self.patch.map(f),
            cls: f(&self.cls),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            norm_g: f(&self.norm_g),
            norm_b: f(&self.norm_b),
            projector: self.projector.map(f),
            predictor: self.predictor.as_ref().map(|h| h.map(f)),
        }
    }

    /// Named slots in canonical order (predictor last).
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("patch.w".to_string(), &self.patch.w),
            ("patch.b".to_string(), &self.patch.b),
            ("cls".to_string(), &self.cls),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.extend([
                (format!("{p}.ln1.g"), &b.ln1_g),
                (format!("{p}.ln1.b"), &b.ln1_b),
                (format!("{p}.qkv.w"), &b.qkv.w),
                (format!("{p}.qkv.b"), &b.qkv.b),
                (format!("{p}.attn_out.w"), &b.attn_out.w),
                (format!("{p}.attn_out.b"), &b.attn_out.b),
                (format!("{p}.ln2.g"), &b.ln2_g),
                (format!("{p}.ln2.b"), &b.ln2_b),
                (format!("{p}.fc1.w"), &b.fc1.w),
                (format!("{p}.fc1.b"), &b.fc1.b),
                (format!("{p}.fc2.w"), &b.fc2.w),
                (format!("{p}.fc2.b"), &b.fc2.b),
            ]);
        }
        out.push(("norm.g".to_string(), &self.norm_g));
        out.push(("norm.b".to_string(), &self.norm_b));
        for (name, h) in [("projector", Some(&self.projector)), ("predictor", self.predictor.as_ref())] {
            if let Some(h) = h {
                out.extend([
                    (format!("{name}.fc1.w"), &h.fc1.w),
                    (format!("{name}.fc1.b"), &h.fc1.b),
                    (format!("{name}.fc2.w"), &h.fc2.w),
                    (format!("{name}.fc2.b"), &h.fc2.b),
                ]);
            }
        }
        out
    }

    /// Slots in canonical order.
    pub fn slots(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![&mut self.patch.w, &mut self.patch.b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g,
                &mut b.ln1_b,
                &mut b.qkv.w,
                &mut b.qkv.b,
                &mut b.attn_out.w,
                &mut b.attn_out.b,
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.fc1.w,
                &mut b.fc1.b,
                &mut b.fc2.w,
                &mut b.fc2.b,
            ]);
        }
        out.push(&mut self.norm_g);
        out.push(&mut self.norm_b);
        for h in std::iter::once(&mut self.projector).chain(self.predictor.as_mut()) {
            out.extend([&mut h.fc1.w, &mut h.fc1.b, &mut h.fc2.w, &mut h.fc2.b]);
        }
        out
    }

    /// Rebuilds a layout from slots in canonical order; `template` supplies
    /// the structure (block count, predictor presence).
    pub fn from_slots<U>(template: &Weights<U>, slots: Vec<T>) -> Result<Self> {
        let expected = template.slots().len();
        if slots.len() != expected {
            return Err(Error::invalid(format!("expected {expected} parameter slots, got {}", slots.len())));
        }
        let mut it = slots.into_iter();
        Ok(template.map(|_| it.next().expect("slot count checked")))
    }
}

impl<F: Real> ViTParams<F> {
    /// Random initialization: Xavier-uniform linear layers, zero biases, unit
    /// layer-norm gains, N(0, 0.02²) class token and positional table.
    pub fn init(config: &ViTConfig, with_predictor: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(&[seed, rng::tag::INIT]);
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let pd = config.patch_dim(config.base_patch);
        let n_pos = config.base_seq_len();

        let normal = |r: &mut rng::Stream, shape: [usize; 2]| {
            let dist = Normal::new(0.0, 0.02).expect("valid std");
            Tensor::from_fn(shape, |_| F::from_f64(dist.sample(r)))
        };
        let linear = |r: &mut rng::Stream, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            Linear {
                w: Tensor::from_fn([fan_in, fan_out], |_| F::from_f64(dist.sample(r))),
                b: Tensor::zeros([fan_out]),
            }
        };
        let ones = || Tensor::full([d], F::one());
        let zeros = || Tensor::zeros([d]);

        let patch = linear(&mut r, pd, d);
        let cls = normal(&mut r, [1, d]);
        let pos = normal(&mut r, [n_pos, d]);
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1_g: ones(),
                ln1_b: zeros(),
                qkv: linear(&mut r, d, 3 * d),
                attn_out: linear(&mut r, d, d),
                ln2_g: ones(),
                ln2_b: zeros(),
                fc1: linear(&mut r, d, hidden),
                fc2: linear(&mut r, hidden, d),
            })
            .collect();
        let projector = Head { fc1: linear(&mut r, d, config.head_hidden), fc2: linear(&mut r, config.head_hidden, config.rep_dim) };
        let predictor = with_predictor.then(|| Head {
            fc1: linear(&mut r, config.rep_dim, config.head_hidden),
            fc2: linear(&mut r, config.head_hidden, config.rep_dim),
        });
        Ok(Weights { patch, cls, pos, blocks, norm_g: ones(), norm_b: zeros(), projector, predictor })
    }

    pub fn num_params(&self) -> usize {
        self.slots().iter().map(|t| t.len()).sum()
    }

    /// Copy without the prediction head (the momentum-encoder layout).
    pub fn without_predictor(&self) -> Self {
        let mut p = self.clone();
        p.predictor = None;
        p
    }

    pub fn cast<G: Real>(&self) -> ViTParams<G> {
        self.map(|t| t.cast())
    }

    pub fn is_finite(&self) -> bool {
        self.slots().iter().all(|t| t.is_finite())
    }

    /// All values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.slots() {
            out.extend(t.data().iter().map(|v| v.as_f64()));
        }
        out
    }
}
