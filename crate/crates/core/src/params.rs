//! Named parameter storage and the small layer helpers built on it.
//!
//! Modules keep [`ParamId`] handles; a forward pass binds the whole store to a
//! tape once ([`ParamStore::bind`]) and looks variables up through the
//! resulting [`Binding`].

use std::collections::HashMap;
use std::ops::Index;

use crate::rng::SplitMix64;
use crate::tensor::{
    self, grad_check, GradCheckOptions, GradReport, Tape, Tensor, TensorError, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Rest,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("parameter {0:?} registered twice")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: ParamGroup,
    ) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, group });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), ParamError> {
        let cur = &self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            }
            .into());
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<ParamId, ParamError> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Pushes every parameter onto `tape` as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.bind_with(tape, true)
    }

    /// Like [`bind`](Self::bind) but the leaves are constants.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, track: bool) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                let mut t = e.value.clone();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect();
        Binding { vars }
    }

    /// Gradient check over the named subset of parameters (all when `names`
    /// is `None`). Parameters outside the subset are bound as constants.
    pub fn grad_check<F>(
        &self,
        names: Option<&[&str]>,
        f: F,
        opts: &GradCheckOptions,
    ) -> Result<GradReport, ParamError>
    where
        F: Fn(&mut Tape, &Binding) -> tensor::Result<Var>,
    {
        let checked: Vec<usize> = match names {
            Some(ns) => ns
                .iter()
                .map(|n| self.id(n).map(|id| id.0))
                .collect::<Result<_, _>>()?,
            None => (0..self.entries.len()).collect(),
        };
        let params: Vec<(String, Tensor)> = checked
            .iter()
            .map(|&i| (self.entries[i].name.clone(), self.entries[i].value.clone()))
            .collect();
        let report = grad_check(
            &params,
            |tape, vars| {
                let mut all = Vec::with_capacity(self.entries.len());
                let mut k = 0;
                for (i, e) in self.entries.iter().enumerate() {
                    if k < checked.len() && checked[k] == i {
                        all.push(vars[k]);
                        k += 1;
                    } else {
                        all.push(tape.constant(e.value.clone()));
                    }
                }
                f(tape, &Binding { vars: all })
            },
            opts,
        )?;
        Ok(report)
    }
}

/// Tape variables for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Xavier/Glorot-uniform matrix.
pub fn xavier(rng: &mut SplitMix64, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Tensor::new([fan_in, fan_out], data).unwrap()
}

pub fn normal(rng: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `x·W + b` over the rows of `x`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut SplitMix64,
    ) -> Result<Self, ParamError> {
        let weight = store.add(format!("{name}.weight"), xavier(rng, d_in, d_out), group)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([d_out]), group)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> tensor::Result<Var> {
        let y = tape.matmul(x, bind[self.weight])?;
        match self.bias {
            Some(b) => tape.add_row(y, bind[b]),
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        group: ParamGroup,
        rng: &mut SplitMix64,
    ) -> Result<Self, ParamError> {
        Ok(Self {
            first: Linear::new(
                store,
                &format!("{name}.0"),
                dims[0],
                dims[1],
                true,
                group,
                rng,
            )?,
            second: Linear::new(
                store,
                &format!("{name}.1"),
                dims[1],
                dims[2],
                true,
                group,
                rng,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> tensor::Result<Var> {
        let h = self.first.forward(tape, bind, x)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, bind, h)
    }
}

/// Affine layer norm over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        group: ParamGroup,
    ) -> Result<Self, ParamError> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones([d]), group)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d]), group)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> tensor::Result<Var> {
        tape.layer_norm(x, bind[self.gain], bind[self.bias], LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros([1]), ParamGroup::Rest).unwrap();
        assert!(matches!(
            s.add("a", Tensor::zeros([1]), ParamGroup::Rest),
            Err(ParamError::Duplicate(_))
        ));
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = SplitMix64::new(5);
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "lin", 4, 3, true, ParamGroup::Rest, &mut rng).unwrap();
        s.set(lin.bias.unwrap(), normal(&mut rng, &[3], 1.0))
            .unwrap();
        let x = normal(&mut rng, &[5, 4], 1.0);
        let rep = s
            .grad_check(
                None,
                |tape, b| {
                    let xv = tape.constant(x.clone());
                    let y = lin.forward(tape, b, xv)?;
                    let y = tape.sigmoid(y)?;
                    tape.sum(y)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
