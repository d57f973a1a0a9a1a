//! Parameter storage, trainability groups and the small layers built on the
//! tape (linear, token conv, MLP).

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{glorot, uniform};
use crate::tensor::Tensor;

/// Named parameter group. Every trainable tensor belongs to exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Fusion,
    ProjF,
    ProjB,
    Merge,
    Scorer,
    Encoders,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Fusion,
        Group::ProjF,
        Group::ProjB,
        Group::Merge,
        Group::Scorer,
        Group::Encoders,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Fusion => "fusion",
            Group::ProjF => "proj_f",
            Group::ProjB => "proj_b",
            Group::Merge => "merge",
            Group::Scorer => "scorer",
            Group::Encoders => "encoders",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

/// Per-group trainability for one training stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub stage: Option<Stage>,
    trainable: BTreeSet<Group>,
}

impl FreezeMask {
    /// Pretraining updates only the fusion module and both projectors;
    /// finetuning updates everything except the encoders.
    pub fn for_stage(stage: Stage) -> Self {
        let trainable = match stage {
            Stage::Pretrain => [Group::Fusion, Group::ProjF, Group::ProjB].into(),
            Stage::Finetune => Group::ALL.into_iter().filter(|g| *g != Group::Encoders).collect(),
        };
        Self {
            stage: Some(stage),
            trainable,
        }
    }

    pub fn frozen() -> Self {
        Self {
            stage: None,
            trainable: BTreeSet::new(),
        }
    }

    pub fn trains(&self, group: Group) -> bool {
        group != Group::Encoders && self.trainable.contains(&group)
    }

    pub fn trainable_groups(&self) -> impl Iterator<Item = Group> + '_ {
        self.trainable.iter().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count per group.
    pub fn group_size(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    /// Byte image of a group's tensors (names included), for freeze checks.
    pub fn group_bytes(&self, group: Group) -> Vec<u8> {
        let mut out = Vec::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            out.extend_from_slice(e.name.as_bytes());
            out.extend(e.value.to_le_bytes());
        }
        out
    }

    /// Registers every parameter as a leaf; only groups the mask trains
    /// require gradients.
    pub fn bind(&self, tape: &mut Tape, mask: &FreezeMask) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), mask.trains(e.group)))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for every entry of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, e.g. leaves created by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Affine map `x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, glorot(rng, fan_in, fan_out));
        let b = bias.then(|| store.add(format!("{name}.b"), group, uniform(rng, vec![1, fan_out], 0.05)));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[0]
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[1]
    }
}

/// Token-axis convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl TokenConv {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel size {kernel} must be odd")));
        }
        let scale = (3.0 / (c_in * kernel) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            group,
            uniform(rng, vec![c_out, c_in, kernel], scale),
        );
        let b = store.add(format!("{name}.b"), group, uniform(rng, vec![c_out], 0.05));
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv1d(x, p.var(self.w), p.var(self.b))
    }
}

/// Stack of linear layers with GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `depth` linear layers: `in → hidden → … → out`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: Group,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        depth: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("projector depth must be at least 1".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let a = if i == 0 { fan_in } else { hidden };
            let b = if i + 1 == depth { fan_out } else { hidden };
            layers.push(Linear::init(
                store,
                rng,
                &format!("{name}.{i}"),
                group,
                a,
                b,
                true,
            ));
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = gelu(tape, x)?;
            }
            x = layer.forward(tape, p, x)?;
        }
        Ok(x)
    }
}

/// Tanh-form GELU: `½x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
pub fn gelu(tape: &mut Tape, x: Var) -> Result<Var> {
    let x2 = tape.mul(x, x)?;
    let x3 = tape.mul(x2, x)?;
    let cubic = tape.mul_scalar(x3, 0.044715);
    let inner = tape.add(x, cubic)?;
    let scaled = tape.mul_scalar(inner, (2.0 / std::f64::consts::PI).sqrt());
    let t = tape.tanh(scaled)?;
    let one_plus = tape.add_scalar(t, 1.0);
    let prod = tape.mul(x, one_plus)?;
    Ok(tape.mul_scalar(prod, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn freeze_mask_groups() {
        let pre = FreezeMask::for_stage(Stage::Pretrain);
        let trained: Vec<Group> = pre.trainable_groups().collect();
        assert_eq!(trained, vec![Group::Fusion, Group::ProjF, Group::ProjB]);
        let fine = FreezeMask::for_stage(Stage::Finetune);
        for g in Group::ALL {
            assert_eq!(fine.trains(g), g != Group::Encoders);
        }
    }

    #[test]
    fn bind_respects_mask() {
        let mut rng = SeedTree::new(0).stream("t");
        let mut store = ParamStore::new();
        let a = Linear::init(&mut store, &mut rng, "a", Group::ProjF, 2, 3, true);
        let s = Linear::init(&mut store, &mut rng, "s", Group::Scorer, 3, 1, false);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &FreezeMask::for_stage(Stage::Pretrain));
        assert!(tape.requires_grad(bound.var(a.w)));
        assert!(!tape.requires_grad(bound.var(s.w)));
    }

    #[test]
    fn gelu_reference_points() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap());
        let y = gelu(&mut tape, x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.841_192).abs() < 1e-5);
        assert!((v[2] + 0.158_808).abs() < 1e-5);
    }
}
