//! Named parameter storage and the small layers built on it.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Checkpoint partition a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    BackboneImg,
    BackbonePcd,
    Adapters,
    Prompts,
    Auxiliary,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::BackboneImg,
        ParamGroup::BackbonePcd,
        ParamGroup::Adapters,
        ParamGroup::Prompts,
        ParamGroup::Auxiliary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::BackboneImg => "backbone_img",
            ParamGroup::BackbonePcd => "backbone_pcd",
            ParamGroup::Adapters => "adapters",
            ParamGroup::Prompts => "prompts",
            ParamGroup::Auxiliary => "auxiliary",
        }
    }

    pub fn is_backbone(self) -> bool {
        matches!(self, ParamGroup::BackboneImg | ParamGroup::BackbonePcd)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Insertion-ordered parameter table.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn groups_present(&self) -> Vec<ParamGroup> {
        let mut gs: Vec<ParamGroup> = self.params.iter().map(|p| p.group).collect();
        gs.sort();
        gs.dedup();
        gs
    }

    /// Records every parameter on `g`; those rejected by `trainable` become
    /// constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&Param) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(p) {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Copies values for every parameter of `src` whose name exists here and
    /// whose group passes `filter`. Shapes must agree.
    pub fn copy_from(
        &mut self,
        src: &ParamStore,
        filter: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        for p in &src.params {
            if !filter(p.group) {
                continue;
            }
            let Some(&i) = self.by_name.get(&p.name) else {
                continue;
            };
            let dst = &mut self.params[i];
            if dst.value.shape() != p.value.shape() {
                return Err(Error::ShapeDrift {
                    name: p.name.clone(),
                    stored: p.value.shape().to_vec(),
                    expected: dst.value.shape().to_vec(),
                });
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles for a store whose parameters were recorded elsewhere, in
    /// store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; `None` where nothing flowed.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| g.grad(*v)).collect()
    }
}

/// Gaussian init scaled by `1/sqrt(fan_in)`.
pub fn init_weight<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Affine map `x W + b` over rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            init_weight(fan_in, fan_out, rng),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Both weight and bias start at zero.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Tensor::zeros(&[fan_in, fan_out]),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_row(y, p.var(self.bias))
    }
}
