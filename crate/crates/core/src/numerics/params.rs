use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Partition label attached to every parameter.
///
/// Freeze policies and the EWC penalty select parameters by group, so every
/// parameter carries exactly one label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Convolutional feature extractor and its projection to the model width.
    FrontEnd,
    /// Attention, feed-forward and normalisation weights of the transformer.
    Transformer,
    /// Learned vector substituted for masked frames.
    MaskEmbedding,
    /// LoRA factors or adapter weights.
    Adaptation,
    /// Downstream recognition head.
    Head,
    /// Softmax logits of the weighted layer sum.
    LayerWeights,
    /// Anything else (toy problems, tests).
    Other,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::FrontEnd,
        ParamGroup::Transformer,
        ParamGroup::MaskEmbedding,
        ParamGroup::Adaptation,
        ParamGroup::Head,
        ParamGroup::LayerWeights,
        ParamGroup::Other,
    ];

    /// Groups that come out of self-supervised pretraining.
    pub fn is_pretrained_encoder(self) -> bool {
        matches!(
            self,
            ParamGroup::FrontEnd | ParamGroup::Transformer | ParamGroup::MaskEmbedding
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::FrontEnd => "front_end",
            ParamGroup::Transformer => "transformer",
            ParamGroup::MaskEmbedding => "mask_embedding",
            ParamGroup::Adaptation => "adaptation",
            ParamGroup::Head => "head",
            ParamGroup::LayerWeights => "layer_weights",
            ParamGroup::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Named parameters with per-name trainable flags.
///
/// Backed by a `BTreeMap`, so iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name,
            Param {
                value,
                trainable: true,
                group,
            },
        );
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.get_mut(name).map(|p| &mut p.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "`{name}`: {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Copy of the parameters whose group satisfies `keep`.
    pub fn filter_groups(&self, keep: impl Fn(ParamGroup) -> bool) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(_, p)| keep(p.group))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites values of every name in `other` that also exists here.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, p) in other.iter() {
            self.set_value(name, p.value.clone())?;
        }
        Ok(())
    }

    /// Exact equality of values for every name present in both stores.
    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.value == b.value)
    }
}
