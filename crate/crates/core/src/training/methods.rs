//! Training methods behind a common trait, looked up by name at runtime.

use std::collections::BTreeMap;

use super::{joint_train, train_rotation_then_decoder, train_supervised, train_with_regularizer, Regularizer, TrainConfig, TrainHistory};
use crate::corpus::TrainingData;
use crate::error::{Error, Result};
use crate::model::ModelParameters;

pub trait TrainingMethod: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    /// Whether the method consumes unlabelled images.
    fn uses_unlabelled(&self) -> bool {
        true
    }
    /// Whether unlabelled samples need precomputed edge targets.
    fn needs_edge_targets(&self) -> bool {
        false
    }
    fn needs_rotation_head(&self) -> bool {
        false
    }
    fn train(&self, params: ModelParameters, data: &TrainingData, config: &TrainConfig) -> Result<(ModelParameters, TrainHistory)>;
}

pub struct SupervisedMethod;

impl TrainingMethod for SupervisedMethod {
    fn name(&self) -> &'static str {
        "supervised"
    }
    fn description(&self) -> &'static str {
        "segmentation loss on the labelled images only"
    }
    fn uses_unlabelled(&self) -> bool {
        false
    }
    fn train(&self, params: ModelParameters, data: &TrainingData, config: &TrainConfig) -> Result<(ModelParameters, TrainHistory)> {
        train_supervised(params, &data.labelled, config)
    }
}

pub struct EdgeJointMethod;

impl TrainingMethod for EdgeJointMethod {
    fn name(&self) -> &'static str {
        "edge_joint"
    }
    fn description(&self) -> &'static str {
        "shared encoder trained on labelled masks and on Canny edge maps of unlabelled images"
    }
    fn needs_edge_targets(&self) -> bool {
        true
    }
    fn train(&self, params: ModelParameters, data: &TrainingData, config: &TrainConfig) -> Result<(ModelParameters, TrainHistory)> {
        joint_train(params, data, config)
    }
}

pub struct EntropyMethod;

impl TrainingMethod for EntropyMethod {
    fn name(&self) -> &'static str {
        "entropy"
    }
    fn description(&self) -> &'static str {
        "segmentation loss plus entropy minimization on unlabelled images"
    }
    fn train(&self, params: ModelParameters, data: &TrainingData, config: &TrainConfig) -> Result<(ModelParameters, TrainHistory)> {
        train_with_regularizer(params, data, config, Regularizer::Entropy)
    }
}

pub struct ConsistencyMethod;

impl TrainingMethod for ConsistencyMethod {
    fn name(&self) -> &'static str {
        "consistency"
    }
    fn description(&self) -> &'static str {
        "segmentation loss plus flip/rotation consistency on unlabelled images"
    }
    fn train(&self, params: ModelParameters, data: &TrainingData, config: &TrainConfig) -> Result<(ModelParameters, TrainHistory)> {
        train_with_regularizer(params, data, config, Regularizer::Consistency)
    }
}

pub struct RotationPretrainMethod;

impl TrainingMethod for RotationPretrainMethod {
    fn name(&self) -> &'static str {
        "rotation_pretrain"
    }
    fn description(&self) -> &'static str {
        "rotation-prediction pre-training of the encoder, then segmentation training"
    }
    fn needs_rotation_head(&self) -> bool {
        true
    }
    fn train(&self, params: ModelParameters, data: &TrainingData, config: &TrainConfig) -> Result<(ModelParameters, TrainHistory)> {
        train_rotation_then_decoder(params, data, config)
    }
}

/// Name → method table. `rotation` is accepted as a short alias.
pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Box<dyn TrainingMethod>>,
    aliases: BTreeMap<&'static str, &'static str>,
}

impl Default for MethodRegistry {
    fn default() -> Self {
        let mut r = MethodRegistry::empty();
        r.register(Box::new(SupervisedMethod));
        r.register(Box::new(EdgeJointMethod));
        r.register(Box::new(EntropyMethod));
        r.register(Box::new(ConsistencyMethod));
        r.register(Box::new(RotationPretrainMethod));
        r.aliases.insert("rotation", "rotation_pretrain");
        r
    }
}

impl MethodRegistry {
    pub fn empty() -> Self {
        MethodRegistry {
            methods: BTreeMap::new(),
            aliases: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, method: Box<dyn TrainingMethod>) {
        self.methods.insert(method.name(), method);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }

    /// Canonical name for `name`, resolving aliases.
    pub fn canonical(&self, name: &str) -> Result<&'static str> {
        let name = self.aliases.get(name).copied().unwrap_or(name);
        self.methods
            .get_key_value(name)
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::UnknownMethod {
                name: name.to_string(),
                valid: self.names().join(", "),
            })
    }

    pub fn get(&self, name: &str) -> Result<&dyn TrainingMethod> {
        let key = self.canonical(name)?;
        Ok(self.methods[key].as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_resolves_names_and_aliases() {
        let r = MethodRegistry::default();
        assert_eq!(
            r.names(),
            vec!["consistency", "edge_joint", "entropy", "rotation_pretrain", "supervised"]
        );
        assert_eq!(r.get("rotation").unwrap().name(), "rotation_pretrain");
        assert!(r.get("edge_joint").unwrap().needs_edge_targets());
        assert!(!r.get("supervised").unwrap().uses_unlabelled());
    }

    #[test]
    fn unknown_method_lists_valid_names() {
        let err = MethodRegistry::default().get("simclr").err().unwrap();
        assert!(err.is_usage());
        let msg = err.to_string();
        assert!(msg.contains("simclr") && msg.contains("edge_joint") && msg.contains("supervised"));
    }
}
