//! Classifier adapter that fuses a discrete and a probabilistic base
//! backend through a trained [`StackingModel`].

use async_trait::async_trait;

use super::tasks::interpret_distribution;
use super::{Backend, BackendError, BackendReply, BackendRequest, SharedBackend, Task};
use crate::ensemble::{one_hot, stack_features, StackingModel};

pub struct StackedClassifier {
    name: String,
    task: Task,
    discrete: SharedBackend,
    probabilistic: SharedBackend,
    model: StackingModel,
    labels: Vec<String>,
}

impl StackedClassifier {
    pub fn new(
        task: Task,
        discrete: SharedBackend,
        probabilistic: SharedBackend,
        model: StackingModel,
        labels: Vec<String>,
    ) -> Result<Self, BackendError> {
        if model.classes() != labels.len() {
            return Err(BackendError::Config(format!(
                "stacking model has {} classes but task {task} has {}",
                model.classes(),
                labels.len()
            )));
        }
        Ok(StackedClassifier {
            name: format!("stacked({}+{})", discrete.name(), probabilistic.name()),
            task,
            discrete,
            probabilistic,
            model,
            labels,
        })
    }
}

#[async_trait]
impl Backend for StackedClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    async fn call(&self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        let (a, b) = tokio::join!(
            self.discrete.call(request),
            self.probabilistic.call(request)
        );
        let (a_class, _) =
            interpret_distribution(self.task, self.discrete.name(), a?, &self.labels)?;
        let (_, b_probs) =
            interpret_distribution(self.task, self.probabilistic.name(), b?, &self.labels)?;
        let k = self.labels.len();
        let features = one_hot(a_class, k)
            .and_then(|hot| stack_features(&hot, &b_probs))
            .and_then(|f| self.model.predict(&f))
            .map_err(|e| BackendError::invalid(&self.name, e.to_string()))?;
        let (class, probs) = features;
        Ok(BackendReply {
            label: Some(self.labels[class].clone()),
            text: None,
            probs: Some(probs),
        })
    }
}
