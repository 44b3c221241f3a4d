//! The episode-to-logits contract shared by the NTM and the LSTM baseline.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::controllers::LstmBaseline;
use crate::error::ModelError;
use crate::ntm::{NtmConfig, NtmModel};
use crate::params::{ParamLayout, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A recurrent network mapping a `[T, input_dim]` input sequence to
/// `[T, output_dim]` logits.
pub trait SequenceModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Declared parameters, in [`ParamStore`] order.
    fn layout(&self) -> &ParamLayout;
    /// Records the unrolled forward pass on `tape`. `rng` supplies any
    /// per-episode randomness the model needs.
    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        inputs: &Tensor,
        rng: &mut dyn RngCore,
    ) -> Result<Var, ModelError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    Ntm {
        ntm: NtmConfig,
        controller_units: usize,
        controller_layers: usize,
    },
    Lstm {
        layers: usize,
        units: usize,
    },
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Ntm { .. } => "ntm",
            ModelSpec::Lstm { .. } => "lstm",
        }
    }

    pub fn build(&self, input_dim: usize, output_dim: usize) -> Result<Box<dyn SequenceModel>, ModelError> {
        Ok(match self {
            ModelSpec::Ntm {
                ntm,
                controller_units,
                controller_layers,
            } => Box::new(NtmModel::new(
                ntm.clone(),
                input_dim,
                output_dim,
                *controller_units,
                *controller_layers,
            )?),
            ModelSpec::Lstm { layers, units } => Box::new(LstmBaseline::new(input_dim, output_dim, *layers, *units)?),
        })
    }
}
