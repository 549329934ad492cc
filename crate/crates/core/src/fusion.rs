//! Multimodal fusion: per-modality embeddings are stacked and reduced
//! to one vector by the row-wise maximum. The gradient routes to the
//! lowest-index modality attaining each maximum.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Ct,
    Pet,
    Clinical,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::Pet => "pet",
            Modality::Clinical => "clinical",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ct" => Ok(Modality::Ct),
            "pet" => Ok(Modality::Pet),
            "clinical" => Ok(Modality::Clinical),
            other => Err(Error::ConfigError(format!("unknown modality '{other}'"))),
        }
    }
}

/// Embeddings of all modalities stacked into `[N, m, n]`, column order
/// matching `modality_ids`.
pub struct ModalityStack<T: Element> {
    pub z: Tensor<T>,
    pub modality_ids: Vec<Modality>,
}

/// The fused `[N, m]` vector; each element equals one element of the
/// stack it was fused from.
pub struct FusedVector<T: Element> {
    pub c: Tensor<T>,
}

/// Stacks per-modality embeddings `[N, m]` into a `[N, m, n]` matrix.
pub fn stack_modalities<T: Element>(
    tape: &mut Tape<T>,
    parts: &[(Modality, Tensor<T>)],
) -> Result<ModalityStack<T>> {
    if parts.is_empty() {
        return Err(Error::EmptyStack);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().map(|(_, t)| t).collect();
    let z = tape.stack_cols(&refs)?;
    Ok(ModalityStack { z, modality_ids: parts.iter().map(|(m, _)| *m).collect() })
}

/// Row-wise maximum over the modality axis: `c_k = max_l z_{k,l}`.
/// Ties route the gradient to the lowest modality index.
pub fn fuse_max<T: Element>(tape: &mut Tape<T>, stack: &ModalityStack<T>) -> Result<FusedVector<T>> {
    if stack.modality_ids.is_empty() {
        return Err(Error::EmptyStack);
    }
    Ok(FusedVector { c: tape.max_cols(&stack.z)? })
}
