//! Named, freezable model parameters.

use crate::tensor::{Scalar, Tensor};

/// A named tensor that may receive gradients. Cloning shares storage, so a
/// `Parameter` handle held by the optimizer sees in-place updates.
pub struct Parameter<T: Scalar> {
    pub tensor: Tensor<T>,
    pub name: String,
}

impl<T: Scalar> Clone for Parameter<T> {
    fn clone(&self) -> Self {
        Parameter {
            tensor: self.tensor.clone(),
            name: self.name.clone(),
        }
    }
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        tensor.set_requires_grad(true);
        Parameter {
            tensor,
            name: name.into(),
        }
    }

    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }

    /// Frozen parameters are excluded from the tape and from optimizer steps.
    pub fn set_trainable(&self, flag: bool) {
        self.tensor.set_requires_grad(flag);
    }

    pub fn byte_digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        let mut bytes = Vec::new();
        for v in self.tensor.data() {
            v.write_le(&mut bytes);
        }
        hasher.update(&bytes);
        hasher.finalize().into()
    }
}
