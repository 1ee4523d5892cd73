//! Dense numerics: tensors, parameter storage with Adam, spectral
//! decompositions, and a finite-difference gradient oracle.

mod gradcheck;
mod linalg;
mod ops;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use linalg::{pca_reduce, symmetric_eigen, truncated_svd, Pca, Svd, SymmetricEigen};
pub(crate) use ops::softmax_in_place;
pub use ops::{
    cross_entropy_loss, leaky_relu, leaky_relu_grad, log_sigmoid, sigmoid, softmax, CrossEntropy,
};
pub use params::{ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use rng::{derive_seed, SeededRng};
pub use tensor::{axpy, cosine, dot, matvec, matvec_add, matvec_t_add, norm, outer_add, Tensor};
