// Licensed under the Apache-2.0 license

pub mod boot;
pub mod cas;
pub mod crypto;
pub mod pca;
pub mod scrambler;
pub mod services;
pub mod stb;
pub mod tpm;
pub mod wire;
