// Licensed under the Apache-2.0 license

//! Firmware update service.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::seeded;
use crate::crypto::{self, Ciphertext, KeyPair, KeyUsage, PublicKey, Signature};
use crate::pca::AikCredential;
use crate::tpm::{BindKeyCertificate, Nonce};
use crate::wire::{Signed, WireCodec};
use crate::{signed_by_field, wire_struct};

/// Device description data block, signed by the device AIK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceDescription {
    pub model: String,
    pub hw_revision: String,
    pub fw_version: String,
    pub nonce: Nonce,
    pub credential: AikCredential,
    pub bind_certificate: BindKeyCertificate,
    pub signature: Signature,
}
wire_struct!(DeviceDescription, DeviceDescription, {
    model: string, hw_revision: string, fw_version: string, nonce: nonce, credential: nested,
    bind_certificate: nested, signature: signature,
});
signed_by_field!(DeviceDescription);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdatePackage {
    pub model: String,
    pub version: String,
    pub firmware: Vec<u8>,
    pub device_nonce: Nonce,
    pub issuer_id: String,
    pub signature: Signature,
}
wire_struct!(UpdatePackage, UpdatePackage, {
    model: string, version: string, firmware: vec, device_nonce: nonce, issuer_id: string,
    signature: signature,
});
signed_by_field!(UpdatePackage);

/// An [`UpdatePackage`] encrypted to the device bind key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedUpdate {
    pub issuer_id: String,
    pub ciphertext: Ciphertext,
}
wire_struct!(SealedUpdate, SealedUpdate, { issuer_id: string, ciphertext: ciphertext });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareRelease {
    pub version: String,
    pub image: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UpdateError {
    #[error("AIK credential does not verify")]
    BadCredential,
    #[error("device description signature does not verify")]
    BadDddbSignature,
    #[error("bind key certificate does not verify")]
    BadBindCertificate,
    #[error("no firmware for model {0}")]
    NoFirmwareForModel(String),
}

impl UpdateError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::BadCredential => "BadCredential",
            Self::BadDddbSignature => "BadDddbSignature",
            Self::BadBindCertificate => "BadBindCertificate",
            Self::NoFirmwareForModel(_) => "NoFirmwareForModel",
        }
    }
}

#[derive(Debug, Clone)]
pub struct UpdateService {
    id: String,
    key: KeyPair,
    pca_pub: PublicKey,
    catalog: BTreeMap<String, FirmwareRelease>,
    packages_built: u64,
    rng: ChaCha20Rng,
}

impl UpdateService {
    pub fn new<R: RngCore + CryptoRng>(id: impl Into<String>, pca_pub: PublicKey, rng: &mut R) -> Self {
        let mut rng = seeded(rng);
        Self {
            id: id.into(),
            key: KeyPair::generate(KeyUsage::Sign, &mut rng),
            pca_pub,
            catalog: BTreeMap::new(),
            packages_built: 0,
            rng,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public(&self) -> PublicKey {
        self.key.public()
    }

    pub fn publish(&mut self, model: impl Into<String>, release: FirmwareRelease) {
        self.catalog.insert(model.into(), release);
    }

    pub fn packages_built(&self) -> u64 {
        self.packages_built
    }

    pub fn build_update(&mut self, dddb: &DeviceDescription) -> Result<SealedUpdate, UpdateError> {
        let cred = &dddb.credential;
        if !cred.verify_with(&self.pca_pub) {
            return Err(UpdateError::BadCredential);
        }
        if !dddb.verify_with(&cred.aik_pub) {
            return Err(UpdateError::BadDddbSignature);
        }
        let cert = &dddb.bind_certificate;
        if cert.identity_label != cred.identity_label || !cert.verify_with(&cred.aik_pub) {
            return Err(UpdateError::BadBindCertificate);
        }
        let release = self
            .catalog
            .get(&dddb.model)
            .ok_or_else(|| UpdateError::NoFirmwareForModel(dddb.model.clone()))?;
        let mut pkg = UpdatePackage {
            model: dddb.model.clone(),
            version: release.version.clone(),
            firmware: release.image.clone(),
            device_nonce: dddb.nonce,
            issuer_id: self.id.clone(),
            signature: Signature::EMPTY,
        };
        pkg.sign_with(&self.key).expect("update signing key");
        let ciphertext = crypto::encrypt_to(&cert.bind_pub, &pkg.encode(), &mut self.rng)
            .map_err(|_| UpdateError::BadBindCertificate)?;
        self.packages_built += 1;
        Ok(SealedUpdate {
            issuer_id: self.id.clone(),
            ciphertext,
        })
    }
}
