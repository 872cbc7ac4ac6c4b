// Licensed under the Apache-2.0 license

//! Scenario files and fixtures.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! [scenario]
//! name = "e2e-purchase"
//! start_time = 1700038800     # simulated seconds
//! period_packets = 100        # packets per crypto period
//! shuffle = false             # seeded reordering of the delivery queue
//!
//! [fixtures]                  # paths relative to the scenario file
//! images = "fixtures/images.toml"
//! reference = "fixtures/reference.toml"
//! boxes = "fixtures/boxes.toml"
//!
//! [[endpoint]]                # one per party, `kind` selects the role
//! name = "box-1"
//! kind = "box"
//! customer_id = "alice@example.net"
//!
//! [[event]]                   # executed in order, each to quiescence
//! do = "take-ownership"
//! box = "box-1"
//!
//! [[adversary]]
//! kind = "replay"
//! messages = ["SealedVoucher"]
//!
//! [[assert]]                  # judged after the last event
//! check = "deposit"
//! box = "box-1"
//! equals = 800
//! ```
//!
//! Endpoint references left out of an event resolve to the only endpoint
//! of the needed kind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use stb_core::boot::{BootImage, ReferenceTable};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("scenario does not parse: {0}")]
    Parse(String),
    #[error("fixture missing: {0}")]
    FixtureMissing(String),
    #[error("fixture {path} does not parse: {reason}")]
    BadFixture { path: String, reason: String },
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error("endpoint {name} is not a {expected}")]
    WrongKind { name: String, expected: &'static str },
    #[error("no unique endpoint of kind {0}; name one explicitly")]
    Ambiguous(&'static str),
    #[error("duplicate endpoint {0}")]
    DuplicateEndpoint(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioHeader,
    #[serde(default)]
    pub fixtures: Fixtures,
    #[serde(default, rename = "endpoint")]
    pub endpoints: Vec<EndpointConfig>,
    #[serde(default, rename = "event")]
    pub events: Vec<Event>,
    #[serde(default, rename = "adversary")]
    pub adversaries: Vec<AdversaryConfig>,
    #[serde(default, rename = "assert")]
    pub asserts: Vec<Check>,
}

pub const DEFAULT_START_TIME: u64 = 1_700_038_800;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioHeader {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_start")]
    pub start_time: u64,
    #[serde(default = "default_period")]
    pub period_packets: u32,
    #[serde(default)]
    pub shuffle: bool,
}

fn default_start() -> u64 {
    DEFAULT_START_TIME
}

fn default_period() -> u32 {
    stb_core::scrambler::DEFAULT_PERIOD_PACKETS
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixtures {
    pub images: Option<String>,
    pub reference: Option<String>,
    pub boxes: Option<String>,
    pub firmware: Option<String>,
    pub acl: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub stream: u16,
    pub cas: String,
    pub tariff: u32,
    #[serde(default)]
    pub online_gated: bool,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EndpointKind {
    Pca {
        auditor: Option<String>,
    },
    Provider {
        pca: Option<String>,
        #[serde(default)]
        streams: Vec<StreamConfig>,
        charging_models: Option<Vec<String>>,
        /// Publish a PCA vouch instead of pre-installing the root in boxes.
        #[serde(default)]
        vouched: bool,
        entitlement_lifetime: Option<u64>,
        permit_span: Option<u32>,
    },
    Charging {
        pca: Option<String>,
        tsa: Option<String>,
    },
    Tsa {},
    UpdateService {
        pca: Option<String>,
    },
    Auditor {},
    Relay {
        upstream: Option<String>,
    },
    Box {
        #[serde(default = "default_profile")]
        profile: String,
        customer_id: String,
        deposit: Option<u64>,
        pca: Option<String>,
        charging: Option<String>,
    },
}

fn default_profile() -> String {
    "standard".into()
}

impl EndpointKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Pca { .. } => "pca",
            Self::Provider { .. } => "provider",
            Self::Charging { .. } => "charging",
            Self::Tsa {} => "tsa",
            Self::UpdateService { .. } => "update-service",
            Self::Auditor {} => "auditor",
            Self::Relay { .. } => "relay",
            Self::Box { .. } => "box",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct EndpointConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: EndpointKind,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "do", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Event {
    TakeOwnership {
        #[serde(rename = "box")]
        stb: String,
        pca: Option<String>,
        via: Option<String>,
    },
    Contract {
        #[serde(rename = "box")]
        stb: String,
        charging: Option<String>,
    },
    Register {
        #[serde(rename = "box")]
        stb: String,
        provider: Option<String>,
        stream: u16,
        model: String,
    },
    RequestKey {
        #[serde(rename = "box")]
        stb: String,
        provider: Option<String>,
        stream: u16,
        /// Seconds relative to the scenario start.
        valid_from: i64,
        valid_until: i64,
        daily_max: Option<u32>,
        hours: Option<Vec<u8>>,
    },
    Permit {
        #[serde(rename = "box")]
        stb: String,
        provider: Option<String>,
        stream: u16,
        from: u32,
        until: u32,
    },
    Broadcast {
        provider: Option<String>,
        stream: u16,
        periods: u32,
        content: Option<String>,
    },
    Watch {
        #[serde(rename = "box")]
        stb: String,
        stream: u16,
        #[serde(default)]
        from_period: u32,
        periods: Option<u32>,
        tsa: Option<String>,
    },
    TopUp {
        #[serde(rename = "box")]
        stb: String,
        charging: Option<String>,
        amount: u64,
    },
    Push {
        #[serde(rename = "box")]
        stb: String,
        charging: Option<String>,
    },
    Pull {
        #[serde(rename = "box")]
        stb: String,
        charging: Option<String>,
    },
    /// Push and pull of the same records in flight together.
    PushPull {
        #[serde(rename = "box")]
        stb: String,
        charging: Option<String>,
    },
    Update {
        #[serde(rename = "box")]
        stb: String,
        service: Option<String>,
    },
    CompromiseBoot {
        #[serde(rename = "box")]
        stb: String,
        component: String,
        data: String,
    },
    /// Host software rewrites one byte of a logged image.
    LieAboutLog {
        #[serde(rename = "box")]
        stb: String,
        event: usize,
    },
    Reboot {
        #[serde(rename = "box")]
        stb: String,
    },
    Advance {
        seconds: u64,
    },
    /// Advance to the next UTC midnight plus `plus` seconds.
    AdvanceToMidnight {
        #[serde(default)]
        plus: u64,
    },
    Revoke {
        pca: Option<String>,
        #[serde(rename = "box")]
        stb: String,
    },
    Reveal {
        auditor: Option<String>,
        pca: Option<String>,
        #[serde(rename = "box")]
        stb: String,
        reason: String,
    },
    /// Ask one named CAS instance for a control word.
    CrossRequest {
        #[serde(rename = "box")]
        stb: String,
        cas: String,
        stream: u16,
        #[serde(default)]
        period: u32,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AdversaryConfig {
    Replay {
        messages: Option<Vec<String>>,
        #[serde(default = "one")]
        copies: u32,
    },
    TamperLog {
        messages: Option<Vec<String>>,
        /// Logged event whose image gets one bit flipped.
        #[serde(default)]
        event: usize,
    },
    FakeTpm {
        target: String,
        #[serde(default = "rogue")]
        variant: String,
        /// Endpoint whose enrollment traffic the replayed-aik variant reuses.
        victim: Option<String>,
    },
    Eavesdrop {},
    RelayTamper {
        relay: Option<String>,
        messages: Option<Vec<String>>,
    },
}

fn one() -> u32 {
    1
}

fn rogue() -> String {
    "rogue-ek".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "check", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Check {
    Deposit {
        #[serde(rename = "box")]
        stb: String,
        equals: u64,
    },
    DepositConserved {
        #[serde(rename = "box")]
        stb: String,
    },
    FirmwareVersion {
        #[serde(rename = "box")]
        stb: String,
        equals: String,
    },
    Credential {
        #[serde(rename = "box")]
        stb: String,
        issued: bool,
    },
    PcaIssued {
        pca: Option<String>,
        equals: usize,
    },
    Played {
        #[serde(rename = "box")]
        stb: String,
        stream: u16,
        periods: u64,
    },
    Fidelity {
        #[serde(rename = "box")]
        stb: String,
        stream: u16,
    },
    Errors {
        code: String,
        detail: Option<String>,
        endpoint: Option<String>,
        equals: usize,
    },
    InvoiceMatchesMeter {
        #[serde(rename = "box")]
        stb: String,
        charging: Option<String>,
    },
    InvoicesEqual {
        boxes: Vec<String>,
        charging: Option<String>,
    },
    CwReleased {
        #[serde(rename = "box")]
        stb: String,
        cas: String,
        equals: u64,
    },
    VouchersIssued {
        charging: Option<String>,
        equals: u64,
    },
    KeysIssued {
        provider: Option<String>,
        equals: usize,
    },
    Registered {
        #[serde(rename = "box")]
        stb: String,
        stream: u16,
        equals: bool,
    },
    PrivacyScan {},
    Revealed {
        auditor: Option<String>,
        #[serde(rename = "box")]
        stb: String,
    },
    TranscriptContains {
        msg_type: String,
        code: Option<String>,
        equals: usize,
    },
    QueueEmpty {},
}

impl Check {
    pub fn name(&self) -> String {
        let s = format!("{self:?}");
        s.split([' ', '{']).next().unwrap_or_default().to_string()
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}

/// Where fixture paths are looked up.
#[derive(Debug, Clone)]
pub enum FixtureSource {
    Directory(PathBuf),
    Bundled,
}

impl FixtureSource {
    pub fn read(&self, path: &str) -> Result<String, ConfigError> {
        match self {
            Self::Directory(dir) => {
                std::fs::read_to_string(dir.join(path)).map_err(|_| ConfigError::FixtureMissing(path.to_string()))
            }
            Self::Bundled => crate::bundled::fixture(path)
                .map(str::to_string)
                .ok_or_else(|| ConfigError::FixtureMissing(path.to_string())),
        }
    }
}

/// A parsed scenario with its fixture source.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub source: FixtureSource,
}

impl Scenario {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|_| ConfigError::FixtureMissing(path.display().to_string()))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config: ScenarioConfig::parse(&text)?,
            source: FixtureSource::Directory(dir),
        })
    }

    pub fn bundled(name: &str) -> Option<Result<Self, ConfigError>> {
        let text = crate::bundled::scenario(name)?;
        Some(ScenarioConfig::parse(text).map(|config| Self {
            config,
            source: FixtureSource::Bundled,
        }))
    }

    /// A path on disk, else a bundled scenario name.
    pub fn load(name_or_path: &str) -> Result<Self, ConfigError> {
        let path = Path::new(name_or_path);
        if path.exists() {
            return Self::from_file(path);
        }
        Self::bundled(name_or_path).unwrap_or_else(|| Err(ConfigError::FixtureMissing(name_or_path.to_string())))
    }

    fn fixture<T>(&self, path: &Option<String>, what: &str, parse: impl FnOnce(&str) -> Result<T, String>) -> Result<T, ConfigError> {
        let path = path
            .as_ref()
            .ok_or_else(|| ConfigError::FixtureMissing(format!("[fixtures] {what}")))?;
        let text = self.source.read(path)?;
        parse(&text).map_err(|reason| ConfigError::BadFixture {
            path: path.clone(),
            reason,
        })
    }

    pub fn images(&self) -> Result<Vec<BootImage>, ConfigError> {
        self.fixture(&self.config.fixtures.images, "images", parse_images)
    }

    pub fn reference(&self) -> Result<ReferenceTable, ConfigError> {
        self.fixture(&self.config.fixtures.reference, "reference", |t| {
            ReferenceTable::from_toml(t).map_err(|e| e.to_string())
        })
    }

    pub fn boxes(&self) -> Result<BTreeMap<String, BoxProfile>, ConfigError> {
        self.fixture(&self.config.fixtures.boxes, "boxes", |t| {
            let f: BoxesFile = toml::from_str(t).map_err(|e| e.to_string())?;
            Ok(f.profile.into_iter().map(|p| (p.name.clone(), p)).collect())
        })
    }

    pub fn firmware(&self) -> Result<FirmwareFile, ConfigError> {
        self.fixture(&self.config.fixtures.firmware, "firmware", |t| {
            toml::from_str(t).map_err(|e| e.to_string())
        })
    }

    /// Stream to member references, or empty when no ACL fixture is set.
    pub fn acl(&self) -> Result<Vec<AclEntry>, ConfigError> {
        if self.config.fixtures.acl.is_none() {
            return Ok(Vec::new());
        }
        self.fixture(&self.config.fixtures.acl, "acl", |t| {
            let f: AclFile = toml::from_str(t).map_err(|e| e.to_string())?;
            Ok(f.entry)
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImagesFile {
    image: Vec<ImageEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageEntry {
    pcr: u8,
    name: String,
    data: String,
}

pub fn parse_images(text: &str) -> Result<Vec<BootImage>, String> {
    let f: ImagesFile = toml::from_str(text).map_err(|e| e.to_string())?;
    Ok(f.image
        .into_iter()
        .map(|i| BootImage::new(i.pcr, i.name, i.data.into_bytes()))
        .collect())
}

/// Box model with its pre-installed configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxProfile {
    pub name: String,
    pub model: String,
    pub hw_revision: String,
    pub firmware_version: String,
    pub initial_deposit: u64,
    /// Hex owner authorization, 20 bytes.
    pub owner_auth: String,
    /// Endpoints whose public keys ship with the box. Empty means every
    /// non-vouched provider, time authority, and update service.
    #[serde(default)]
    pub trusted: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxesFile {
    profile: Vec<BoxProfile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirmwareFile {
    pub model: String,
    pub version: String,
    pub image: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AclEntry {
    pub provider: String,
    pub stream: u16,
    /// `box:<endpoint>` references resolved once the box has a pseudonym.
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct AclFile {
    entry: Vec<AclEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_parses() {
        let c = ScenarioConfig::parse(
            r#"
            [scenario]
            name = "x"
            [[endpoint]]
            name = "box-1"
            kind = "box"
            customer_id = "c"
            [[event]]
            do = "advance"
            seconds = 5
            [[assert]]
            check = "queue-empty"
        "#,
        )
        .unwrap();
        assert_eq!(c.scenario.period_packets, 100);
        assert_eq!(c.scenario.start_time, DEFAULT_START_TIME);
        assert!(matches!(c.endpoints[0].kind, EndpointKind::Box { .. }));
        assert!(matches!(c.events[0], Event::Advance { seconds: 5 }));
        assert_eq!(c.asserts[0].name(), "QueueEmpty");
    }

    #[test]
    fn unknown_event_is_a_config_error() {
        let e = ScenarioConfig::parse("[scenario]\nname='x'\n[[event]]\ndo='dance'\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse(_)));
    }

    #[test]
    fn missing_fixture_is_reported() {
        let s = Scenario {
            config: ScenarioConfig::parse("[scenario]\nname='x'\n[fixtures]\nimages='nope.toml'\n").unwrap(),
            source: FixtureSource::Bundled,
        };
        assert!(matches!(s.images(), Err(ConfigError::FixtureMissing(_))));
        assert!(matches!(s.reference(), Err(ConfigError::FixtureMissing(_))));
    }

    #[test]
    fn images_fixture_parses() {
        let imgs = parse_images("[[image]]\npcr = 0\nname = 'boot'\ndata = 'abc'\n").unwrap();
        assert_eq!(imgs, vec![BootImage::new(0, "boot", b"abc".to_vec())]);
    }
}
