// Licensed under the Apache-2.0 license

//! Scenarios and fixtures compiled into the binary.

macro_rules! files {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../scenarios/", $name)))),*]
    };
}

const SCENARIOS: &[(&str, &str)] = files![
    "e2e-purchase.toml",
    "postpaid-settle.toml",
    "replay-attack.toml",
    "tamper-boot.toml",
    "fake-tpm.toml",
    "expired-key.toml",
    "daily-cap.toml",
    "multi-cas.toml",
    "firmware-update.toml",
    "offline-ownership.toml",
    "eavesdrop-privacy.toml",
];

const FIXTURES: &[(&str, &str)] = files![
    "fixtures/images.toml",
    "fixtures/reference.toml",
    "fixtures/boxes.toml",
    "fixtures/firmware.toml",
    "fixtures/acl.toml",
];

pub fn scenario_names() -> impl Iterator<Item = &'static str> {
    SCENARIOS.iter().map(|(n, _)| n.trim_end_matches(".toml"))
}

pub fn scenario(name: &str) -> Option<&'static str> {
    let file = format!("{}.toml", name.trim_end_matches(".toml"));
    SCENARIOS.iter().find(|(n, _)| *n == file).map(|(_, t)| *t)
}

pub fn fixture(path: &str) -> Option<&'static str> {
    let path = path.trim_start_matches("./");
    FIXTURES.iter().find(|(n, _)| *n == path).map(|(_, t)| *t)
}
