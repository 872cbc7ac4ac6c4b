// Licensed under the Apache-2.0 license

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stb_core::boot::ReferenceTable;
use stb_core::stb::install_firmware;
use stb_core::scrambler::{
    content_digest, derive_cw, descramble, packetize, read_stream, scramble_stream, synthetic_content, write_stream,
    EntitlementSecret,
};
use stb_sim::scenario::{parse_images, FirmwareFile};
use stb_sim::verify::verify_transcript;
use stb_sim::{run_scenario, Adversary, Scenario};

#[derive(Parser)]
#[command(name = "stb-sim", about = "Trusted set-top box protocol simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or a bundled scenario by name.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// replay, tamper-log, fake-tpm, eavesdrop or relay-tamper
        #[arg(long)]
        adversary: Vec<String>,
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Re-check a transcript against its `.bin` sidecar.
    VerifyTranscript {
        path: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Print the reference table for a boot image set.
    PcrReference {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "stock")]
        name: String,
        /// Also list the configuration after installing this firmware.
        #[arg(long)]
        firmware: Option<PathBuf>,
    },
    /// Write a scrambled stream fixture.
    StreamEmit {
        #[arg(long)]
        stream: u16,
        #[arg(long)]
        periods: u32,
        #[arg(long, default_value_t = stb_core::scrambler::DEFAULT_PERIOD_PACKETS)]
        period_packets: u32,
        #[arg(long, default_value = "content")]
        content: String,
        /// 16-byte entitlement secret in hex.
        #[arg(long)]
        secret: String,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Descramble a stream fixture with an entitlement secret.
    StreamDescramble {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long)]
        secret: String,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// List bundled scenarios.
    Scenarios,
}

fn secret(hex_str: &str) -> Result<EntitlementSecret, String> {
    hex::decode(hex_str)
        .ok()
        .and_then(|b| EntitlementSecret::from_slice(&b))
        .ok_or_else(|| "secret must be 32 hex digits".to_string())
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), String> {
    std::fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn sidecar_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn run(cmd: Command) -> Result<bool, String> {
    match cmd {
        Command::Simulate {
            scenario,
            seed,
            adversary,
            transcript,
            report,
        } => {
            let sc = Scenario::load(&scenario).map_err(|e| e.to_string())?;
            let first_box = sc
                .config
                .endpoints
                .iter()
                .find(|e| e.kind.name() == "box")
                .map(|e| e.name.as_str());
            let extra = adversary
                .iter()
                .map(|k| Adversary::from_kind(k, first_box))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            let out = run_scenario(&sc, seed, &extra).map_err(|e| e.to_string())?;
            if let Some(t) = transcript {
                write(&t, out.transcript.as_bytes())?;
                write(&sidecar_path(&t), &out.sidecar)?;
            }
            let text = out.report.to_text();
            match report {
                Some(r) => write(&r, text.as_bytes())?,
                None => print!("{text}"),
            }
            Ok(out.report.all_passed())
        }
        Command::VerifyTranscript { path, sidecar } => {
            let text = String::from_utf8(read(&path)?).map_err(|_| "transcript is not UTF-8".to_string())?;
            let side = read(&sidecar.unwrap_or_else(|| sidecar_path(&path)))?;
            let summary = verify_transcript(&text, &side).map_err(|e| e.to_string())?;
            print!("{}", summary.to_text());
            Ok(summary.is_clean())
        }
        Command::PcrReference { images, name, firmware } => {
            let text = String::from_utf8(read(&images)?).map_err(|_| "images file is not UTF-8".to_string())?;
            let imgs = parse_images(&text)?;
            let mut table = ReferenceTable::default();
            table.push(ReferenceTable::configuration_for(&name, &imgs));
            if let Some(fw) = firmware {
                let text = String::from_utf8(read(&fw)?).map_err(|_| "firmware file is not UTF-8".to_string())?;
                let fw: FirmwareFile = toml::from_str(&text).map_err(|e| e.to_string())?;
                let mut updated = imgs.clone();
                install_firmware(&mut updated, fw.image.as_bytes());
                table.push(ReferenceTable::configuration_for(&format!("{name}-fw-{}", fw.version), &updated));
            }
            print!("{}", table.to_toml());
            Ok(true)
        }
        Command::StreamEmit {
            stream,
            periods,
            period_packets,
            content,
            secret: s,
            output,
        } => {
            let secret = secret(&s)?;
            let period_packets = period_packets.max(1);
            let data = synthetic_content(&content, (periods * period_packets) as usize);
            let clear = packetize(stream, &data, period_packets);
            let air = scramble_stream(&secret, &clear).map_err(|e| e.to_string())?;
            write(&output, &write_stream(&air))?;
            println!("{} packets, clear digest {}", air.len(), content_digest(&clear).to_hex());
            Ok(true)
        }
        Command::StreamDescramble { input, secret: s, output } => {
            let secret = secret(&s)?;
            let air = read_stream(&read(&input)?).map_err(|e| e.to_string())?;
            let clear = air
                .iter()
                .map(|p| descramble(&derive_cw(&secret, p.stream_id, p.period_index), p))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            if let Some(o) = output {
                write(&o, &write_stream(&clear))?;
            }
            println!("{} packets, clear digest {}", clear.len(), content_digest(&clear).to_hex());
            Ok(true)
        }
        Command::Scenarios => {
            for n in stb_sim::bundled::scenario_names() {
                println!("{n}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
