// Licensed under the Apache-2.0 license
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use stb_core::boot::{BootImage, ReferenceTable};
use stb_core::pca::PrivacyCa;
use stb_core::services::charging::ChargingProvider;
use stb_core::services::update::UpdateService;
use stb_core::services::vendor::{ChargingModel, ServiceEntry, ServiceProvider};
use stb_core::services::TimeAuthority;
use stb_core::stb::{BoxConfig, SetTopBox};
use stb_core::tpm::Manufacturer;

pub const NOW: u64 = 1_700_000_000;
pub const STREAM: u16 = 7;
pub const TARIFF: u32 = 5;

pub fn images() -> Vec<BootImage> {
    vec![
        BootImage::new(0, "bootloader", b"bootloader v1".to_vec()),
        BootImage::new(1, "kernel", b"kernel v1".to_vec()),
        BootImage::new(2, "cas-firmware", b"cas firmware 1.0".to_vec()),
    ]
}

pub struct World {
    pub rng: ChaCha20Rng,
    pub manufacturer: Manufacturer,
    pub pca: PrivacyCa,
    pub provider: ServiceProvider,
    pub charging: ChargingProvider,
    pub tsa: TimeAuthority,
    pub updates: UpdateService,
    pub reference: ReferenceTable,
}

impl World {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let manufacturer = Manufacturer::new("acme-tpm", &mut rng);
        let mut pca = PrivacyCa::new("pca-1", &mut rng);
        pca.trust_manufacturer("acme-tpm", manufacturer.root_public());
        let mut reference = ReferenceTable::default();
        reference.push(ReferenceTable::configuration_for("stock", &images()));
        let mut provider = ServiceProvider::new("vendor-1", pca.public(), reference.clone(), &mut rng);
        provider.add_service(ServiceEntry {
            stream_id: STREAM,
            cas_id: "cas-a".into(),
            description: "news".into(),
            tariff: TARIFF,
            online_gated: false,
        });
        let tsa = TimeAuthority::new("tsa-1", &mut rng);
        let charging = ChargingProvider::new("charge-1", pca.public(), tsa.public(), reference.clone(), &mut rng);
        let updates = UpdateService::new("updates-1", pca.public(), &mut rng);
        Self {
            rng,
            manufacturer,
            pca,
            provider,
            charging,
            tsa,
            updates,
            reference,
        }
    }

    /// A box fresh from the shop, trusting every service in this world.
    pub fn new_box(&mut self, name: &str, deposit: u64) -> SetTopBox {
        let tpm = self.manufacturer.manufacture("stb-3000", &mut self.rng);
        let config = BoxConfig {
            model: "stb-3000".into(),
            hw_revision: "rev-b".into(),
            firmware_version: "1.0".into(),
            customer_id: format!("customer-of-{name}"),
            owner_auth: [0x42; 20],
            boot_images: images(),
            initial_deposit: deposit,
        };
        let mut stb = SetTopBox::new(name, tpm, config, self.pca.id(), self.pca.public(), self.pca.encryption_public())
            .unwrap();
        stb.trust_provider(self.provider.id(), self.provider.public());
        stb.trust_time_authority(self.tsa.public());
        stb.trust_charging(self.charging.id(), self.charging.public(), self.charging.encryption_public());
        stb.trust_update_service(self.updates.id(), self.updates.public());
        stb
    }

    pub fn enroll(&mut self, stb: &mut SetTopBox) {
        stb.take_ownership_online(&mut self.pca, NOW, |b| b).unwrap();
        stb.certify_bind_key().unwrap();
        self.charging.add_contract(stb.credential().unwrap()).unwrap();
    }

    pub fn register(&mut self, stb: &mut SetTopBox, model: ChargingModel) {
        let offer = self.provider.make_offer();
        let req = stb.registration_request(&offer, STREAM, model).unwrap();
        let query = self.provider.validity_query(stb.identity_label().unwrap());
        let validity = self.pca.check_validity(&query);
        let receipt = self.provider.register(&req, &validity, NOW).unwrap();
        stb.handle_receipt(&receipt).unwrap();
    }

    pub fn ready_box(&mut self, name: &str, deposit: u64, model: ChargingModel) -> SetTopBox {
        let mut stb = self.new_box(name, deposit);
        self.enroll(&mut stb);
        self.register(&mut stb, model);
        stb
    }
}
