// Licensed under the Apache-2.0 license

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use common::{World, NOW, STREAM, TARIFF};
use stb_core::boot::{boot, BootImage};
use stb_core::crypto::Digest;
use stb_core::pca::ValidityStatus;
use stb_core::scrambler::synthetic_content;
use stb_core::services::charging::SealedVoucher;
use stb_core::services::vendor::ChargingModel;
use stb_core::stb::{BoxError, SetTopBox};
use stb_core::tpm::{Manufacturer, TpmError, PCR_COUNT};

const PERIOD: u32 = 2;

fn vouchers(w: &mut World, stb: &mut SetTopBox, amounts: &[u64]) -> Vec<SealedVoucher> {
    amounts
        .iter()
        .map(|&a| {
            let ch = w.charging.challenge("top-up");
            let req = stb.top_up_request(&ch, a).unwrap();
            w.charging.top_up(&req, NOW).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unseal_succeeds_exactly_in_the_sealed_state(
        payload in prop::collection::vec(any::<u8>(), 0..64),
        imgs in prop::collection::vec((0u8..6, prop::collection::vec(any::<u8>(), 1..16)), 1..6),
        reg in 0usize..PCR_COUNT,
        bump in any::<[u8; 32]>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let m = Manufacturer::new("acme-tpm", &mut rng);
        let mut tpm = m.manufacture("stb-3000", &mut rng);
        let imgs: Vec<BootImage> = imgs.into_iter().enumerate()
            .map(|(n, (p, i))| BootImage::new(p, format!("c{n}"), i)).collect();
        let log = boot(&mut tpm, &imgs).unwrap();
        let sel = log.touched();
        let blob = tpm.seal_current(&payload, &sel).unwrap();
        let plain = tpm.unseal(&blob).unwrap();
        prop_assert_eq!(plain.as_slice(), payload.as_slice());

        let mut moved = tpm.clone();
        moved.pcr_extend(reg, &Digest(bump)).unwrap();
        let res = moved.unseal(&blob);
        if sel.contains(&(reg as u8)) {
            prop_assert!(matches!(res, Err(TpmError::StateMismatch(_))));
        } else {
            let plain = res.unwrap();
            prop_assert_eq!(plain.as_slice(), payload.as_slice());
        }
    }

    #[test]
    fn a_nonce_is_consumed_at_most_once(picks in prop::collection::vec(0u8..12, 0..40), seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let m = Manufacturer::new("acme-tpm", &mut rng);
        let mut tpm = m.manufacture("stb-3000", &mut rng);
        let mut fresh = 0;
        for p in &picks {
            if tpm.consume_nonce(&[*p; 32]) {
                fresh += 1;
            }
        }
        let distinct: std::collections::BTreeSet<_> = picks.iter().collect();
        prop_assert_eq!(fresh, distinct.len());
        prop_assert_eq!(tpm.nonce_cache_len(), distinct.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn applying_a_multiset_of_vouchers_equals_applying_its_set(
        amounts in prop::collection::vec(1u64..500, 1..4),
        order in prop::collection::vec((0usize..4, 1usize..4), 1..10),
        seed in any::<u64>(),
    ) {
        let mut w = World::new(seed);
        let mut stb = w.ready_box("m", 7, ChargingModel::Prepaid);
        let vs = vouchers(&mut w, &mut stb, &amounts);
        let mut used = std::collections::BTreeSet::new();
        for (i, times) in order {
            let i = i % vs.len();
            for _ in 0..times {
                match stb.apply_top_up(&vs[i]) {
                    Ok(_) => prop_assert!(used.insert(i)),
                    Err(e) => {
                        prop_assert_eq!(e, BoxError::ReplayDetected);
                        prop_assert!(used.contains(&i));
                    }
                }
            }
        }
        let expected: u64 = 7 + used.iter().map(|&i| amounts[i]).sum::<u64>();
        prop_assert_eq!(stb.deposit(), expected);
    }

    #[test]
    fn deposit_is_conserved_over_top_ups_and_viewing(
        steps in prop::collection::vec(prop_oneof![
            (1u64..40).prop_map(Step::TopUp),
            (1usize..5).prop_map(Step::Watch),
        ], 1..8),
        initial in 0u64..30,
        seed in any::<u64>(),
    ) {
        let mut w = World::new(seed);
        let mut stb = w.ready_box("d", initial, ChargingModel::Prepaid);
        let air = w.provider.broadcast(STREAM, &synthetic_content("p", 40 * PERIOD as usize), PERIOD).unwrap();
        let mut at = 0usize;
        let mut played = 0u64;
        for s in steps {
            match s {
                Step::TopUp(a) => {
                    let v = vouchers(&mut w, &mut stb, &[a]);
                    stb.apply_top_up(&v[0]).unwrap();
                }
                Step::Watch(n) => {
                    let end = (at + n * PERIOD as usize).min(air.len());
                    let (out, res) = stb.watch(&air[at..end], NOW + 60, None);
                    played += (out.len() / PERIOD as usize) as u64;
                    if let Err(e) = res {
                        prop_assert_eq!(e, BoxError::DepositExhausted);
                        prop_assert!(stb.deposit() < TARIFF as u64);
                    }
                    at += out.len();
                }
            }
            let l = stb.deposit_ledger();
            prop_assert_eq!(l.initial + l.applied - l.charged, stb.deposit());
        }
        prop_assert_eq!(stb.deposit_ledger().charged, played * TARIFF as u64);
        prop_assert_eq!(stb.cas("cas-a").unwrap().total_released(), played);
    }

    #[test]
    fn push_and_pull_settle_identically(periods in 1usize..6, dup in any::<bool>(), seed in any::<u64>()) {
        let mut w = World::new(seed);
        let mut stb = w.ready_box("s", 0, ChargingModel::Postpaid);
        let air = w.provider.broadcast(STREAM, &synthetic_content("q", periods * PERIOD as usize), PERIOD).unwrap();
        let (_, res) = stb.watch(&air, NOW + 60, Some(&mut w.tsa));
        res.unwrap();
        let label = stb.identity_label().unwrap().to_string();

        let (mut push_charging, mut push_box) = (w.charging.clone(), stb.clone());
        let mut batch = push_box.push_batch();
        if dup {
            batch.records.extend(batch.records.clone());
        }
        let push_ack = push_charging.settle(&batch);
        push_box.handle_ack(&push_ack).unwrap();

        let pull = w.charging.pull_request();
        let batch = stb.answer_pull(&pull).unwrap();
        let pull_ack = w.charging.settle(&batch);
        stb.handle_ack(&pull_ack).unwrap();

        prop_assert_eq!(push_charging.invoice(&label), w.charging.invoice(&label));
        prop_assert_eq!(w.charging.invoice(&label), stb.metered_units());
        let set = |a: &[Vec<u8>]| a.iter().cloned().collect::<std::collections::BTreeSet<_>>();
        prop_assert_eq!(set(&push_ack.settled), set(&pull_ack.settled));
        prop_assert_eq!(push_box.pending_record_count(), 0);
        prop_assert_eq!(stb.pending_record_count(), 0);
    }

    #[test]
    fn validity_is_good_until_revoked_then_revoked_forever(revoke_at in 0usize..6, queries in 1usize..8, seed in any::<u64>()) {
        let mut w = World::new(seed);
        let stb = w.ready_box("v", 0, ChargingModel::Prepaid);
        let label = stb.identity_label().unwrap();
        let mut revoked = false;
        for q in 0..queries {
            if q == revoke_at {
                w.pca.revoke(label).unwrap();
                revoked = true;
            }
            let want = if revoked { ValidityStatus::Revoked } else { ValidityStatus::Good };
            prop_assert_eq!(w.pca.status(label), want);
        }
        prop_assert_eq!(w.pca.status("pid-never-issued"), ValidityStatus::Unknown);
    }
}

#[derive(Debug, Clone)]
enum Step {
    TopUp(u64),
    Watch(usize),
}
