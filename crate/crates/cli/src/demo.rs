//! Scripted run of the protocol with real ECDSA signatures, printing the
//! size of every message that crosses a link.

use std::collections::BTreeMap;
use std::sync::Arc;

use anyhow::{anyhow, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use certforest::authority::{CaUpdate, CertificateAuthority};
use certforest::forest::{Epoch, EpochConfig};
use certforest::hash_tree::{Digest, SmtHasher};
use certforest::node::{run_session, Links, NodeConfig, NodeState, UpdateMemo, VerifiedCache};
use certforest::wire::crypto::EcdsaSigner;
use certforest::wire::{Codec, Message, WireTransport};

const CLVL: u8 = 7;

struct Demo {
    cfg: EpochConfig,
    codec: Codec,
    ca: CertificateAuthority,
    now: u32,
}

impl Demo {
    fn size(&self, msg: Message) -> usize {
        self.codec.encoded_len(&msg)
    }

    fn publish(&mut self) -> Result<CaUpdate> {
        self.now += 3_600;
        let upd = self.ca.build_update(self.now)?;
        println!(
            "  CA_UPDATE {} B ({} roots, {} proofs)",
            self.size(Message::CaUpdate(upd.clone())),
            upd.changed_roots.len(),
            upd.update_pois.len()
        );
        Ok(upd)
    }

    fn meet(&self, who: (&str, &mut NodeState), peer: (&str, &mut NodeState)) -> Result<()> {
        println!("  {} meets {}", who.0, peer.0);
        let mut link = WireTransport::logging(self.codec);
        let mut ca_link = WireTransport::logging(self.codec);
        let r = run_session(
            who.1,
            peer.1,
            Links {
                peer: &mut link,
                ca: &mut ca_link,
            },
            &self.ca,
        )?;
        for (kind, len) in link.log.unwrap_or_default() {
            println!("    node<->node {kind:?} {len} B");
        }
        for (kind, len) in ca_link.log.unwrap_or_default() {
            println!("    node<->CA   {kind:?} {len} B");
        }
        for (side, ev) in &r.events {
            let name = if *side == certforest::node::Side::A { who.0 } else { peer.0 };
            println!("    {name}: {ev:?}");
        }
        println!("    total {} B between nodes, {} B with the CA", r.bytes, r.ca_bytes);
        Ok(())
    }
}

pub fn run(population: usize, seed: u64) -> Result<()> {
    if population < 200 {
        return Err(super::usage("--nodes must be at least 200 for the demo"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EpochConfig::default();
    let week = cfg.epoch_duration;
    let t0 = week * 2_900;
    let hasher = SmtHasher::sha256();
    let signer = EcdsaSigner::random(&mut rng);
    let mut ca = CertificateAuthority::new(cfg, hasher, Box::new(signer), t0)?;
    let lifetime = u32::from(cfg.epoch_count) * week;
    let certs: Vec<(Digest, u32)> = (0..population)
        .map(|_| (Digest(rng.gen()), t0 + rng.gen_range(0..lifetime)))
        .collect();
    ca.bootstrap(certs.iter().copied(), t0)?;
    let codec = Codec::new(&cfg);
    println!("# config: {{\"command\":\"demo\",\"nodes\":{population},\"clvl\":{CLVL}}}");
    println!("# seed: {seed}");
    println!("primer {} B, contact {} B", codec.primer_len(), codec.contact_len());
    let mut d = Demo { cfg, codec, ca, now: t0 };

    let epoch: Epoch = d.ca.base_epoch() + 20;
    let alice_cert = Digest(rng.gen());
    println!("\n[1] issuance: a new certificate in epoch {epoch}");
    d.ca.issue_now(alice_cert, d.cfg.epoch_start(epoch) + 100)?;
    let first = d.publish()?;
    let resp = d.ca.answer_poi_request(&alice_cert)?;
    println!("  CA_POI_RESPONSE {} B to the new holder", d.size(Message::CaPoiResponse(resp.clone())));

    let verifier = d.ca.verifier();
    let node_cfg = NodeConfig::default();
    let mut alice = NodeState::new(node_cfg, verifier.clone(), d.ca.forest().clone());
    alice.enroll(alice_cert, epoch, d.ca.forest().clone(), resp.poi);

    // same-epoch peers, ordered by how much of their path they share with alice
    let mut mates: Vec<Digest> = certs
        .iter()
        .map(|c| c.0)
        .filter(|c| d.ca.record(c).is_some_and(|r| r.epoch == epoch))
        .collect();
    mates.sort_by_key(|c| alice_cert.common_prefix_len(c));
    if mates.len() < 4 {
        return Err(anyhow!("population too small: epoch {epoch} has {} certificates", mates.len()));
    }
    let other = certs
        .iter()
        .map(|c| c.0)
        .find(|c| d.ca.record(c).is_some_and(|r| r.epoch != epoch))
        .ok_or_else(|| anyhow!("no certificate outside epoch {epoch}"))?;
    let enroll = |cert: Digest, d: &Demo| -> Result<NodeState> {
        let rec = d.ca.record(&cert).ok_or_else(|| anyhow!("unknown certificate"))?;
        let poi = d.ca.answer_poi_request(&cert)?.poi;
        let mut n = NodeState::new(node_cfg, verifier.clone(), d.ca.forest().clone());
        n.enroll(cert, rec.epoch, d.ca.forest().clone(), poi);
        Ok(n)
    };
    let mut bob = enroll(*mates.last().expect("non-empty"), &d)?;
    let caches: BTreeMap<Epoch, Arc<VerifiedCache>> = (d.ca.base_epoch()..=d.ca.forest().newest_epoch())
        .map(|e| Ok((e, Arc::new(VerifiedCache::new(hasher, d.ca.level_cache(e, CLVL)?)))))
        .collect::<Result<_>>()?;
    let mut carol = enroll(other, &d)?.with_caches(caches);
    let mut dave = enroll(other, &d)?;
    println!(
        "  bob shares epoch {epoch}; carol caches level {CLVL} ({} B per epoch); dave is elsewhere",
        32usize << CLVL
    );
    let _ = first;

    let deliver = |upd: &CaUpdate, nodes: &mut [&mut NodeState]| {
        let mut memo = UpdateMemo::new();
        for n in nodes {
            n.apply_ca_update(upd, &mut memo);
        }
    };

    println!("\n[2] revocation in epoch {epoch}; alice misses the update");
    d.ca.revoke(&mates[0])?;
    let upd = d.publish()?;
    deliver(&upd, &mut [&mut bob, &mut carol, &mut dave]);

    println!("\n[3] primer exchange, forest sync and direct repair");
    d.meet(("alice", &mut alice), ("bob", &mut bob))?;

    println!("\n[4] another revocation missed by alice; a cacher repairs");
    let victim = mates[1..mates.len() - 1]
        .iter()
        .copied()
        .find(|c| alice_cert.common_prefix_len(c) < u16::from(CLVL))
        .ok_or_else(|| anyhow!("no suitable certificate to revoke"))?;
    d.ca.revoke(&victim)?;
    let upd = d.publish()?;
    deliver(&upd, &mut [&mut bob, &mut carol, &mut dave]);
    d.meet(("alice", &mut alice), ("carol", &mut carol))?;

    println!("\n[5] a third missed revocation; alice gives up after one fruitless peer and asks the CA");
    let mut impatient = NodeState::new(
        NodeConfig {
            give_up_threshold: 1,
            ..node_cfg
        },
        verifier.clone(),
        d.ca.forest().clone(),
    );
    impatient.enroll(alice_cert, epoch, alice.forest().clone(), alice.own_poi().clone());
    d.ca.revoke(&mates[2])?;
    let upd = d.publish()?;
    deliver(&upd, &mut [&mut dave]);
    d.meet(("alice", &mut impatient), ("dave", &mut dave))?;

    println!("\n[6] heartbeat and epoch change");
    d.publish()?;
    let next = d.ca.forest().newest_epoch() + 1;
    for _ in 0..3 {
        d.ca.stage_certificate(Digest(rng.gen()), d.cfg.epoch_start(next) + rng.gen_range(0..week))?;
    }
    let ec = d.ca.epoch_change(t0 + week)?;
    println!("  EPOCH_CHANGE {} B ({} leaves)", d.size(Message::EpochChange(ec.clone())), ec.leaves.len());
    Ok(())
}
