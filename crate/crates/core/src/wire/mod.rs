//! Byte layouts of everything that crosses a link. Multi-byte integers are
//! big-endian. Messages carry no type tag; the receiver knows what it
//! expects at each protocol step and decodes accordingly.

pub mod crypto;

use thiserror::Error;

use crate::authority::{CaUpdate, EpochChangeUpdate};
use crate::forest::{Epoch, EpochConfig, Parities, Primer};
use crate::hash_tree::{Digest, PathBitmap, ProofOfInclusion};
use crate::repair::{LevelCache, MAX_CACHE_LEVEL};
use crypto::{Signature, SIGNATURE_LEN};

pub const CONTACT_LEN_DEFAULT: usize = 50 + SIGNATURE_LEN + 1;

/// Relative-epoch value meaning "no usable certificate".
pub const NO_EPOCH: u8 = 63;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{kind} at byte {offset}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeErrorKind {
    #[error("buffer ends early, {needed} more bytes needed")]
    Truncated { needed: usize },
    #[error("{extra} unexpected trailing bytes")]
    Trailing { extra: usize },
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn err(&self, kind: DecodeErrorKind) -> DecodeError {
        DecodeError { offset: self.pos, kind }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(self.err(DecodeErrorKind::Truncated { needed: n - rest }));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn digest(&mut self) -> Result<Digest, DecodeError> {
        Ok(Digest(self.take(32)?.try_into().expect("32 bytes")))
    }

    fn signature(&mut self) -> Result<Signature, DecodeError> {
        Ok(Signature(self.take(SIGNATURE_LEN)?.try_into().expect("64 bytes")))
    }

    fn finish(&self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            extra => Err(self.err(DecodeErrorKind::Trailing { extra })),
        }
    }
}

/// Info byte of a contact message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ContactInfo {
    /// Epoch of the sender's certificate relative to its window.
    pub rel_epoch: Option<u8>,
    pub has_lc: bool,
    pub lc_fresh: bool,
}

impl ContactInfo {
    pub fn to_byte(self) -> u8 {
        let rel = self.rel_epoch.unwrap_or(NO_EPOCH).min(NO_EPOCH);
        (rel << 2) | (u8::from(self.has_lc) << 1) | u8::from(self.lc_fresh)
    }

    pub fn from_byte(b: u8) -> Self {
        let rel = b >> 2;
        ContactInfo {
            rel_epoch: (rel != NO_EPOCH).then_some(rel),
            has_lc: b & 0b10 != 0,
            lc_fresh: b & 0b01 != 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContactMessage {
    pub primer: Primer,
    pub sig: Signature,
    pub info: ContactInfo,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RootResponse {
    pub primer: Primer,
    pub sig: Signature,
    /// Roots of the requested slots in request order, each slot newest
    /// first.
    pub roots: Vec<Digest>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaPoiResponse {
    pub poi: ProofOfInclusion,
    pub primer: Primer,
    pub sig: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Contact(ContactMessage),
    ParityRequest(Vec<u8>),
    RootResponse(RootResponse),
    PoiRequest,
    PoiResponse(ProofOfInclusion),
    LcRepairRequest(ProofOfInclusion),
    LcRepairResponse(ProofOfInclusion),
    /// Relative epochs whose caches the sender wants.
    LcSyncRequest(Vec<u8>),
    LcSyncResponse(Vec<LevelCache>),
    CaPoiRequest(Digest),
    CaPoiResponse(CaPoiResponse),
    CaUpdate(CaUpdate),
    EpochChange(EpochChangeUpdate),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Contact,
    ParityRequest,
    RootResponse,
    PoiRequest,
    PoiResponse,
    LcRepairRequest,
    LcRepairResponse,
    LcSyncRequest,
    LcSyncResponse,
    CaPoiRequest,
    CaPoiResponse,
    CaUpdate,
    EpochChange,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Contact(_) => MessageKind::Contact,
            Message::ParityRequest(_) => MessageKind::ParityRequest,
            Message::RootResponse(_) => MessageKind::RootResponse,
            Message::PoiRequest => MessageKind::PoiRequest,
            Message::PoiResponse(_) => MessageKind::PoiResponse,
            Message::LcRepairRequest(_) => MessageKind::LcRepairRequest,
            Message::LcRepairResponse(_) => MessageKind::LcRepairResponse,
            Message::LcSyncRequest(_) => MessageKind::LcSyncRequest,
            Message::LcSyncResponse(_) => MessageKind::LcSyncResponse,
            Message::CaPoiRequest(_) => MessageKind::CaPoiRequest,
            Message::CaPoiResponse(_) => MessageKind::CaPoiResponse,
            Message::CaUpdate(_) => MessageKind::CaUpdate,
            Message::EpochChange(_) => MessageKind::EpochChange,
        }
    }
}

pub fn poi_len(poi: &ProofOfInclusion) -> usize {
    32 + 32 + 2 + 32 * poi.path.len()
}

pub fn encode_poi(poi: &ProofOfInclusion, out: &mut Vec<u8>) {
    out.extend_from_slice(&poi.leaf_hash.0);
    out.extend_from_slice(&poi.path_bitmap.to_be_bytes());
    out.extend_from_slice(&(poi.path.len() as u16).to_be_bytes());
    for d in &poi.path {
        out.extend_from_slice(&d.0);
    }
}

fn read_poi(r: &mut Reader<'_>) -> Result<ProofOfInclusion, DecodeError> {
    let leaf_hash = r.digest()?;
    let bitmap = PathBitmap::from_be_bytes(r.take(32)?.try_into().expect("32 bytes"));
    let at = r.pos;
    let count = r.u16()? as usize;
    if count != bitmap.count_ones() as usize {
        return Err(DecodeError {
            offset: at,
            kind: DecodeErrorKind::Invalid("path count differs from bitmap"),
        });
    }
    let path = (0..count).map(|_| r.digest()).collect::<Result<_, _>>()?;
    Ok(ProofOfInclusion {
        leaf_hash,
        path_bitmap: bitmap,
        path,
    })
}

pub fn level_cache_len(lc: &LevelCache) -> usize {
    1 + 2 + 32 * lc.entries.len()
}

pub fn encode_level_cache(lc: &LevelCache, out: &mut Vec<u8>) {
    out.push(lc.clvl);
    out.extend_from_slice(&lc.epoch.to_be_bytes());
    for e in &lc.entries {
        out.extend_from_slice(&e.0);
    }
}

fn read_level_cache(r: &mut Reader<'_>) -> Result<LevelCache, DecodeError> {
    let at = r.pos;
    let clvl = r.u8()?;
    if clvl == 0 || clvl > MAX_CACHE_LEVEL {
        return Err(DecodeError {
            offset: at,
            kind: DecodeErrorKind::Invalid("cache level outside 1..=16"),
        });
    }
    let epoch = r.u16()?;
    let entries = (0..1usize << clvl).map(|_| r.digest()).collect::<Result<_, _>>()?;
    Ok(LevelCache { clvl, epoch, entries })
}

/// Encoder/decoder for one forest configuration (the primer length depends
/// on the parity layout).
#[derive(Clone, Copy, Debug)]
pub struct Codec {
    parity_len: usize,
}

impl Codec {
    pub fn new(cfg: &EpochConfig) -> Self {
        Codec {
            parity_len: cfg.parity_len(),
        }
    }

    pub fn primer_len(&self) -> usize {
        32 + self.parity_len + 4
    }

    pub fn contact_len(&self) -> usize {
        self.primer_len() + SIGNATURE_LEN + 1
    }

    fn read_primer(&self, r: &mut Reader<'_>) -> Result<Primer, DecodeError> {
        let root = r.digest()?;
        let mut parities = Parities::new();
        parities
            .try_extend_from_slice(r.take(self.parity_len)?)
            .expect("validated parity length");
        let timestamp = r.u32()?;
        Ok(Primer {
            root,
            parities,
            timestamp,
        })
    }

    pub fn decode_primer(&self, bytes: &[u8]) -> Result<Primer, DecodeError> {
        let mut r = Reader::new(bytes);
        let p = self.read_primer(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    pub fn encoded_len(&self, msg: &Message) -> usize {
        let signed = self.primer_len() + SIGNATURE_LEN;
        match msg {
            Message::Contact(_) => self.contact_len(),
            Message::ParityRequest(slots) => 1 + slots.len(),
            Message::RootResponse(rr) => signed + 32 * rr.roots.len(),
            Message::PoiRequest => 0,
            Message::PoiResponse(p) | Message::LcRepairRequest(p) | Message::LcRepairResponse(p) => poi_len(p),
            Message::LcSyncRequest(e) => 1 + e.len(),
            Message::LcSyncResponse(lcs) => 1 + lcs.iter().map(level_cache_len).sum::<usize>(),
            Message::CaPoiRequest(_) => 32,
            Message::CaPoiResponse(r) => poi_len(&r.poi) + signed,
            Message::CaUpdate(u) => {
                signed
                    + 2
                    + 34 * u.changed_roots.len()
                    + 2
                    + u.update_pois.iter().map(|(_, p)| 2 + poi_len(p)).sum::<usize>()
            }
            Message::EpochChange(u) => signed + 2 + 4 + 32 * u.leaves.len(),
        }
    }

    pub fn encode(&self, msg: &Message) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len(msg));
        let signed = |out: &mut Vec<u8>, p: &Primer, s: &Signature| {
            p.encode_into(out);
            out.extend_from_slice(&s.0);
        };
        match msg {
            Message::Contact(c) => {
                signed(&mut out, &c.primer, &c.sig);
                out.push(c.info.to_byte());
            }
            Message::ParityRequest(slots) | Message::LcSyncRequest(slots) => {
                out.push(slots.len() as u8);
                out.extend_from_slice(slots);
            }
            Message::RootResponse(rr) => {
                signed(&mut out, &rr.primer, &rr.sig);
                for d in &rr.roots {
                    out.extend_from_slice(&d.0);
                }
            }
            Message::PoiRequest => {}
            Message::PoiResponse(p) | Message::LcRepairRequest(p) | Message::LcRepairResponse(p) => {
                encode_poi(p, &mut out)
            }
            Message::LcSyncResponse(lcs) => {
                out.push(lcs.len() as u8);
                for lc in lcs {
                    encode_level_cache(lc, &mut out);
                }
            }
            Message::CaPoiRequest(d) => out.extend_from_slice(&d.0),
            Message::CaPoiResponse(r) => {
                encode_poi(&r.poi, &mut out);
                signed(&mut out, &r.primer, &r.sig);
            }
            Message::CaUpdate(u) => {
                signed(&mut out, &u.primer, &u.sig);
                out.extend_from_slice(&(u.changed_roots.len() as u16).to_be_bytes());
                for (e, r) in &u.changed_roots {
                    out.extend_from_slice(&e.to_be_bytes());
                    out.extend_from_slice(&r.0);
                }
                out.extend_from_slice(&(u.update_pois.len() as u16).to_be_bytes());
                for (e, p) in &u.update_pois {
                    out.extend_from_slice(&e.to_be_bytes());
                    encode_poi(p, &mut out);
                }
            }
            Message::EpochChange(u) => {
                signed(&mut out, &u.primer, &u.sig);
                out.extend_from_slice(&u.epoch.to_be_bytes());
                out.extend_from_slice(&(u.leaves.len() as u32).to_be_bytes());
                for l in &u.leaves {
                    out.extend_from_slice(&l.0);
                }
            }
        }
        out
    }

    pub fn decode(&self, kind: MessageKind, bytes: &[u8]) -> Result<Message, DecodeError> {
        let mut r = Reader::new(bytes);
        let msg = match kind {
            MessageKind::Contact => {
                let primer = self.read_primer(&mut r)?;
                let sig = r.signature()?;
                let info = ContactInfo::from_byte(r.u8()?);
                Message::Contact(ContactMessage { primer, sig, info })
            }
            MessageKind::ParityRequest | MessageKind::LcSyncRequest => {
                let n = r.u8()? as usize;
                let items = r.take(n)?.to_vec();
                if kind == MessageKind::ParityRequest {
                    Message::ParityRequest(items)
                } else {
                    Message::LcSyncRequest(items)
                }
            }
            MessageKind::RootResponse => {
                let primer = self.read_primer(&mut r)?;
                let sig = r.signature()?;
                if !r.remaining().is_multiple_of(32) {
                    return Err(r.err(DecodeErrorKind::Invalid("root list not a multiple of 32 bytes")));
                }
                let roots = (0..r.remaining() / 32).map(|_| r.digest()).collect::<Result<_, _>>()?;
                Message::RootResponse(RootResponse { primer, sig, roots })
            }
            MessageKind::PoiRequest => Message::PoiRequest,
            MessageKind::PoiResponse => Message::PoiResponse(read_poi(&mut r)?),
            MessageKind::LcRepairRequest => Message::LcRepairRequest(read_poi(&mut r)?),
            MessageKind::LcRepairResponse => Message::LcRepairResponse(read_poi(&mut r)?),
            MessageKind::LcSyncResponse => {
                let n = r.u8()? as usize;
                let lcs = (0..n).map(|_| read_level_cache(&mut r)).collect::<Result<_, _>>()?;
                Message::LcSyncResponse(lcs)
            }
            MessageKind::CaPoiRequest => Message::CaPoiRequest(r.digest()?),
            MessageKind::CaPoiResponse => {
                let poi = read_poi(&mut r)?;
                let primer = self.read_primer(&mut r)?;
                let sig = r.signature()?;
                Message::CaPoiResponse(CaPoiResponse { poi, primer, sig })
            }
            MessageKind::CaUpdate => {
                let primer = self.read_primer(&mut r)?;
                let sig = r.signature()?;
                let nr = r.u16()? as usize;
                let mut changed_roots = Vec::with_capacity(nr.min(r.remaining() / 34));
                for _ in 0..nr {
                    let e: Epoch = r.u16()?;
                    changed_roots.push((e, r.digest()?));
                }
                let np = r.u16()? as usize;
                let mut update_pois = Vec::with_capacity(np.min(r.remaining() / 68));
                for _ in 0..np {
                    let e: Epoch = r.u16()?;
                    update_pois.push((e, read_poi(&mut r)?));
                }
                Message::CaUpdate(CaUpdate {
                    primer,
                    sig,
                    changed_roots,
                    update_pois,
                })
            }
            MessageKind::EpochChange => {
                let primer = self.read_primer(&mut r)?;
                let sig = r.signature()?;
                let epoch = r.u16()?;
                let n = r.u32()? as usize;
                if r.remaining() < n.saturating_mul(32) {
                    return Err(r.err(DecodeErrorKind::Truncated {
                        needed: n.saturating_mul(32) - r.remaining(),
                    }));
                }
                let leaves = (0..n).map(|_| r.digest()).collect::<Result<_, _>>()?;
                Message::EpochChange(EpochChangeUpdate {
                    primer,
                    sig,
                    epoch,
                    leaves,
                })
            }
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Carries messages between two parties and accounts for their size.
pub trait Transport {
    fn carry(&mut self, msg: Message) -> Result<Message, DecodeError>;
    fn bytes(&self) -> u64;
    fn messages(&self) -> u64;
}

/// Serialises every message and parses it back on the other side.
#[derive(Clone, Debug)]
pub struct WireTransport {
    codec: Codec,
    bytes: u64,
    messages: u64,
    pub log: Option<Vec<(MessageKind, usize)>>,
}

impl WireTransport {
    pub fn new(codec: Codec) -> Self {
        WireTransport {
            codec,
            bytes: 0,
            messages: 0,
            log: None,
        }
    }

    pub fn logging(codec: Codec) -> Self {
        WireTransport {
            log: Some(Vec::new()),
            ..Self::new(codec)
        }
    }
}

impl Transport for WireTransport {
    fn carry(&mut self, msg: Message) -> Result<Message, DecodeError> {
        let bytes = self.codec.encode(&msg);
        self.bytes += bytes.len() as u64;
        self.messages += 1;
        if let Some(log) = &mut self.log {
            log.push((msg.kind(), bytes.len()));
        }
        self.codec.decode(msg.kind(), &bytes)
    }

    fn bytes(&self) -> u64 {
        self.bytes
    }

    fn messages(&self) -> u64 {
        self.messages
    }
}

/// Passes messages through unchanged, adding up their encoded size.
#[derive(Clone, Debug)]
pub struct CountingTransport {
    codec: Codec,
    bytes: u64,
    messages: u64,
}

impl CountingTransport {
    pub fn new(codec: Codec) -> Self {
        CountingTransport {
            codec,
            bytes: 0,
            messages: 0,
        }
    }
}

impl Transport for CountingTransport {
    fn carry(&mut self, msg: Message) -> Result<Message, DecodeError> {
        self.bytes += self.codec.encoded_len(&msg) as u64;
        self.messages += 1;
        Ok(msg)
    }

    fn bytes(&self) -> u64 {
        self.bytes
    }

    fn messages(&self) -> u64 {
        self.messages
    }
}
