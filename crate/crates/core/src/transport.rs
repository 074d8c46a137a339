//! In-memory message bus with a bit-exact wire format and exact metering.
//!
//! Frame layout (little-endian, 22-byte header):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FBGD"
//!      4     1  version
//!      5     1  msg_type (0 broadcast, 1 upload, 2 control upload)
//!      6     4  round (u32)
//!     10     4  client_id (u32)
//!     14     4  block_id (i32; -1 shared, -2 full vector)
//!     18     4  body_len (u32)
//!     22     …  body: one or more encoded payloads
//! ```
//!
//! Payload encoding: `tag u8`, `dense_len u32`, then
//! dense: `dense_len × f64`;
//! sparse: `k u32`, `k × u32` indices, `k × f64` values;
//! quantized: `norm f64`, `levels u32`, `count u32`, `count × i32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

use crate::compression::{CompressedPayload, FloatUnit, Scheme};
use crate::error::{Error, Result};
use crate::param_space::BlockId;

pub const MAGIC: [u8; 4] = *b"FBGD";
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MsgType {
    Broadcast,
    Upload,
    ControlUpload,
}

impl MsgType {
    fn to_byte(self) -> u8 {
        match self {
            MsgType::Broadcast => 0,
            MsgType::Upload => 1,
            MsgType::ControlUpload => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(MsgType::Broadcast),
            1 => Ok(MsgType::Upload),
            2 => Ok(MsgType::ControlUpload),
            other => Err(Error::MalformedPayload(format!("message type {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub msg_type: MsgType,
    pub round: u32,
    pub client_id: u32,
    pub block_id: i32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub header: Header,
    pub body: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, round: u32, client_id: u32, block: BlockId, body: Vec<u8>) -> Self {
        Self {
            header: Header {
                version: WIRE_VERSION,
                msg_type,
                round,
                client_id,
                block_id: block.to_wire(),
            },
            body,
        }
    }

    pub fn with_payloads(
        msg_type: MsgType,
        round: u32,
        client_id: u32,
        block: BlockId,
        payloads: &[CompressedPayload],
    ) -> Self {
        let mut body = Vec::new();
        for p in payloads {
            encode_payload(p, &mut body);
        }
        Self::new(msg_type, round, client_id, block, body)
    }

    pub fn block(&self) -> Result<BlockId> {
        BlockId::from_wire(self.header.block_id)
    }

    pub fn body_len(&self) -> u32 {
        self.body.len() as u32
    }

    pub fn payloads(&self) -> Result<Vec<CompressedPayload>> {
        let mut cur = Cursor::new(&self.body);
        let mut out = Vec::new();
        while !cur.is_empty() {
            out.push(decode_payload(&mut cur)?);
        }
        Ok(out)
    }

    pub fn float_count(&self, unit: FloatUnit) -> Result<u64> {
        Ok(self
            .payloads()?
            .iter()
            .map(|p| p.float_equivalent_count(unit))
            .sum())
    }

    fn key(&self) -> (u32, i32, MsgType) {
        (self.header.client_id, self.header.block_id, self.header.msg_type)
    }
}

pub fn serialize(msg: &WireMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + msg.body.len());
    out.extend_from_slice(&MAGIC);
    out.push(msg.header.version);
    out.push(msg.header.msg_type.to_byte());
    out.extend_from_slice(&msg.header.round.to_le_bytes());
    out.extend_from_slice(&msg.header.client_id.to_le_bytes());
    out.extend_from_slice(&msg.header.block_id.to_le_bytes());
    out.extend_from_slice(&msg.body_len().to_le_bytes());
    out.extend_from_slice(&msg.body);
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<WireMessage> {
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic(m));
    }
    let mut cur = Cursor::new(bytes);
    cur.take(4)?;
    let version = cur.u8()?;
    if version != WIRE_VERSION {
        return Err(Error::VersionMismatch {
            expected: WIRE_VERSION,
            found: version,
        });
    }
    let msg_type = MsgType::from_byte(cur.u8()?)?;
    let round = cur.u32()?;
    let client_id = cur.u32()?;
    let block_id = cur.i32()?;
    let body_len = cur.u32()? as usize;
    let body = cur.take(body_len)?.to_vec();
    if !cur.is_empty() {
        return Err(Error::MalformedPayload(format!(
            "{} trailing bytes after body",
            cur.remaining()
        )));
    }
    Ok(WireMessage {
        header: Header {
            version,
            msg_type,
            round,
            client_id,
            block_id,
        },
        body,
    })
}

fn encode_payload(p: &CompressedPayload, out: &mut Vec<u8>) {
    out.push(p.scheme().tag());
    out.extend_from_slice(&(p.dense_len() as u32).to_le_bytes());
    match p {
        CompressedPayload::Dense(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        CompressedPayload::Sparse {
            indices, values, ..
        } => {
            out.extend_from_slice(&(indices.len() as u32).to_le_bytes());
            for i in indices {
                out.extend_from_slice(&i.to_le_bytes());
            }
            for x in values {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        CompressedPayload::Quantized {
            norm,
            levels,
            signed_levels,
            ..
        } => {
            out.extend_from_slice(&norm.to_le_bytes());
            out.extend_from_slice(&levels.to_le_bytes());
            out.extend_from_slice(&(signed_levels.len() as u32).to_le_bytes());
            for l in signed_levels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
    }
}

fn decode_payload(cur: &mut Cursor<'_>) -> Result<CompressedPayload> {
    let tag = cur.u8()?;
    let dense_len = cur.u32()? as usize;
    let payload = match tag {
        0 => CompressedPayload::Dense((0..dense_len).map(|_| cur.f64()).collect::<Result<_>>()?),
        1 | 2 => {
            let k = cur.u32()? as usize;
            let indices = (0..k).map(|_| cur.u32()).collect::<Result<_>>()?;
            let values = (0..k).map(|_| cur.f64()).collect::<Result<_>>()?;
            CompressedPayload::Sparse {
                scheme: if tag == 1 { Scheme::TopK } else { Scheme::RandK },
                dense_len,
                indices,
                values,
            }
        }
        3 => {
            let norm = cur.f64()?;
            let levels = cur.u32()?;
            let count = cur.u32()? as usize;
            let signed_levels = (0..count).map(|_| cur.i32()).collect::<Result<_>>()?;
            CompressedPayload::Quantized {
                dense_len,
                norm,
                levels,
                signed_levels,
            }
        }
        other => return Err(Error::MalformedPayload(format!("payload tag {other}"))),
    };
    payload.validate()?;
    Ok(payload)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedBody {
                needed: self.pos + n,
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundTraffic {
    pub round: u32,
    pub upload_floats: u64,
    pub download_floats: u64,
    pub upload_bytes: u64,
}

/// Monotone traffic counters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Meter {
    pub upload_floats: u64,
    pub download_floats: u64,
    pub upload_bytes: u64,
    pub per_round: Vec<RoundTraffic>,
}

impl Meter {
    fn round_entry(&mut self, round: u32) -> &mut RoundTraffic {
        if self.per_round.last().is_none_or(|t| t.round != round) {
            self.per_round.push(RoundTraffic {
                round,
                ..Default::default()
            });
        }
        self.per_round.last_mut().expect("just pushed")
    }

    pub fn round(&self, round: u32) -> Option<&RoundTraffic> {
        self.per_round.iter().find(|t| t.round == round)
    }
}

type InboxKey = (u32, u32, i32, MsgType);

/// Simulated network between the server and its clients.
///
/// Sends may come from several worker threads; `collect` hands back a
/// round's uploads sorted by `(client_id, block_id, msg_type)`, so arrival
/// order never leaks into results.
#[derive(Debug, Default)]
pub struct Bus {
    inbox: Mutex<BTreeMap<InboxKey, Vec<u8>>>,
    meter: Mutex<Meter>,
    unit: FloatUnit,
    dump_dir: Option<PathBuf>,
}

impl Bus {
    pub fn new(unit: FloatUnit) -> Self {
        Self {
            unit,
            ..Default::default()
        }
    }

    /// Writes every frame to `dir` as `r{round}_c{client}_b{block}_t{type}.bin`.
    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    pub fn unit(&self) -> FloatUnit {
        self.unit
    }

    pub fn send(&self, msg: &WireMessage) -> Result<()> {
        let floats = msg.float_count(self.unit)?;
        let frame = serialize(msg);
        let key = (msg.header.round, msg.header.client_id, msg.header.block_id, msg.header.msg_type);
        {
            let mut inbox = self.inbox.lock().expect("bus inbox poisoned");
            if inbox.contains_key(&key) {
                return Err(Error::DuplicateUpload {
                    client: msg.header.client_id,
                    block: msg.header.block_id,
                    round: msg.header.round,
                });
            }
            self.dump(msg, &frame)?;
            let len = frame.len() as u64;
            inbox.insert(key, frame);
            let mut meter = self.meter.lock().expect("bus meter poisoned");
            meter.upload_floats += floats;
            meter.upload_bytes += len;
            let t = meter.round_entry(msg.header.round);
            t.upload_floats += floats;
            t.upload_bytes += len;
        }
        Ok(())
    }

    /// Delivers a server message to `recipients` clients and returns the frame
    /// each of them decodes.
    pub fn broadcast(&self, msg: &WireMessage, recipients: usize) -> Result<Vec<u8>> {
        let floats = msg.float_count(self.unit)? * recipients as u64;
        let frame = serialize(msg);
        self.dump(msg, &frame)?;
        let mut meter = self.meter.lock().expect("bus meter poisoned");
        meter.download_floats += floats;
        meter.round_entry(msg.header.round).download_floats += floats;
        Ok(frame)
    }

    pub fn collect(&self, round: u32, expected_count: usize) -> Result<Vec<WireMessage>> {
        let mut inbox = self.inbox.lock().expect("bus inbox poisoned");
        let keys: Vec<InboxKey> = inbox
            .range((round, 0, i32::MIN, MsgType::Broadcast)..=(round, u32::MAX, i32::MAX, MsgType::ControlUpload))
            .map(|(k, _)| *k)
            .collect();
        if keys.len() < expected_count {
            return Err(Error::MissingUpload {
                round,
                detail: format!("expected {expected_count} messages, received {}", keys.len()),
            });
        }
        let mut out = keys
            .into_iter()
            .map(|k| deserialize(&inbox.remove(&k).expect("key listed above")))
            .collect::<Result<Vec<_>>>()?;
        out.sort_by_key(WireMessage::key);
        Ok(out)
    }

    pub fn meter(&self) -> Meter {
        self.meter.lock().expect("bus meter poisoned").clone()
    }

    /// Opens a traffic row for `round` even if nothing is sent during it.
    pub fn open_round(&self, round: u32) {
        self.meter.lock().expect("bus meter poisoned").round_entry(round);
    }

    fn dump(&self, msg: &WireMessage, frame: &[u8]) -> Result<()> {
        if let Some(dir) = &self.dump_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let h = &msg.header;
            let path = dir.join(format!(
                "r{}_c{}_b{}_t{}.bin",
                h.round,
                h.client_id,
                h.block_id,
                h.msg_type.to_byte()
            ));
            fs::write(&path, frame).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense(round: u32, client: u32, block: BlockId, v: Vec<f64>) -> WireMessage {
        WireMessage::with_payloads(MsgType::Upload, round, client, block, &[CompressedPayload::Dense(v)])
    }

    #[test]
    fn header_only_frame_is_22_bytes() {
        let msg = WireMessage::new(MsgType::ControlUpload, 3, 1, BlockId::Shared, Vec::new());
        let bytes = serialize(&msg);
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(bytes.len(), 22);
        assert_eq!(deserialize(&bytes).unwrap(), msg);
    }

    #[test]
    fn corrupt_frames() {
        let msg = dense(0, 0, BlockId::Block(1), vec![1.0, 2.0]);
        let mut bytes = serialize(&msg);
        bytes[0] ^= 0xff;
        assert!(matches!(deserialize(&bytes), Err(Error::BadMagic(_))));

        let mut bytes = serialize(&msg);
        bytes[4] = 9;
        assert!(matches!(
            deserialize(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        let bytes = serialize(&msg);
        assert!(matches!(
            deserialize(&bytes[..bytes.len() - 3]),
            Err(Error::TruncatedBody { .. })
        ));
        assert!(matches!(deserialize(&bytes[..10]), Err(Error::TruncatedBody { .. })));
    }

    #[test]
    fn send_collect_and_meter() {
        let bus = Bus::new(FloatUnit::Bits64);
        let msg = dense(2, 4, BlockId::Block(0), vec![0.5; 7]);
        bus.send(&msg).unwrap();
        assert_eq!(bus.meter().upload_floats, 7);
        assert_eq!(bus.meter().upload_bytes, (HEADER_LEN + 5 + 56) as u64);
        let got = bus.collect(2, 1).unwrap();
        assert_eq!(got, vec![msg]);
        assert!(bus.collect(2, 0).unwrap().is_empty());
    }

    #[test]
    fn duplicate_and_missing() {
        let bus = Bus::new(FloatUnit::Bits64);
        let msg = dense(1, 4, BlockId::Shared, vec![1.0]);
        bus.send(&msg).unwrap();
        assert!(matches!(bus.send(&msg), Err(Error::DuplicateUpload { client: 4, block: -1, round: 1 })));
        // Same block but a control upload is a different message.
        let ctl = WireMessage::with_payloads(
            MsgType::ControlUpload,
            1,
            4,
            BlockId::Shared,
            &[CompressedPayload::Dense(vec![0.0])],
        );
        bus.send(&ctl).unwrap();
        assert!(matches!(bus.collect(1, 3), Err(Error::MissingUpload { round: 1, .. })));
    }

    #[test]
    fn collect_is_sorted_regardless_of_send_order() {
        let bus = Bus::new(FloatUnit::Bits64);
        let msgs = [
            dense(0, 3, BlockId::Block(1), vec![3.0]),
            dense(0, 1, BlockId::Shared, vec![1.5]),
            dense(0, 1, BlockId::Block(0), vec![1.0]),
            dense(1, 0, BlockId::Block(0), vec![9.0]),
        ];
        for m in msgs.iter().rev() {
            bus.send(m).unwrap();
        }
        let got = bus.collect(0, 3).unwrap();
        let order: Vec<(u32, i32)> = got.iter().map(|m| (m.header.client_id, m.header.block_id)).collect();
        assert_eq!(order, vec![(1, -1), (1, 0), (3, 1)]);
    }

    #[test]
    fn frames_are_dumped() {
        let dir = tempfile::tempdir().unwrap();
        let bus = Bus::new(FloatUnit::Bits64).with_dump_dir(dir.path());
        let msg = dense(5, 2, BlockId::Block(3), vec![1.0]);
        bus.send(&msg).unwrap();
        let bytes = std::fs::read(dir.path().join("r5_c2_b3_t1.bin")).unwrap();
        assert_eq!(deserialize(&bytes).unwrap(), msg);
    }

    fn payload_strategy() -> impl Strategy<Value = CompressedPayload> {
        prop_oneof![
            proptest::collection::vec(any::<f64>(), 0..64).prop_map(CompressedPayload::Dense),
            (proptest::collection::vec(-1e3f64..1e3, 1..64), 1usize..64, any::<u64>())
                .prop_map(|(v, k, s)| crate::compression::randk_encode(&v, k.min(v.len()), s).unwrap()),
            (proptest::collection::vec(-1e3f64..1e3, 1..64), 1u32..64, any::<u64>())
                .prop_map(|(v, l, s)| crate::compression::qsgd_encode(&v, l, s).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            p in payload_strategy(),
            round in any::<u32>(),
            client in any::<u32>(),
            block in -2i32..1000,
        ) {
            let msg = WireMessage::with_payloads(
                MsgType::Upload, round, client, BlockId::from_wire(block).unwrap(), std::slice::from_ref(&p),
            );
            let back = deserialize(&serialize(&msg)).unwrap();
            prop_assert_eq!(&back.body, &msg.body);
            prop_assert_eq!(back.header, msg.header);
            let decoded = back.payloads().unwrap();
            prop_assert_eq!(decoded.len(), 1);
            // Compare bit patterns so NaN payloads also round-trip.
            let a: Vec<u64> = decoded[0].decode().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = p.decode().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
