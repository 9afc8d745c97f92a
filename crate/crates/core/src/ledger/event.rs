use std::fmt;

use thiserror::Error;

use super::{Address, ContractPhase, ContractTerms, ADDRESS_LEN};
use crate::envelope::{digest, Digest, Nonce, Secret, DIGEST_LEN, NONCE_LEN, SECRET_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Created,
    Committed,
    FilterRecorded,
    Deposited,
    Revealed,
    Transferred,
    PaidOut,
    Aborted,
}

impl EventKind {
    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        use EventKind::*;
        Some(match t {
            0 => Created,
            1 => Committed,
            2 => FilterRecorded,
            3 => Deposited,
            4 => Revealed,
            5 => Transferred,
            6 => PaidOut,
            7 => Aborted,
            _ => return None,
        })
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferReason {
    /// Escrowed deposit released to the system operator after the reveal.
    Settlement,
    /// Escrowed deposit returned to the authority on abort.
    Refund,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventPayload {
    Created(ContractTerms),
    Committed {
        address: Address,
        commitment: Digest,
    },
    FilterRecorded {
        filter_digest: Digest,
        eligible: u32,
    },
    Deposited {
        from: Address,
        amount: u64,
    },
    Revealed {
        s2: Secret,
    },
    Transferred {
        to: Address,
        amount: u64,
        reason: TransferReason,
    },
    PaidOut {
        payouts: Vec<(Address, u64)>,
        retained: u64,
    },
    Aborted {
        at: u64,
        from_phase: ContractPhase,
    },
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::Created(_) => EventKind::Created,
            EventPayload::Committed { .. } => EventKind::Committed,
            EventPayload::FilterRecorded { .. } => EventKind::FilterRecorded,
            EventPayload::Deposited { .. } => EventKind::Deposited,
            EventPayload::Revealed { .. } => EventKind::Revealed,
            EventPayload::Transferred { .. } => EventKind::Transferred,
            EventPayload::PaidOut { .. } => EventKind::PaidOut,
            EventPayload::Aborted { .. } => EventKind::Aborted,
        }
    }

    /// Canonical payload bytes: fixed field order, big-endian integers,
    /// length-prefixed variable fields.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        match self {
            EventPayload::Created(t) => {
                w.bytes_var(t.config_uri.as_bytes());
                w.raw(&t.config_digest.0);
                w.u32(t.required_responses);
                w.u64(t.fee);
                w.raw(&t.n1.0);
                w.raw(&t.n2.0);
                w.raw(&t.s1.0);
                w.raw(&t.h_s2.0);
                w.u64(t.deadline);
                w.raw(&t.authority.0);
                w.raw(&t.system_operator.0);
            }
            EventPayload::Committed {
                address,
                commitment,
            } => {
                w.raw(&address.0);
                w.raw(&commitment.0);
            }
            EventPayload::FilterRecorded {
                filter_digest,
                eligible,
            } => {
                w.raw(&filter_digest.0);
                w.u32(*eligible);
            }
            EventPayload::Deposited { from, amount } => {
                w.raw(&from.0);
                w.u64(*amount);
            }
            EventPayload::Revealed { s2 } => w.raw(&s2.0),
            EventPayload::Transferred { to, amount, reason } => {
                w.raw(&to.0);
                w.u64(*amount);
                w.u8(match reason {
                    TransferReason::Settlement => 0,
                    TransferReason::Refund => 1,
                });
            }
            EventPayload::PaidOut { payouts, retained } => {
                w.u32(payouts.len() as u32);
                for (a, amt) in payouts {
                    w.raw(&a.0);
                    w.u64(*amt);
                }
                w.u64(*retained);
            }
            EventPayload::Aborted { at, from_phase } => {
                w.u64(*at);
                w.u8(from_phase.tag());
            }
        }
        w.0
    }

    fn decode(kind: EventKind, r: &mut Reader<'_>) -> Result<Self, &'static str> {
        Ok(match kind {
            EventKind::Created => {
                let uri = String::from_utf8(r.bytes_var()?.to_vec()).map_err(|_| "uri not utf-8")?;
                EventPayload::Created(ContractTerms {
                    config_uri: uri,
                    config_digest: Digest(r.array::<DIGEST_LEN>()?),
                    required_responses: r.u32()?,
                    fee: r.u64()?,
                    n1: Nonce(r.array::<NONCE_LEN>()?),
                    n2: Nonce(r.array::<NONCE_LEN>()?),
                    s1: Secret(r.array::<SECRET_LEN>()?),
                    h_s2: Digest(r.array::<DIGEST_LEN>()?),
                    deadline: r.u64()?,
                    authority: Address(r.array::<ADDRESS_LEN>()?),
                    system_operator: Address(r.array::<ADDRESS_LEN>()?),
                })
            }
            EventKind::Committed => EventPayload::Committed {
                address: Address(r.array()?),
                commitment: Digest(r.array()?),
            },
            EventKind::FilterRecorded => EventPayload::FilterRecorded {
                filter_digest: Digest(r.array()?),
                eligible: r.u32()?,
            },
            EventKind::Deposited => EventPayload::Deposited {
                from: Address(r.array()?),
                amount: r.u64()?,
            },
            EventKind::Revealed => EventPayload::Revealed {
                s2: Secret(r.array()?),
            },
            EventKind::Transferred => EventPayload::Transferred {
                to: Address(r.array()?),
                amount: r.u64()?,
                reason: match r.u8()? {
                    0 => TransferReason::Settlement,
                    1 => TransferReason::Refund,
                    _ => return Err("unknown transfer reason"),
                },
            },
            EventKind::PaidOut => {
                let n = r.u32()? as usize;
                if n > r.remaining() / (ADDRESS_LEN + 8) {
                    return Err("payout count exceeds record");
                }
                let mut payouts = Vec::with_capacity(n);
                for _ in 0..n {
                    payouts.push((Address(r.array()?), r.u64()?));
                }
                EventPayload::PaidOut {
                    payouts,
                    retained: r.u64()?,
                }
            }
            EventKind::Aborted => EventPayload::Aborted {
                at: r.u64()?,
                from_phase: ContractPhase::from_tag(r.u8()?).ok_or("unknown phase")?,
            },
        })
    }

    fn describe(&self) -> String {
        match self {
            EventPayload::Created(t) => format!(
                "config={} nr={} fee={} s1={} h_s2={} deadline={} authority={} sysop={}",
                t.config_digest, t.required_responses, t.fee, t.s1, t.h_s2, t.deadline, t.authority,
                t.system_operator
            ),
            EventPayload::Committed {
                address,
                commitment,
            } => format!("address={address} commitment={commitment}"),
            EventPayload::FilterRecorded {
                filter_digest,
                eligible,
            } => format!("filter={filter_digest} eligible={eligible}"),
            EventPayload::Deposited { from, amount } => format!("from={from} amount={amount}"),
            EventPayload::Revealed { s2 } => format!("s2={s2}"),
            EventPayload::Transferred { to, amount, reason } => {
                format!("to={to} amount={amount} reason={reason:?}")
            }
            EventPayload::PaidOut { payouts, retained } => {
                let mut s = String::new();
                for (a, amt) in payouts {
                    s.push_str(&format!("{a}:{amt} "));
                }
                format!("{s}retained={retained}")
            }
            EventPayload::Aborted { at, from_phase } => format!("at={at} from={from_phase}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEvent {
    pub sequence_no: u64,
    pub payload: EventPayload,
    pub prev_hash: Digest,
    pub event_hash: Digest,
}

impl LedgerEvent {
    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }

    /// Every field except `event_hash`, in canonical order.
    pub fn hashed_bytes(&self) -> Vec<u8> {
        let payload = self.payload.encode();
        let mut w = Writer::default();
        w.u64(self.sequence_no);
        w.u8(self.kind().tag());
        w.bytes_var(&payload);
        w.raw(&self.prev_hash.0);
        w.0
    }

    pub fn compute_hash(&self) -> Digest {
        digest(&self.hashed_bytes())
    }

    pub fn to_record(&self) -> Vec<u8> {
        let mut out = self.hashed_bytes();
        out.extend_from_slice(&self.event_hash.0);
        out
    }

    fn from_record(bytes: &[u8]) -> Result<Self, &'static str> {
        let mut r = Reader::new(bytes);
        let sequence_no = r.u64()?;
        let kind = EventKind::from_tag(r.u8()?).ok_or("unknown event kind")?;
        let payload_bytes = r.bytes_var()?;
        let mut pr = Reader::new(payload_bytes);
        let payload = EventPayload::decode(kind, &mut pr)?;
        pr.finish()?;
        let prev_hash = Digest(r.array()?);
        let event_hash = Digest(r.array()?);
        r.finish()?;
        Ok(LedgerEvent {
            sequence_no,
            payload,
            prev_hash,
            event_hash,
        })
    }

    pub fn dump_line(&self) -> String {
        format!(
            "{:>6} {:<14} prev={} hash={} {}",
            self.sequence_no,
            self.kind().to_string(),
            self.prev_hash,
            self.event_hash,
            self.payload.describe()
        )
    }
}

/// Append-only, hash-chained event sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    events: Vec<LedgerEvent>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("corrupt record {record}: {reason}")]
pub struct LogDecodeError {
    pub record: usize,
    pub reason: &'static str,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn head(&self) -> Digest {
        self.events.last().map_or(Digest::ZERO, |e| e.event_hash)
    }

    pub(crate) fn append(&mut self, payload: EventPayload) -> &LedgerEvent {
        let mut ev = LedgerEvent {
            sequence_no: self.events.len() as u64,
            payload,
            prev_hash: self.head(),
            event_hash: Digest::ZERO,
        };
        ev.event_hash = ev.compute_hash();
        self.events.push(ev);
        self.events.last().unwrap()
    }

    /// Length-prefixed binary export: per event, a 4-byte big-endian record
    /// length followed by the canonical record.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for ev in &self.events {
            let rec = ev.to_record();
            out.extend_from_slice(&(rec.len() as u32).to_be_bytes());
            out.extend_from_slice(&rec);
        }
        out
    }

    /// Parses an export without checking the chain; see [`verify_event_chain`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LogDecodeError> {
        let mut events = Vec::new();
        let mut rest = bytes;
        while !rest.is_empty() {
            let record = events.len();
            let err = |reason| LogDecodeError { record, reason };
            if rest.len() < 4 {
                return Err(err("truncated length prefix"));
            }
            let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
            let body = rest.get(4..4 + len).ok_or_else(|| err("record runs past end"))?;
            events.push(LedgerEvent::from_record(body).map_err(err)?);
            rest = &rest[4 + len..];
        }
        Ok(EventLog { events })
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        for ev in &self.events {
            s.push_str(&ev.dump_line());
            s.push('\n');
        }
        s
    }

    /// Test hook for building deliberately inconsistent logs.
    #[doc(hidden)]
    pub fn from_events_unchecked(events: Vec<LedgerEvent>) -> Self {
        EventLog { events }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainVerdict {
    Valid,
    Broken { index: usize },
}

impl ChainVerdict {
    pub fn is_valid(self) -> bool {
        self == ChainVerdict::Valid
    }
}

pub fn verify_event_chain(log: &EventLog) -> ChainVerdict {
    let mut prev = Digest::ZERO;
    for (i, ev) in log.events.iter().enumerate() {
        if ev.sequence_no != i as u64 || ev.prev_hash != prev || ev.compute_hash() != ev.event_hash {
            return ChainVerdict::Broken { index: i };
        }
        prev = ev.event_hash;
    }
    ChainVerdict::Valid
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn raw(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn bytes_var(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.raw(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }
    fn remaining(&self) -> usize {
        self.buf.len()
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], &'static str> {
        if self.buf.len() < n {
            return Err("unexpected end of record");
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], &'static str> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8, &'static str> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, &'static str> {
        Ok(u32::from_be_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, &'static str> {
        Ok(u64::from_be_bytes(self.array()?))
    }
    fn bytes_var(&mut self) -> Result<&'a [u8], &'static str> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn finish(&self) -> Result<(), &'static str> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err("trailing bytes in record")
        }
    }
}
