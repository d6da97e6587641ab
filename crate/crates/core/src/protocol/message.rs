use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, ProtocolError, Result};
use crate::params::WeightVector;

/// Fixed per-message header cost in the overhead accounting.
pub const HEADER_BYTES: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Server,
    /// 1-based hospital index.
    Hospital(usize),
}

impl Endpoint {
    pub fn is_server(self) -> bool {
        self == Endpoint::Server
    }

    pub fn hospital(self) -> Option<usize> {
        match self {
            Endpoint::Server => None,
            Endpoint::Hospital(k) => Some(k),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Server => f.write_str("server"),
            Endpoint::Hospital(k) => write!(f, "h{k}"),
        }
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "server" {
            return Ok(Endpoint::Server);
        }
        s.strip_prefix('h')
            .and_then(|n| n.parse().ok())
            .filter(|&k| k > 0)
            .map(Endpoint::Hospital)
            .ok_or_else(|| format!("unknown endpoint `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    BroadcastWeights,
    Share,
    MaskedSum,
    ClientWeights,
}

impl MessageKind {
    pub const ALL: [MessageKind; 4] = [
        MessageKind::BroadcastWeights,
        MessageKind::Share,
        MessageKind::MaskedSum,
        MessageKind::ClientWeights,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::BroadcastWeights => "broadcast_weights",
            MessageKind::Share => "share",
            MessageKind::MaskedSum => "masked_sum",
            MessageKind::ClientWeights => "client_weights",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown message kind `{s}`"))
    }
}

/// One simulated transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub round: usize,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub kind: MessageKind,
    pub payload: WeightVector,
}

impl Message {
    /// `dim * 8` payload bytes plus the fixed header.
    pub fn byte_size(&self) -> u64 {
        self.payload.dim() as u64 * 8 + HEADER_BYTES
    }
}

/// First 16 hex digits of SHA-256 over the payload's little-endian f64 bytes.
pub fn payload_digest(w: &WeightVector) -> String {
    let mut h = Sha256::new();
    for v in w.as_slice() {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// A logged message. The payload is only kept when the log retains payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub round: usize,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    pub kind: MessageKind,
    pub byte_size: u64,
    pub payload_digest: String,
    pub payload: Option<WeightVector>,
}

/// Every transmission of a run, in send order.
///
/// Text form (`messages.log`): a `#` comment header, then one record per line
/// with tab-separated fields
///
/// ```text
/// round  sender  receiver  kind  byte_size  payload_digest
/// ```
///
/// Endpoints are `server` or `h<k>`; kinds are `broadcast_weights`,
/// `share`, `masked_sum`, `client_weights`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageLog {
    pub records: Vec<LogRecord>,
}

pub const LOG_HEADER: &str = "# round\tsender\treceiver\tkind\tbyte_size\tpayload_digest";

impl MessageLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, msg: &Message, keep_payload: bool) {
        self.records.push(LogRecord {
            round: msg.round,
            sender: msg.sender,
            receiver: msg.receiver,
            kind: msg.kind,
            byte_size: msg.byte_size(),
            payload_digest: payload_digest(&msg.payload),
            payload: keep_payload.then(|| msg.payload.clone()),
        });
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{LOG_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.round, r.sender, r.receiver, r.kind, r.byte_size, r.payload_digest
            )?;
        }
        Ok(())
    }

    /// Parses the text form. Payloads are not part of it and come back `None`.
    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            let trimmed = line.trim_end();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let bad = |reason: String| Error::Parse {
                line: line_no,
                reason,
            };
            let f: Vec<&str> = trimmed.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 tab-separated fields, found {}", f.len())));
            }
            let round = f[0].parse().map_err(|_| bad(format!("bad round `{}`", f[0])))?;
            let sender = f[1].parse().map_err(bad)?;
            let receiver = f[2].parse().map_err(bad)?;
            let kind = f[3].parse().map_err(bad)?;
            let byte_size = f[4]
                .parse()
                .map_err(|_| bad(format!("bad byte_size `{}`", f[4])))?;
            if f[5].is_empty() || !f[5].chars().all(|c| c.is_ascii_hexdigit()) {
                return Err(bad(format!("bad payload digest `{}`", f[5])));
            }
            records.push(LogRecord {
                round,
                sender,
                receiver,
                kind,
                byte_size,
                payload_digest: f[5].to_string(),
                payload: None,
            });
        }
        Ok(Self { records })
    }

    /// Payload export for audits: one JSON object per line with the record
    /// index, the header fields and the payload values. Records without a
    /// retained payload are skipped.
    pub fn write_payloads_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (index, r) in self.records.iter().enumerate() {
            if let Some(p) = &r.payload {
                let row = PayloadRow {
                    index,
                    round: r.round,
                    sender: r.sender.to_string(),
                    receiver: r.receiver.to_string(),
                    kind: r.kind,
                    payload: p.clone(),
                };
                serde_json::to_writer(&mut out, &row).map_err(|e| Error::Io(e.to_string()))?;
                writeln!(out)?;
            }
        }
        Ok(())
    }

    /// Re-attaches payloads written by [`MessageLog::write_payloads_jsonl`].
    pub fn attach_payloads<R: BufRead>(&mut self, input: R) -> Result<()> {
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Parse {
                line: idx + 1,
                reason,
            };
            let row: PayloadRow = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let rec = self
                .records
                .get_mut(row.index)
                .ok_or_else(|| bad(format!("record {} is not in the log", row.index)))?;
            if rec.round != row.round
                || rec.kind != row.kind
                || rec.sender.to_string() != row.sender
                || rec.receiver.to_string() != row.receiver
            {
                return Err(bad(format!("payload row does not match log record {}", row.index)));
            }
            if payload_digest(&row.payload) != rec.payload_digest {
                return Err(bad(format!("payload digest mismatch for record {}", row.index)));
            }
            rec.payload = Some(row.payload);
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PayloadRow {
    index: usize,
    round: usize,
    sender: String,
    receiver: String,
    kind: MessageKind,
    payload: WeightVector,
}

/// Drop rule for fault injection: messages for which it returns `true` are lost.
pub type DropRule = Box<dyn Fn(&Message) -> bool + Send + Sync>;

/// In-memory point-to-point network with per-receiver mailboxes.
#[derive(Default)]
pub struct Network {
    mailboxes: BTreeMap<Endpoint, VecDeque<Message>>,
    log: MessageLog,
    keep_payloads: bool,
    drop_rule: Option<DropRule>,
}

impl Network {
    pub fn new(keep_payloads: bool) -> Self {
        Self {
            keep_payloads,
            ..Self::default()
        }
    }

    pub fn with_drop_rule(mut self, rule: DropRule) -> Self {
        self.drop_rule = Some(rule);
        self
    }

    /// Logs and delivers `msg`, unless the drop rule loses it.
    pub fn send(&mut self, msg: Message) {
        if self.drop_rule.as_ref().is_some_and(|drop| drop(&msg)) {
            return;
        }
        self.log.push(&msg, self.keep_payloads);
        self.mailboxes.entry(msg.receiver).or_default().push_back(msg);
    }

    /// Takes the matching message out of `receiver`'s mailbox.
    pub fn receive(
        &mut self,
        receiver: Endpoint,
        sender: Endpoint,
        kind: MessageKind,
        round: usize,
    ) -> Result<Message> {
        let missing = || -> Error {
            ProtocolError::MissingMessage {
                round,
                sender: sender.to_string(),
                kind,
            }
            .into()
        };
        let inbox = self.mailboxes.get_mut(&receiver).ok_or_else(missing)?;
        let pos = inbox
            .iter()
            .position(|m| m.sender == sender && m.kind == kind && m.round == round)
            .ok_or_else(missing)?;
        Ok(inbox.remove(pos).expect("position is in bounds"))
    }

    /// Messages delivered but not yet received.
    pub fn pending(&self) -> usize {
        self.mailboxes.values().map(VecDeque::len).sum()
    }

    pub fn log(&self) -> &MessageLog {
        &self.log
    }

    pub fn into_log(self) -> MessageLog {
        self.log
    }
}
