//! Length-prefixed frames.
//!
//! ```text
//! length     u32 BE   bytes after this field
//! type       u8
//! round      u32 BE
//! client_id  u32 BE
//! payload    named tensor records
//! ```

use std::fmt;

use crate::checkpoint::{read_records, record_len, write_record};
use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

pub const HEADER_LEN: usize = 13;
pub const MAX_FRAME_BODY: usize = i32::MAX as usize;

/// Records whose name starts with this prefix are bookkeeping and excluded
/// from element accounting.
pub const META_PREFIX: &str = "meta.";
/// Label records travel with smashed data but are tallied separately.
pub const LABELS: &str = "labels";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MsgType {
    Smashed,
    SmashedGrad,
    ClientUpdate,
    GlobalModel,
    Control,
}

impl MsgType {
    pub const ALL: [MsgType; 5] =
        [MsgType::Smashed, MsgType::SmashedGrad, MsgType::ClientUpdate, MsgType::GlobalModel, MsgType::Control];

    pub fn code(self) -> u8 {
        match self {
            MsgType::Smashed => 1,
            MsgType::SmashedGrad => 2,
            MsgType::ClientUpdate => 3,
            MsgType::GlobalModel => 4,
            MsgType::Control => 5,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        MsgType::ALL.into_iter().find(|t| t.code() == code).ok_or(Error::BadType(code))
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MsgType::Smashed => "SMASHED",
            MsgType::SmashedGrad => "SMASHED_GRAD",
            MsgType::ClientUpdate => "CLIENT_UPDATE",
            MsgType::GlobalModel => "GLOBAL_MODEL",
            MsgType::Control => "CONTROL",
        })
    }
}

/// CONTROL message kinds, carried in a `meta.control` scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Hello,
    Ack,
    /// The client finished its local epochs for this round.
    SessionEnd,
    /// No further rounds.
    Done,
}

impl Control {
    fn code(self) -> f64 {
        match self {
            Control::Hello => 1.0,
            Control::Ack => 2.0,
            Control::SessionEnd => 3.0,
            Control::Done => 4.0,
        }
    }

    fn from_code(v: f64) -> Option<Self> {
        [Control::Hello, Control::Ack, Control::SessionEnd, Control::Done].into_iter().find(|c| c.code() == v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub round: u32,
    pub client_id: u32,
    pub payload: Vec<(String, Tensor)>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, round: u32, client_id: u32) -> Self {
        Self { msg_type, round, client_id, payload: Vec::new() }
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Self {
        self.payload.push((name.into(), tensor));
        self
    }

    pub fn with_meta(self, key: &str, value: f64) -> Self {
        self.with(format!("{META_PREFIX}{key}"), Tensor::scalar(value))
    }

    pub fn with_params(mut self, params: &ParameterSet) -> Self {
        self.payload.extend(params.entries().iter().cloned());
        self
    }

    pub fn control(kind: Control, round: u32, client_id: u32) -> Self {
        WireMessage::new(MsgType::Control, round, client_id).with_meta("control", kind.code())
    }

    pub fn control_kind(&self) -> Option<Control> {
        if self.msg_type != MsgType::Control {
            return None;
        }
        self.meta("control").and_then(Control::from_code)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.payload.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take_tensor(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .payload
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Protocol(format!("{} message lacks {name}", self.msg_type)))?;
        Ok(self.payload.remove(pos).1)
    }

    pub fn meta(&self, key: &str) -> Option<f64> {
        self.tensor(&format!("{META_PREFIX}{key}")).filter(|t| t.len() == 1).map(|t| t.data()[0])
    }

    pub fn require_meta(&self, key: &str) -> Result<f64> {
        self.meta(key).ok_or_else(|| Error::Protocol(format!("{} message lacks meta.{key}", self.msg_type)))
    }

    /// Non-meta, non-label records as a parameter set.
    pub fn into_params(self) -> Result<ParameterSet> {
        ParameterSet::new(
            self.payload.into_iter().filter(|(n, _)| !n.starts_with(META_PREFIX) && n != LABELS).collect(),
        )
    }

    /// Elements counted as protocol traffic (activations, gradients,
    /// parameters).
    pub fn payload_elements(&self) -> u64 {
        self.payload
            .iter()
            .filter(|(n, _)| !n.starts_with(META_PREFIX) && n != LABELS)
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    pub fn label_elements(&self) -> u64 {
        self.payload.iter().filter(|(n, _)| n == LABELS).map(|(_, t)| t.len() as u64).sum()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.iter().map(|(n, t)| record_len(n, t)).sum::<usize>()
    }
}

pub fn encode(m: &WireMessage) -> Result<Vec<u8>> {
    let total = m.encoded_len();
    let body = total - 4;
    if body > MAX_FRAME_BODY {
        return Err(Error::PayloadTooLarge(body));
    }
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&(body as u32).to_be_bytes());
    out.push(m.msg_type.code());
    out.extend_from_slice(&m.round.to_be_bytes());
    out.extend_from_slice(&m.client_id.to_be_bytes());
    for (name, t) in &m.payload {
        write_record(&mut out, name, t);
    }
    Ok(out)
}

/// Decodes exactly one complete frame.
pub fn decode(bytes: &[u8]) -> Result<WireMessage> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("frame of {} bytes has no length field", bytes.len())));
    }
    let declared = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let actual = bytes.len() - 4;
    if actual < declared {
        return Err(Error::Truncated(format!("frame declares {declared} bytes, {actual} present")));
    }
    if actual > declared || declared < HEADER_LEN - 4 {
        return Err(Error::LengthMismatch { declared, actual });
    }
    let msg_type = MsgType::from_code(bytes[4])?;
    let round = u32::from_be_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]);
    let client_id = u32::from_be_bytes([bytes[9], bytes[10], bytes[11], bytes[12]]);
    let payload = read_records(&bytes[HEADER_LEN..])?;
    Ok(WireMessage { msg_type, round, client_id, payload })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_control_is_header_only() {
        let m = WireMessage::new(MsgType::Control, 0, 0);
        let bytes = encode(&m).unwrap();
        assert_eq!(bytes.len(), 13);
        assert_eq!(&bytes[..4], &9u32.to_be_bytes());
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn length_field_counts_the_rest() {
        let m = WireMessage::new(MsgType::Smashed, 7, 3)
            .with("activations", Tensor::new(vec![2, 3], vec![1.5; 6]).unwrap())
            .with_meta("batch", 4.0);
        let bytes = encode(&m).unwrap();
        let declared = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(declared, bytes.len() - 4);
        assert_eq!(bytes.len(), m.encoded_len());
        assert_eq!(m.payload_elements(), 6);
    }

    #[test]
    fn corrupt_frames() {
        let bytes = encode(&WireMessage::control(Control::Hello, 1, 2)).unwrap();
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::BadType(9))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(decode(&bytes[..2]), Err(Error::Truncated(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn control_kinds_round_trip() {
        for kind in [Control::Hello, Control::Ack, Control::SessionEnd, Control::Done] {
            let m = decode(&encode(&WireMessage::control(kind, 0, 5)).unwrap()).unwrap();
            assert_eq!(m.control_kind(), Some(kind));
            assert_eq!(m.payload_elements(), 0);
        }
    }

    #[test]
    fn labels_are_tallied_apart() {
        let m = WireMessage::new(MsgType::Smashed, 0, 0)
            .with("activations", Tensor::zeros(vec![4, 2]))
            .with(LABELS, Tensor::from_vec(vec![0.0, 1.0, 1.0, 0.0]));
        assert_eq!(m.payload_elements(), 8);
        assert_eq!(m.label_elements(), 4);
    }
}
