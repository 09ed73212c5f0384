//! Per-client, per-round traffic tallies.
//!
//! Every frame is recorded twice: once by the endpoint that sent it and
//! once by the endpoint that received it. Client-facing totals use the
//! client's own observations; server views use the server's.

use std::collections::BTreeMap;
use std::sync::Mutex;

use super::codec::{MsgType, WireMessage};

/// The server-side node at the far end of a client's link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Peer {
    MainServer,
    /// Fed server (SFL), aggregation server (FL) or relay (SL).
    FedServer,
}

/// Relative to the client: `Up` is client to server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Observer {
    Sender,
    Receiver,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub elements: u64,
    pub label_elements: u64,
    pub bytes: u64,
    pub messages: u64,
}

impl Tally {
    fn add(&mut self, other: &Tally) {
        self.elements += other.elements;
        self.label_elements += other.label_elements;
        self.bytes += other.bytes;
        self.messages += other.messages;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientTraffic {
    pub uploaded_elements: u64,
    pub downloaded_elements: u64,
    pub uploaded_bytes: u64,
    pub downloaded_bytes: u64,
    pub label_elements: u64,
}

impl ClientTraffic {
    pub fn total_elements(&self) -> u64 {
        self.uploaded_elements + self.downloaded_elements
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    round: u32,
    client: usize,
    peer: Peer,
    direction: Direction,
    observer: Observer,
    msg_type: MsgType,
}

#[derive(Debug, Default)]
pub struct TrafficCounter {
    ledger: Mutex<BTreeMap<Key, Tally>>,
}

impl TrafficCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &self,
        client: usize,
        peer: Peer,
        direction: Direction,
        observer: Observer,
        msg: &WireMessage,
        frame_bytes: usize,
    ) {
        let key = Key { round: msg.round, client, peer, direction, observer, msg_type: msg.msg_type };
        let tally = Tally {
            elements: msg.payload_elements(),
            label_elements: msg.label_elements(),
            bytes: frame_bytes as u64,
            messages: 1,
        };
        self.ledger.lock().expect("traffic ledger poisoned").entry(key).or_default().add(&tally);
    }

    fn sum(&self, mut keep: impl FnMut(&Key) -> bool) -> Tally {
        let ledger = self.ledger.lock().expect("traffic ledger poisoned");
        let mut total = Tally::default();
        for (k, t) in ledger.iter() {
            if keep(k) {
                total.add(t);
            }
        }
        total
    }

    fn client_view(&self, client: usize, round: Option<u32>) -> ClientTraffic {
        let matches = |k: &Key, dir, obs| {
            k.client == client && k.direction == dir && k.observer == obs && round.is_none_or(|r| k.round == r)
        };
        let up = self.sum(|k| matches(k, Direction::Up, Observer::Sender));
        let down = self.sum(|k| matches(k, Direction::Down, Observer::Receiver));
        ClientTraffic {
            uploaded_elements: up.elements,
            downloaded_elements: down.elements,
            uploaded_bytes: up.bytes,
            downloaded_bytes: down.bytes,
            label_elements: up.label_elements + down.label_elements,
        }
    }

    /// Everything client `client` sent and received, over all rounds.
    pub fn client_totals(&self, client: usize) -> ClientTraffic {
        self.client_view(client, None)
    }

    pub fn client_round(&self, client: usize, round: u32) -> ClientTraffic {
        self.client_view(client, Some(round))
    }

    /// What `peer` itself received from all clients.
    pub fn server_received(&self, peer: Peer) -> Tally {
        self.sum(|k| k.peer == peer && k.direction == Direction::Up && k.observer == Observer::Receiver)
    }

    /// What all clients sent to `peer`.
    pub fn clients_sent_to(&self, peer: Peer) -> Tally {
        self.sum(|k| k.peer == peer && k.direction == Direction::Up && k.observer == Observer::Sender)
    }

    pub fn by_type(&self, msg_type: MsgType, observer: Observer) -> Tally {
        self.sum(|k| k.msg_type == msg_type && k.observer == observer)
    }

    pub fn rounds(&self) -> Vec<u32> {
        let ledger = self.ledger.lock().expect("traffic ledger poisoned");
        let mut rounds: Vec<u32> = ledger.keys().map(|k| k.round).collect();
        rounds.dedup();
        rounds
    }

    /// Rounds that carried at least one data message. The shutdown
    /// CONTROL frame is stamped with round T and is not a training round.
    pub fn training_rounds(&self) -> Vec<u32> {
        let ledger = self.ledger.lock().expect("traffic ledger poisoned");
        let mut rounds: Vec<u32> = ledger.keys().filter(|k| k.msg_type != MsgType::Control).map(|k| k.round).collect();
        rounds.dedup();
        rounds
    }

    /// Sender and receiver views agree on every key.
    pub fn is_balanced(&self) -> bool {
        let ledger = self.ledger.lock().expect("traffic ledger poisoned");
        ledger.iter().all(|(k, t)| {
            let mirror = Key {
                observer: match k.observer {
                    Observer::Sender => Observer::Receiver,
                    Observer::Receiver => Observer::Sender,
                },
                ..*k
            };
            ledger.get(&mirror) == Some(t)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn client_view_uses_own_observations() {
        let c = TrafficCounter::new();
        let up = WireMessage::new(MsgType::Smashed, 0, 1).with("a", Tensor::zeros(vec![3]));
        let down = WireMessage::new(MsgType::SmashedGrad, 0, 1).with("g", Tensor::zeros(vec![3]));
        c.record(1, Peer::MainServer, Direction::Up, Observer::Sender, &up, 50);
        c.record(1, Peer::MainServer, Direction::Up, Observer::Receiver, &up, 50);
        c.record(1, Peer::MainServer, Direction::Down, Observer::Sender, &down, 40);
        let t = c.client_totals(1);
        assert_eq!(t.uploaded_elements, 3);
        assert_eq!(t.downloaded_elements, 0);
        assert!(!c.is_balanced());
        c.record(1, Peer::MainServer, Direction::Down, Observer::Receiver, &down, 40);
        assert!(c.is_balanced());
        assert_eq!(c.client_round(1, 0).total_elements(), 6);
        assert_eq!(c.client_round(1, 1).total_elements(), 0);
        assert_eq!(c.server_received(Peer::MainServer), c.clients_sent_to(Peer::MainServer));
    }
}
