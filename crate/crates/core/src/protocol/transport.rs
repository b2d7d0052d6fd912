use std::collections::VecDeque;

use super::message::{Message, MessageKind};
use super::{PartyId, ProtocolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Visible to a passive wiretap.
    Open,
    /// Authenticated, encrypted link between a user and the server.
    Confidential,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub seq: u64,
    pub from: PartyId,
    pub to: PartyId,
    pub channel: Channel,
    pub bytes: Vec<u8>,
}

/// What an interposer does with an envelope in flight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Deliver,
    Drop,
    Replace(Vec<u8>),
}

type Interposer = Box<dyn FnMut(&Envelope) -> Action + Send>;

/// Deterministic in-process FIFO with a logical clock and an optional
/// adversary hook on every send.
#[derive(Default)]
pub struct Network {
    queue: VecDeque<Envelope>,
    transcript: Vec<Envelope>,
    interposer: Option<Interposer>,
    next_seq: u64,
    now: u64,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("queued", &self.queue.len())
            .field("sent", &self.transcript.len())
            .field("now", &self.now)
            .finish()
    }
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_interposer(&mut self, f: impl FnMut(&Envelope) -> Action + Send + 'static) {
        self.interposer = Some(Box::new(f));
    }

    pub fn clear_interposer(&mut self) {
        self.interposer = None;
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn tick(&mut self, n: u64) {
        self.now += n;
    }

    pub fn send(&mut self, from: PartyId, to: PartyId, channel: Channel, msg: &Message) {
        self.next_seq += 1;
        let mut env = Envelope {
            seq: self.next_seq,
            from,
            to,
            channel,
            bytes: msg.encode(),
        };
        let action = self
            .interposer
            .as_mut()
            .map_or(Action::Deliver, |f| f(&env));
        match action {
            Action::Deliver => {}
            Action::Drop => return,
            Action::Replace(bytes) => env.bytes = bytes,
        }
        self.tick(1);
        self.transcript.push(env.clone());
        self.queue.push_back(env);
    }

    /// Next message addressed to `to`. With nothing queued the receiver
    /// waits out `timeout` ticks.
    pub fn recv(
        &mut self,
        to: &PartyId,
        expected: MessageKind,
        timeout: u64,
    ) -> Result<Message, ProtocolError> {
        let Some(pos) = self.queue.iter().position(|e| &e.to == to) else {
            self.tick(timeout);
            return Err(ProtocolError::Timeout(format!("{expected:?} at {to}")));
        };
        let env = self.queue.remove(pos).expect("position is valid");
        let msg = Message::decode(&env.bytes)?;
        if msg.kind != expected {
            return Err(ProtocolError::UnexpectedMessage(format!(
                "{to} expected {expected:?}, got {:?}",
                msg.kind
            )));
        }
        Ok(msg)
    }

    pub fn transcript(&self) -> &[Envelope] {
        &self.transcript
    }

    /// Messages on open channels, the passive wiretap's view.
    pub fn wiretap(&self) -> impl Iterator<Item = &Envelope> {
        self.transcript.iter().filter(|e| e.channel == Channel::Open)
    }

    pub fn drain(&mut self) {
        self.queue.clear();
    }
}
