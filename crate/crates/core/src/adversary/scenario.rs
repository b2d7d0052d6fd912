use std::fmt;

use crate::crypto::{decode_value, Value};
use crate::protocol::{
    Config, Fault, Message, MessageKind, Mode, PartyId, ProtocolError, Simulation, SquareId,
    UserSquare,
};
use crate::store::Presence;

use super::{can_spend, Coalition, Derivation, SpendCheck};

/// Printed with every verdict report: wiretap safety depends on it.
pub const ASSUMPTION: &str =
    "# assumption: private keys sent to Server_S travel on a confidential channel";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    PostTransferGrab,
    CounterfeitEs,
    TokenReplay,
    DoubleTransfer,
    WiretapPassive,
    StoreRaid,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::PostTransferGrab,
        Scenario::CounterfeitEs,
        Scenario::TokenReplay,
        Scenario::DoubleTransfer,
        Scenario::WiretapPassive,
        Scenario::StoreRaid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::PostTransferGrab => "post_transfer_grab",
            Scenario::CounterfeitEs => "counterfeit_es",
            Scenario::TokenReplay => "token_replay",
            Scenario::DoubleTransfer => "double_transfer",
            Scenario::WiretapPassive => "wiretap_passive",
            Scenario::StoreRaid => "store_raid",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub struct AttackVerdict {
    pub scenario: Scenario,
    pub mode: Mode,
    pub can_spend: bool,
    pub witness: Vec<Derivation>,
    pub check: SpendCheck,
    /// How the staged protocol run reacted, e.g. an abort.
    pub notes: Vec<String>,
}

impl AttackVerdict {
    /// `scenario mode verdict [witness-length]`
    pub fn line(&self) -> String {
        let mut s = format!("{} {} {}", self.scenario, self.mode.name(), self.can_spend);
        if self.can_spend {
            s.push_str(&format!(" {}", self.witness.len()));
        }
        s
    }
}

pub fn render_report(verdicts: &[AttackVerdict]) -> String {
    let mut out: String = verdicts.iter().map(|v| v.line() + "\n").collect();
    out.push_str(ASSUMPTION);
    out.push('\n');
    out
}

/// Takes whatever the square's slot holds, as an attacker with open read
/// access would.
fn grab(sim: &Simulation, sq: SquareId) -> Vec<Value> {
    let Some(slot) = sim.square_info(sq).and_then(|s| s.slot) else {
        return vec![];
    };
    sim.store()
        .take(slot)
        .ok()
        .and_then(|(b, _)| decode_value(&b).ok())
        .into_iter()
        .collect()
}

fn grab_all(sim: &Simulation) -> Vec<Value> {
    let store = sim.store();
    store
        .presence()
        .into_iter()
        .filter(|(_, p)| *p == Presence::Present)
        .filter_map(|(slot, _)| store.take(slot).ok())
        .filter_map(|(b, _)| decode_value(&b).ok())
        .collect()
}

fn snapshot(sim: &Simulation, party: &str) -> Vec<Value> {
    sim.user(party).map(|u| u.snapshot()).unwrap_or_default()
}

fn note<T>(notes: &mut Vec<String>, what: &str, r: Result<T, ProtocolError>) {
    notes.push(match r {
        Ok(_) => format!("{what}: completed"),
        Err(e) => format!("{what}: {e}"),
    });
}

/// An eavesdropper who copies what the victim received in the clear and
/// the victim's last token reply, then tries to redeem with them.
fn stage_impostor(sim: &mut Simulation, victim: &str, name: &str) {
    let victim_id = PartyId::user(victim);
    let mut square = None;
    let mut token = None;
    for env in sim.network().wiretap() {
        let Ok(m) = Message::decode(&env.bytes) else { continue };
        match m.kind {
            MessageKind::Offer | MessageKind::PlainOffer if env.to == victim_id => {
                square = Some(m.payload);
            }
            MessageKind::ChallengeResponse if env.from == victim_id => {
                if let Some(Value::Token(t)) = m.payload.first() {
                    token = Some(t.clone());
                }
            }
            _ => {}
        }
    }
    let sq_id = sim
        .user(victim)
        .and_then(|u| u.squares.last())
        .map(|s| s.square_id);
    let planted = match (square, sq_id) {
        (Some(p), Some(id)) => match p.as_slice() {
            [first, Value::Address(addr)] => Some(UserSquare {
                square_id: id,
                address: *addr,
                es: first.as_cypher().cloned(),
                sig_u: match first {
                    Value::SigningKey(k) => Some(k.clone()),
                    _ => None,
                },
                sig_s: None,
            }),
            _ => None,
        },
        _ => None,
    };
    let u = sim.ensure_user(name);
    u.squares.extend(planted);
    u.token_reply = token;
    sim.inject(name, Fault::ReplayToken);
}

/// Stages a fresh honest run for `scenario`, lets the attacker act, and
/// checks the resulting coalition against the run's square.
pub fn run_attack(scenario: Scenario, config: &Config) -> Result<AttackVerdict, ProtocolError> {
    let mut sim = Simulation::new(config.clone());
    let sq = sim.setup("A")?;
    sim.fund("A", 1000)?;
    let mut notes = Vec::new();
    let all = usize::MAX;

    let coalition = match scenario {
        Scenario::PostTransferGrab => {
            sim.transfer("A", "B")?;
            let taken = grab(&sim, sq);
            Coalition::new()
                .with("USER_A", snapshot(&sim, "A"))
                .with("SERVER_S", sim.server().snapshot())
                .with("take", taken)
        }
        Scenario::CounterfeitEs => {
            sim.inject("A", Fault::CounterfeitEs);
            let r = sim.transfer("A", "B");
            note(&mut notes, "transfer", r);
            // A is still the rightful owner after an abort, so a take by A
            // would be a redemption, not a theft.
            Coalition::new()
                .with("USER_A", snapshot(&sim, "A"))
                .with_wiretap(sim.network(), all)
        }
        Scenario::TokenReplay => {
            sim.transfer("A", "B")?;
            stage_impostor(&mut sim, "B", "E");
            let r = sim.redeem("E", "E", 1000);
            note(&mut notes, "impostor redeem", r);
            Coalition::new()
                .with("USER_E", snapshot(&sim, "E"))
                .with_wiretap(sim.network(), all)
        }
        Scenario::DoubleTransfer => {
            if sim.mode() == Mode::Baseline3 {
                let r = sim.plain_transfer("A", "B", sq);
                note(&mut notes, "transfer to B", r);
                let r = sim.plain_transfer("A", "C", sq);
                note(&mut notes, "transfer to C", r);
            } else {
                let one = sim.begin_transfer("A", "B", sq)?;
                let two = sim.begin_transfer("A", "C", sq)?;
                if sim.mode().authenticated() {
                    sim.authenticate_sender(one)?;
                    sim.authenticate_sender(two)?;
                }
                sim.withdraw(one)?;
                let r = sim.withdraw(two);
                note(&mut notes, "second session", r);
                if sim.mode().authenticated() {
                    sim.authenticate_receiver(one)?;
                    sim.verify_es(one)?;
                }
                let r = sim.complete_transfer(one);
                note(&mut notes, "first session", r);
            }
            let taken = grab(&sim, sq);
            Coalition::new()
                .with("USER_A", snapshot(&sim, "A"))
                .with("USER_C", snapshot(&sim, "C"))
                .with_wiretap(sim.network(), all)
                .with("take", taken)
        }
        Scenario::WiretapPassive => {
            sim.transfer("A", "B")?;
            sim.redeem("B", "X", 1000)?;
            Coalition::new().with_wiretap(sim.network(), all)
        }
        Scenario::StoreRaid => {
            sim.transfer("A", "B")?;
            let taken = grab_all(&sim);
            Coalition::new()
                .with("SERVER_S", sim.server().snapshot())
                .with("take", taken)
        }
    };

    let square = sim
        .square_info(sq)
        .ok_or(ProtocolError::UnknownSquare(sq))?;
    let closure = coalition.close(sim.backend());
    let check = can_spend(sim.backend(), sim.ledger(), &closure, &square);
    Ok(AttackVerdict {
        scenario,
        mode: sim.mode(),
        can_spend: check.can_spend,
        witness: check.witness.clone(),
        check,
        notes,
    })
}

/// Spend verdicts for the coalitions checked at each step of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepAudit {
    pub step: usize,
    pub server: bool,
    pub server_and_user: bool,
    pub wiretap: bool,
    pub raid: bool,
    /// Server, `user` and one take of every slot: the owner's redemption
    /// right while `user` owns the square.
    pub owner_redeem: bool,
}

/// Replays the coalitions over every recorded step of `sim`'s trace.
pub fn audit_trace(sim: &Simulation, sq: SquareId, user: &str) -> Vec<StepAudit> {
    let Some(square) = sim.square_info(sq) else {
        return vec![];
    };
    let b = sim.backend();
    let check = |c: Coalition| can_spend(b, sim.ledger(), &c.close(b), &square).can_spend;
    sim.trace()
        .iter()
        .map(|ev| {
            let v = &ev.view;
            let server = || Coalition::new().with("SERVER_S", v.server.clone());
            let mine = v.users.get(user).cloned().unwrap_or_default();
            StepAudit {
                step: ev.step,
                server: check(server()),
                server_and_user: check(server().with(user, mine.clone())),
                wiretap: check(Coalition::new().with_wiretap(sim.network(), v.wiretap_len)),
                raid: check(server().with("take", v.raid.clone())),
                owner_redeem: check(server().with(user, mine).with("take", v.raid.clone())),
            }
        })
        .collect()
}
