use std::collections::BTreeMap;
use std::io::{self, Write};

use cryptocubic::protocol::render_table;
use cryptocubic::{run_attack, AttackVerdict, Config, Scenario, Simulation};
use cryptocubic::adversary::render_report;

use crate::script::{Command, ScenarioScript};

#[derive(Debug, Clone, Copy, Default)]
pub struct Options {
    /// Suppress trace tables; failures and verdicts still print.
    pub quiet: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    /// 0 iff every command succeeded and every expectation held.
    pub status: i32,
    pub trace: String,
    pub verdicts: Vec<AttackVerdict>,
}

impl RunOutcome {
    pub fn success(&self) -> bool {
        self.status == 0
    }
}

pub fn config_of(script: &ScenarioScript) -> Config {
    Config::new(script.mode, script.backend, script.seed)
}

pub fn run(script: &ScenarioScript, out: &mut dyn Write) -> io::Result<RunOutcome> {
    run_with(script, out, Options::default())
}

pub fn run_with(script: &ScenarioScript, out: &mut dyn Write, opts: Options) -> io::Result<RunOutcome> {
    let config = config_of(script);
    let mut sim = Simulation::new(config.clone());
    let mut verdicts: BTreeMap<Scenario, AttackVerdict> = BTreeMap::new();
    let mut order = Vec::new();
    let mut printed = 0;
    let mut failure = None;

    for line in &script.commands {
        let result: Result<(), String> = match &line.command {
            Command::Setup { user } => sim.setup(user).map(drop).map_err(|e| e.to_string()),
            Command::Fund { user, cents } => sim.fund(user, *cents).map_err(|e| e.to_string()),
            Command::Transfer { from, to } => sim.transfer(from, to).map_err(|e| e.to_string()),
            Command::Redeem { user, dest, cents } => {
                sim.redeem(user, dest, *cents).map(drop).map_err(|e| e.to_string())
            }
            Command::Attack { scenario } | Command::ExpectVerdict { scenario, .. } => {
                if !verdicts.contains_key(scenario) {
                    match run_attack(*scenario, &config) {
                        Ok(v) => {
                            verdicts.insert(*scenario, v);
                            order.push(*scenario);
                        }
                        Err(e) => failure = Some(format!("attack {scenario}: {e}")),
                    }
                }
                match (&line.command, verdicts.get(scenario)) {
                    (Command::ExpectVerdict { expected, .. }, Some(v)) if v.can_spend != *expected => Err(
                        format!("expected {scenario} to report {expected}, got {}", v.can_spend),
                    ),
                    _ => Ok(()),
                }
            }
            Command::ExpectHoldings { party, vars } => {
                let mut have = sim.holdings(party);
                let mut want = vars.clone();
                have.sort();
                want.sort();
                if have == want {
                    Ok(())
                } else {
                    Err(format!(
                        "{} holds {}",
                        party.column(),
                        if have.is_empty() { "nothing".to_string() } else { sim.holdings(party).join(", ") }
                    ))
                }
            }
        };

        if !opts.quiet {
            for ev in &sim.trace()[printed..] {
                if ev.step > 1 {
                    writeln!(out)?;
                }
                write!(out, "{}", render_table(ev))?;
            }
        }
        printed = sim.trace().len();

        if let Err(e) = result {
            failure.get_or_insert(format!("{}: {e}", line.command));
        }
        if let Some(f) = &failure {
            writeln!(out, "error: line {}: {f}", line.number)?;
            break;
        }
    }

    let verdicts: Vec<AttackVerdict> = order.iter().filter_map(|s| verdicts.remove(s)).collect();
    if !verdicts.is_empty() {
        if printed > 0 && !opts.quiet {
            writeln!(out)?;
        }
        write!(out, "{}", render_report(&verdicts))?;
    }
    Ok(RunOutcome {
        status: i32::from(failure.is_some()),
        trace: sim.trace_text(),
        verdicts,
    })
}
