//! The scenario language: one command per line, `#` starts a comment.
//!
//! ```text
//! mode cryptocubic
//! setup A
//! fund A 1000
//! transfer A B
//! expect-holdings USER_B Kb, Es, ADD ($10), Kb_Public
//! redeem B X 1000
//! expect-verdict post_transfer_grab false
//! ```

use std::fmt;

use cryptocubic::{BackendKind, Mode, PartyId, Scenario};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Setup { user: String },
    Fund { user: String, cents: u64 },
    Transfer { from: String, to: String },
    Redeem { user: String, dest: String, cents: u64 },
    Attack { scenario: Scenario },
    ExpectHoldings { party: PartyId, vars: Vec<String> },
    ExpectVerdict { scenario: Scenario, expected: bool },
}

/// A parsed command and the line it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Line {
    pub number: usize,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioScript {
    pub commands: Vec<Line>,
    pub seed: u64,
    pub mode: Mode,
    pub backend: BackendKind,
}

impl Default for ScenarioScript {
    fn default() -> Self {
        ScenarioScript {
            commands: vec![],
            seed: 0,
            mode: Mode::CryptoCubic,
            backend: BackendKind::Symbolic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{column}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// Whitespace-separated words with their 1-based columns.
fn words(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s, &line[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out.into_iter()
        .map(|(b, w)| (line[..b].chars().count() + 1, w))
        .collect()
}

struct Cursor<'a> {
    line: usize,
    text: &'a str,
    words: Vec<(usize, &'a str)>,
    next: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, column: usize, message: impl Into<String>) -> SyntaxError {
        SyntaxError {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn end_column(&self) -> usize {
        self.text.chars().count() + 1
    }

    fn word(&mut self, what: &str) -> Result<(usize, &'a str), SyntaxError> {
        let w = self
            .words
            .get(self.next)
            .copied()
            .ok_or_else(|| self.err(self.end_column(), format!("expected {what}")))?;
        self.next += 1;
        Ok(w)
    }

    fn user(&mut self) -> Result<String, SyntaxError> {
        let (col, w) = self.word("a user name")?;
        let mut chars = w.chars();
        let ok = chars.next().is_some_and(|c| c.is_ascii_alphabetic())
            && chars.all(|c| c.is_ascii_alphanumeric());
        if !ok {
            return Err(self.err(col, format!("`{w}` is not a user name (letters and digits)")));
        }
        Ok(w.to_string())
    }

    fn cents(&mut self) -> Result<u64, SyntaxError> {
        let (col, w) = self.word("an amount in cents")?;
        w.parse()
            .map_err(|_| self.err(col, format!("`{w}` is not an amount in cents")))
    }

    fn parsed<T: std::str::FromStr<Err = String>>(&mut self, what: &str) -> Result<T, SyntaxError> {
        let (col, w) = self.word(what)?;
        w.parse().map_err(|e: String| self.err(col, e))
    }

    fn done(&self) -> Result<(), SyntaxError> {
        match self.words.get(self.next) {
            Some((col, w)) => Err(self.err(*col, format!("unexpected `{w}`"))),
            None => Ok(()),
        }
    }
}

fn parse_party(w: &str) -> Option<PartyId> {
    if w == "SERVER_S" {
        return Some(PartyId::Server);
    }
    let name = w.strip_prefix("USER_").unwrap_or(w);
    let mut chars = name.chars();
    let ok = chars.next().is_some_and(|c| c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric());
    ok.then(|| PartyId::user(name))
}

pub fn parse_scenario(text: &str) -> Result<ScenarioScript, SyntaxError> {
    let mut script = ScenarioScript::default();
    for (i, raw) in text.lines().enumerate() {
        let text = raw.split('#').next().unwrap_or("");
        let mut c = Cursor {
            line: i + 1,
            text,
            words: words(text),
            next: 0,
        };
        let Some(&(col, head)) = c.words.first() else {
            continue;
        };
        c.next = 1;
        let command = match head {
            "mode" => {
                script.mode = c.parsed("a mode")?;
                c.done()?;
                continue;
            }
            "backend" => {
                script.backend = c.parsed("a backend")?;
                c.done()?;
                continue;
            }
            "seed" => {
                let (col, w) = c.word("a seed")?;
                script.seed = w
                    .parse()
                    .map_err(|_| c.err(col, format!("`{w}` is not a seed")))?;
                c.done()?;
                continue;
            }
            "setup" => Command::Setup { user: c.user()? },
            "fund" => Command::Fund {
                user: c.user()?,
                cents: c.cents()?,
            },
            "transfer" => Command::Transfer {
                from: c.user()?,
                to: c.user()?,
            },
            "redeem" => Command::Redeem {
                user: c.user()?,
                dest: c.user()?,
                cents: c.cents()?,
            },
            "attack" => Command::Attack {
                scenario: c.parsed("a scenario")?,
            },
            "expect-verdict" => {
                let scenario = c.parsed("a scenario")?;
                let (col, w) = c.word("true or false")?;
                let expected = match w {
                    "true" => true,
                    "false" => false,
                    _ => return Err(c.err(col, format!("expected true or false, found `{w}`"))),
                };
                Command::ExpectVerdict { scenario, expected }
            }
            "expect-holdings" => {
                let (col, w) = c.word("a party")?;
                let party = parse_party(w).ok_or_else(|| c.err(col, format!("`{w}` is not a party")))?;
                // Variables run to the end of the line; names may hold spaces.
                let rest_col = c.words.get(c.next).map_or(c.end_column(), |w| w.0);
                let rest: String = text.chars().skip(rest_col - 1).collect();
                // An empty list asserts the party holds nothing.
                let vars: Vec<String> = if rest.trim().is_empty() {
                    vec![]
                } else {
                    rest.split(',').map(|v| v.trim().to_string()).collect()
                };
                if vars.iter().any(String::is_empty) {
                    return Err(c.err(rest_col, "expected a comma-separated variable list"));
                }
                script.commands.push(Line {
                    number: i + 1,
                    command: Command::ExpectHoldings { party, vars },
                });
                continue;
            }
            other => return Err(c.err(col, format!("unknown command `{other}`"))),
        };
        c.done()?;
        script.commands.push(Line {
            number: i + 1,
            command,
        });
    }
    Ok(script)
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Setup { user } => write!(f, "setup {user}"),
            Command::Fund { user, cents } => write!(f, "fund {user} {cents}"),
            Command::Transfer { from, to } => write!(f, "transfer {from} {to}"),
            Command::Redeem { user, dest, cents } => write!(f, "redeem {user} {dest} {cents}"),
            Command::Attack { scenario } => write!(f, "attack {scenario}"),
            Command::ExpectHoldings { party, vars } if vars.is_empty() => {
                write!(f, "expect-holdings {}", party.column())
            }
            Command::ExpectHoldings { party, vars } => {
                write!(f, "expect-holdings {} {}", party.column(), vars.join(", "))
            }
            Command::ExpectVerdict { scenario, expected } => {
                write!(f, "expect-verdict {scenario} {expected}")
            }
        }
    }
}

/// Canonical text: settings first, then one command per line. Line numbers
/// are not kept, so a reparse renumbers from 4.
impl fmt::Display for ScenarioScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode {}", self.mode.name())?;
        writeln!(f, "backend {}", self.backend.name())?;
        writeln!(f, "seed {}", self.seed)?;
        for l in &self.commands {
            writeln!(f, "{}", l.command)?;
        }
        Ok(())
    }
}
