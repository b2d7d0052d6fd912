use std::collections::BTreeMap;

use crate::crypto::Value;

use super::PartyId;

/// Attacker-relevant values captured alongside a step: persistent memory of
/// every party, what one take per full slot would yield, and how much of
/// the open-channel transcript existed at that point.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepView {
    pub server: Vec<Value>,
    pub users: BTreeMap<String, Vec<Value>>,
    pub raid: Vec<Value>,
    pub wiretap_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: usize,
    pub label: String,
    /// Columns in display order with one variable per entry.
    pub columns: Vec<(PartyId, Vec<String>)>,
    pub view: StepView,
}

impl TraceEvent {
    pub fn holdings(&self, party: &PartyId) -> Option<&[String]> {
        self.columns
            .iter()
            .find(|(p, _)| p == party)
            .map(|(_, v)| v.as_slice())
    }
}

/// One table: a `== step N: label ==` line, a header row, then variables
/// row by row. Cells are padded to the column width and joined by ` | `.
pub fn render_table(ev: &TraceEvent) -> String {
    let headers: Vec<String> = ev.columns.iter().map(|(p, _)| p.column()).collect();
    let widths: Vec<usize> = ev
        .columns
        .iter()
        .zip(&headers)
        .map(|((_, vars), h)| {
            vars.iter()
                .map(|v| v.chars().count())
                .chain(std::iter::once(h.chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let rows = ev.columns.iter().map(|(_, v)| v.len()).max().unwrap_or(0);

    let line = |cells: Vec<&str>| -> String {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str(" | ");
            }
            s.push_str(cell);
            let pad = widths[i].saturating_sub(cell.chars().count());
            s.extend(std::iter::repeat(' ').take(pad));
        }
        s.trim_end().to_string()
    };

    let mut out = format!("== step {}: {} ==\n", ev.step, ev.label);
    out.push_str(&line(headers.iter().map(String::as_str).collect()));
    out.push('\n');
    for r in 0..rows {
        let cells = ev
            .columns
            .iter()
            .map(|(_, v)| v.get(r).map_or("", String::as_str))
            .collect();
        out.push_str(&line(cells));
        out.push('\n');
    }
    out
}

/// Tables separated by blank lines. An empty trace renders as "".
pub fn render_trace(events: &[TraceEvent]) -> String {
    events
        .iter()
        .map(render_table)
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(cols: Vec<(PartyId, Vec<&str>)>) -> TraceEvent {
        TraceEvent {
            step: 3,
            label: "x".into(),
            columns: cols
                .into_iter()
                .map(|(p, v)| (p, v.into_iter().map(String::from).collect()))
                .collect(),
            view: StepView::default(),
        }
    }

    #[test]
    fn pads_and_trims() {
        let t = ev(vec![
            (PartyId::user("A"), vec!["Ka", "Ka_Public"]),
            (PartyId::Server, vec!["<Ks,Ka_Public>", "Ks", "Ka_Public"]),
        ]);
        assert_eq!(
            render_table(&t),
            "== step 3: x ==\n\
             USER_A    | SERVER_S\n\
             Ka        | <Ks,Ka_Public>\n\
             Ka_Public | Ks\n          \
             | Ka_Public\n"
        );
    }

    #[test]
    fn empty_trace_is_empty() {
        assert_eq!(render_trace(&[]), "");
    }
}
