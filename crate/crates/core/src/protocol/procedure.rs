use crate::crypto::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcedureState {
    Running,
    Terminated,
}

/// A transient computation scope. Its bindings never appear in a memory
/// snapshot and are erased when it terminates.
#[derive(Debug)]
pub struct DynamicProcedure {
    scope_id: u64,
    bindings: Vec<(String, Value)>,
    /// Slot label this procedure filled while running, shown as `-- [x]`.
    stored: Option<String>,
    state: ProcedureState,
}

impl DynamicProcedure {
    pub fn open(scope_id: u64) -> Self {
        DynamicProcedure {
            scope_id,
            bindings: Vec::new(),
            stored: None,
            state: ProcedureState::Running,
        }
    }

    pub fn scope_id(&self) -> u64 {
        self.scope_id
    }

    pub fn state(&self) -> ProcedureState {
        self.state
    }

    /// Binds `name`, replacing an earlier binding of the same name in place.
    pub fn bind(&mut self, name: impl Into<String>, value: Value) {
        debug_assert_eq!(self.state, ProcedureState::Running);
        let name = name.into();
        match self.bindings.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.bindings.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.bindings.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.bindings.iter().map(|(n, _)| n.as_str())
    }

    pub fn mark_stored(&mut self, slot_label: impl Into<String>) {
        self.stored = Some(slot_label.into());
    }

    pub fn stored(&self) -> Option<&str> {
        self.stored.as_deref()
    }

    /// `<a,b,c>` or `<a,b,c> -- [x]`; `None` once terminated.
    pub fn render(&self) -> Option<String> {
        if self.state == ProcedureState::Terminated {
            return None;
        }
        let names: Vec<&str> = self.names().collect();
        let mut line = format!("<{}>", names.join(","));
        if let Some(s) = &self.stored {
            line.push_str(&format!(" -- [{s}]"));
        }
        Some(line)
    }

    pub fn terminate(&mut self) {
        self.bindings.clear();
        self.stored = None;
        self.state = ProcedureState::Terminated;
    }
}
