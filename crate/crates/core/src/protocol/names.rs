//! Variable names as they appear in holdings tables. A user called `A` owns
//! `Ka`/`Ka_Public`, receives the cypher `Ea`, and answers `Et_A` with
//! `Token_A2`.

pub fn user_column(user: &str) -> String {
    format!("USER_{user}")
}

pub fn private_key(user: &str) -> String {
    format!("K{}", user.to_lowercase())
}

pub fn public_key(user: &str) -> String {
    format!("K{}_Public", user.to_lowercase())
}

pub fn owner_cypher(user: &str) -> String {
    format!("E{}", user.to_lowercase())
}

pub fn token(user: &str) -> String {
    format!("Token_{user}")
}

pub fn token_reply(user: &str) -> String {
    format!("Token_{user}2")
}

pub fn token_cypher(user: &str) -> String {
    format!("Et_{user}")
}

pub const SIG_U: &str = "Sig_U";
pub const SIG_S: &str = "Sig_S";
pub const ADD: &str = "ADD";
pub const ES: &str = "Es";
pub const KS: &str = "Ks";
pub const HASH: &str = "Hash";
pub const HASH2: &str = "Hash2";

/// `$10` for 1000, `$10.05` for 1005.
pub fn format_cents(cents: u64) -> String {
    if cents % 100 == 0 {
        format!("${}", cents / 100)
    } else {
        format!("${}.{:02}", cents / 100, cents % 100)
    }
}

/// `ADD ($10)` while funded, bare `ADD` otherwise.
pub fn address_label(balance: u64) -> String {
    if balance > 0 {
        format!("{ADD} ({})", format_cents(balance))
    } else {
        ADD.to_string()
    }
}

/// Suffix distinguishing a server's second and later squares.
pub fn square_suffix(index: usize) -> String {
    if index == 0 {
        String::new()
    } else {
        format!("#{}", index + 1)
    }
}
