#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;

use speclog::trace::TraceRecord;
use speclog::{parse_scenario, Command, Scenario};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.scn"))
}

pub fn scenario(name: &str) -> Scenario {
    let text = std::fs::read_to_string(scenario_path(name)).expect("bundled scenario");
    parse_scenario(&text).expect("bundled scenario parses")
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("golden")
        .join(format!("{name}.trace"))
}

/// Records of `kind` whose `key` field equals `value`.
pub fn matching<'a>(
    trace: &'a [TraceRecord],
    kind: &'a str,
    key: &'a str,
    value: &'a str,
) -> impl Iterator<Item = (usize, &'a TraceRecord)> + 'a {
    trace
        .iter()
        .enumerate()
        .filter(move |(_, r)| r.kind == kind && r.get(key) == Some(value))
}

/// `<client>#<seq> <payload>` per user entry, one line each.
pub fn render_user_entries<'a>(cmds: impl IntoIterator<Item = &'a Command>) -> String {
    let mut out = String::new();
    for c in cmds {
        if let Command::User { id, payload } = c {
            out.push_str(&format!("{id} {}\n", String::from_utf8_lossy(payload)));
        }
    }
    out
}
