//! Prompt templates and puzzle rendering.
//!
//! Templates are text assets compiled into the binary. Placeholders are
//! written `{{name}}`; rendering fails if a placeholder is left unfilled or
//! a supplied value has no placeholder, so template drift is caught early.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::grid::Puzzle;

pub const TEMPLATES: &[(&str, &str)] = &[
    ("system", include_str!("../prompts/system.txt")),
    ("solve", include_str!("../prompts/solve.txt")),
    ("solve_memory", include_str!("../prompts/solve_memory.txt")),
    ("retry", include_str!("../prompts/retry.txt")),
    ("truncated", include_str!("../prompts/truncated.txt")),
    ("no_program", include_str!("../prompts/no_program.txt")),
    ("repair", include_str!("../prompts/repair.txt")),
    ("caption", include_str!("../prompts/caption.txt")),
    ("oe_select", include_str!("../prompts/oe_select.txt")),
    ("ps_select", include_str!("../prompts/ps_select.txt")),
    ("oe_derive", include_str!("../prompts/oe_derive.txt")),
    ("oe_extract", include_str!("../prompts/oe_extract.txt")),
    ("ps_pseudocode", include_str!("../prompts/ps_pseudocode.txt")),
    ("ps_abstract", include_str!("../prompts/ps_abstract.txt")),
];

pub fn template(name: &str) -> &'static str {
    TEMPLATES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .unwrap_or_else(|| panic!("unknown prompt template {name:?}"))
}

/// Fills `{{key}}` placeholders. Values are inserted verbatim and are not
/// rescanned, so braces inside values are safe.
pub fn render(name: &str, values: &[(&str, &str)]) -> String {
    let text = template(name);
    let mut out = String::with_capacity(text.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut used = vec![false; values.len()];
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .unwrap_or_else(|| panic!("unterminated placeholder in template {name:?}"));
        let key = &after[..end];
        let idx = values
            .iter()
            .position(|(k, _)| *k == key)
            .unwrap_or_else(|| panic!("template {name:?} needs a value for {key:?}"));
        used[idx] = true;
        out.push_str(values[idx].1);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    if let Some(i) = used.iter().position(|u| !u) {
        panic!("template {name:?} has no placeholder {:?}", values[i].0);
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of every template, keyed by name.
pub fn template_hashes() -> BTreeMap<String, String> {
    TEMPLATES
        .iter()
        .map(|(n, t)| (n.to_string(), sha256_hex(t.as_bytes())))
        .collect()
}

/// Train pairs in full and test inputs only. Expected test outputs are
/// never rendered.
pub fn render_puzzle(puzzle: &Puzzle) -> String {
    let mut out = String::new();
    for (i, pair) in puzzle.train.iter().enumerate() {
        out.push_str(&format!(
            "## Example {}\nInput:\n{}\nOutput:\n{}\n",
            i + 1,
            pair.input.render_text(),
            pair.output.render_text()
        ));
    }
    for (i, case) in puzzle.test.iter().enumerate() {
        out.push_str(&format!("## Test input {}\n{}\n", i + 1, case.input.render_text()));
    }
    out
}
