//! Built-in prompt templates and `{{name}}` substitution.

use std::collections::BTreeMap;

pub const SYSTEM: &str = "system";
pub const ARCHITECT: &str = "architect";
pub const NOTE_TAKER: &str = "note_taker";
pub const META_SYNTHESIZE: &str = "meta_synthesize";
pub const META_IMPROVE: &str = "meta_improve";
pub const MATCH_FAILURE: &str = "match_failure";

const BUILTIN: &[(&str, &str)] = &[
    (SYSTEM, include_str!("../prompts/system.md")),
    (ARCHITECT, include_str!("../prompts/architect.md")),
    (NOTE_TAKER, include_str!("../prompts/note_taker.md")),
    (META_SYNTHESIZE, include_str!("../prompts/meta_synthesize.md")),
    (META_IMPROVE, include_str!("../prompts/meta_improve.md")),
    (MATCH_FAILURE, include_str!("../prompts/match_failure.md")),
];

pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

/// Template lookup: configured overrides first, then the built-ins.
pub fn template<'a>(overrides: &'a BTreeMap<String, String>, name: &str) -> &'a str {
    overrides.get(name).map(String::as_str).or_else(|| builtin(name)).unwrap_or("")
}

/// Replace each `{{key}}` with its value. Unknown placeholders stay as written.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let key = after[..end].trim();
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[start..start + 2 + end + 2]),
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_substitutes_known_keys() {
        assert_eq!(render("a {{x}} b {{ y }} {{z}}", &[("x", "1"), ("y", "2")]), "a 1 b 2 {{z}}");
        assert_eq!(render("open {{x", &[("x", "1")]), "open {{x");
    }

    #[test]
    fn values_are_not_rescanned() {
        assert_eq!(render("{{a}}", &[("a", "{{b}}"), ("b", "no")]), "{{b}}");
    }

    #[test]
    fn overrides_win() {
        let mut o = BTreeMap::new();
        o.insert(SYSTEM.to_string(), "custom".to_string());
        assert_eq!(template(&o, SYSTEM), "custom");
        assert!(template(&o, ARCHITECT).contains("[CONVERSATION CONTEXT]"));
        assert!(template(&o, MATCH_FAILURE).starts_with("No exact occurrence found"));
    }
}
