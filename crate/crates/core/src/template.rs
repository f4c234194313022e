//! Slot substitution for prompt templates.
//!
//! Templates use `{slot_name}` placeholders. Substitution is literal (no
//! escaping), and a render fails if a declared slot is left unfilled, so a
//! template/caller mismatch surfaces immediately instead of leaking a bare
//! placeholder into a prompt.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("no value supplied for template slot `{0}`")]
    MissingSlot(String),
}

/// Replace every `{name}` placeholder listed in `slots` with its value.
///
/// `slots` must cover every declared placeholder of the template; the
/// template may also contain literal braces (e.g. JSON examples), which pass
/// through untouched as long as they do not spell a declared slot name.
pub fn fill_template(
    template: &str,
    slots: &[(&str, &str)],
    declared: &[&str],
) -> Result<String, TemplateError> {
    let mut out = template.to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    for name in declared {
        let placeholder = format!("{{{name}}}");
        if out.contains(&placeholder) {
            return Err(TemplateError::MissingSlot((*name).to_string()));
        }
    }
    Ok(out)
}
