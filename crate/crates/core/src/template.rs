//! Single-pass slot substitution for the checked-in prompt templates.
//!
//! Substituted values are never rescanned, so a value that happens to
//! contain another slot token (for example a question quoting the literal
//! string `{choices}`) is not re-expanded.

/// Replace each `{slot}` token with its value in one pass over `template`.
///
/// Slots are matched by exact byte sequence. Unmatched braces are copied
/// through verbatim, which keeps literal JSON braces in templates intact.
pub fn fill_slots(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let bytes = template.as_bytes();
    let mut i = 0;
    'outer: while i < bytes.len() {
        if bytes[i] == b'{' {
            for (slot, value) in slots {
                let token = slot.as_bytes();
                if bytes[i..].starts_with(token) {
                    out.push_str(value);
                    i += token.len();
                    continue 'outer;
                }
            }
        }
        // Copy one full UTF-8 character.
        let ch_len = utf8_len(bytes[i]);
        out.push_str(&template[i..i + ch_len]);
        i += ch_len;
    }
    out
}

fn utf8_len(first: u8) -> usize {
    match first {
        b if b < 0x80 => 1,
        b if b >= 0xF0 => 4,
        b if b >= 0xE0 => 3,
        _ => 2,
    }
}
