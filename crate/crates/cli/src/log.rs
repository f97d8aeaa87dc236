//! Line-oriented `key=value` records.

use std::fmt::{Display, Write};

#[derive(Debug, Clone)]
pub struct Record {
    line: String,
}

impl Record {
    pub fn new(event: &str) -> Self {
        Self {
            line: format!("event={event}"),
        }
    }

    pub fn kv(mut self, key: &str, value: impl Display) -> Self {
        let v = value.to_string();
        if v.is_empty() || v.contains(char::is_whitespace) || v.contains('"') {
            let _ = write!(self.line, " {key}={v:?}");
        } else {
            let _ = write!(self.line, " {key}={v}");
        }
        self
    }

    pub fn as_str(&self) -> &str {
        &self.line
    }

    /// Write to stderr, which carries progress; stdout carries results.
    pub fn emit(&self) {
        eprintln!("{}", self.line);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotes_values_with_spaces() {
        let r = Record::new("x").kv("a", 1).kv("b", "two words").kv("c", "");
        assert_eq!(r.as_str(), r#"event=x a=1 b="two words" c="""#);
    }
}
