//! Teacher prompt templates: on input `x`, ask the teacher to perform the
//! task directive while respecting the instruction.

use alloc::{
    format,
    string::{String, ToString},
    vec::Vec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{input}";
pub const DEFAULT_INPUT_BLOCK: &str = "Input:\n{input}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate", into = "RawTemplate")]
pub struct Template {
    task_directive: String,
    instruction: String,
    preamble: Option<String>,
    input_block: String,
}

#[derive(Serialize, Deserialize)]
struct RawTemplate {
    task_directive: String,
    instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preamble: Option<String>,
    #[serde(default = "default_input_block")]
    input_block: String,
}

fn default_input_block() -> String {
    DEFAULT_INPUT_BLOCK.to_string()
}

impl TryFrom<RawTemplate> for Template {
    type Error = Error;

    fn try_from(raw: RawTemplate) -> Result<Self> {
        Template::with_input_block(
            raw.task_directive,
            raw.instruction,
            raw.preamble,
            raw.input_block,
        )
    }
}

impl From<Template> for RawTemplate {
    fn from(t: Template) -> Self {
        RawTemplate {
            task_directive: t.task_directive,
            instruction: t.instruction,
            preamble: t.preamble,
            input_block: t.input_block,
        }
    }
}

impl Template {
    pub fn new(
        task_directive: impl Into<String>,
        instruction: impl Into<String>,
        preamble: Option<String>,
    ) -> Result<Self> {
        Self::with_input_block(task_directive, instruction, preamble, DEFAULT_INPUT_BLOCK)
    }

    /// Validates that the directive and instruction are non-empty and that
    /// the placeholder occurs exactly once across the whole layout, inside
    /// the input block.
    pub fn with_input_block(
        task_directive: impl Into<String>,
        instruction: impl Into<String>,
        preamble: Option<String>,
        input_block: impl Into<String>,
    ) -> Result<Self> {
        let t = Template {
            task_directive: task_directive.into(),
            instruction: instruction.into(),
            preamble,
            input_block: input_block.into(),
        };
        if t.task_directive.trim().is_empty() {
            return Err(Error::InvalidTemplate("empty task directive".into()));
        }
        if t.instruction.trim().is_empty() {
            return Err(Error::InvalidTemplate("empty instruction".into()));
        }
        let fixed = [
            t.preamble.as_deref().unwrap_or(""),
            &t.task_directive,
            &t.instruction,
        ];
        if fixed.iter().any(|s| s.contains(PLACEHOLDER)) {
            return Err(Error::InvalidTemplate(format!(
                "{PLACEHOLDER} may only appear in the input block"
            )));
        }
        match t.input_block.matches(PLACEHOLDER).count() {
            1 => Ok(t),
            0 => Err(Error::InvalidTemplate(format!("missing {PLACEHOLDER}"))),
            n => Err(Error::InvalidTemplate(format!(
                "{PLACEHOLDER} appears {n} times"
            ))),
        }
    }

    /// Counter-narration: a polite, respectful rebuttal.
    pub fn counter_narration() -> Self {
        Template::new(
            "Write a counter-narration that responds to the following text.",
            "Be polite and respectful: the response must be socially acceptable and not aggressive toward the author.",
            None,
        )
        .expect("built-in template is valid")
    }

    /// Offensive-to-inoffensive style transfer.
    pub fn style_transfer() -> Self {
        Template::new(
            "Style transfer the input text from offensive to inoffensive while keeping its intent.",
            "Ensure the generated output respects social acceptability and is not aggressive.",
            None,
        )
        .expect("built-in template is valid")
    }

    pub fn task_directive(&self) -> &str {
        &self.task_directive
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn preamble(&self) -> Option<&str> {
        self.preamble.as_deref()
    }

    fn head(&self) -> String {
        let mut parts: Vec<&str> = Vec::new();
        if let Some(p) = &self.preamble {
            parts.push(p);
        }
        parts.push(&self.task_directive);
        parts.push(&self.instruction);
        let mut head = parts.join("\n\n");
        head.push_str("\n\n");
        head
    }

    fn block_parts(&self) -> (&str, &str) {
        self.input_block
            .split_once(PLACEHOLDER)
            .expect("validated at construction")
    }

    /// Preamble, directive, instruction and the input block, separated by
    /// blank lines. `x` is inserted verbatim.
    pub fn render(&self, x: &str) -> String {
        let (before, after) = self.block_parts();
        let mut out = self.head();
        out.push_str(before);
        out.push_str(x);
        out.push_str(after);
        out
    }

    /// Recovers `x` from a prompt produced by [`Template::render`].
    pub fn extract_input<'a>(&self, prompt: &'a str) -> Option<&'a str> {
        let (before, after) = self.block_parts();
        let rest = prompt.strip_prefix(self.head().as_str())?;
        rest.strip_prefix(before)?.strip_suffix(after)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_contains_all_parts_once() {
        let t = Template::new(
            "counter the following text",
            "be polite and respectful",
            None,
        )
        .unwrap();
        let p = t.render("hello");
        assert!(p.contains("counter the following text"));
        assert!(p.contains("be polite and respectful"));
        assert_eq!(p.matches("hello").count(), 1);
        assert_eq!(p, t.render("hello"));
        assert_eq!(t.extract_input(&p), Some("hello"));
    }

    #[test]
    fn placeholder_in_input_is_verbatim() {
        let t = Template::counter_narration();
        let p = t.render("say {input} twice {input}");
        assert_eq!(p.matches("{input}").count(), 2);
        assert!(p.ends_with("say {input} twice {input}"));
        assert_eq!(t.extract_input(&p), Some("say {input} twice {input}"));
    }

    #[test]
    fn validation_at_load_time() {
        assert!(Template::with_input_block("d", "i", None, "no slot").is_err());
        assert!(Template::with_input_block("d", "i", None, "{input}{input}").is_err());
        assert!(Template::new("d {input}", "i", None).is_err());
        assert!(Template::new("", "i", None).is_err());
        assert!(Template::new("d", " ", None).is_err());
    }

    #[test]
    fn preamble_comes_first() {
        let t = Template::new("d", "i", Some("You are careful.".into())).unwrap();
        assert_eq!(t.render("x"), "You are careful.\n\nd\n\ni\n\nInput:\nx");
    }

    #[test]
    fn serde_validates() {
        let ok = r#"{"task_directive":"d","instruction":"i","input_block":"<{input}>"}"#;
        let t: Template = serde_json::from_str(ok).unwrap();
        assert_eq!(t.render("x"), "d\n\ni\n\n<x>");
        let bad = r#"{"task_directive":"d","instruction":"i","input_block":"none"}"#;
        assert!(serde_json::from_str::<Template>(bad).is_err());
    }
}
