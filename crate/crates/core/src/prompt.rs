//! Prompt templates and prompt suites.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{invalid, CoreError, Result};

pub const SLOT: &str = "{}";

/// The prompt suite shipped with the crate.
pub const DEFAULT_PROMPT_SUITE: &str = include_str!("../data/prompts.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptCategory {
    ClassLabel,
    Caption,
    Color,
    Texture,
}

impl PromptCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ClassLabel => "class_label",
            Self::Caption => "caption",
            Self::Color => "color",
            Self::Texture => "texture",
        }
    }

    fn slots(self) -> usize {
        match self {
            Self::Caption => 0,
            _ => 1,
        }
    }
}

impl fmt::Display for PromptCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptCategory {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_label" => Ok(Self::ClassLabel),
            "caption" => Ok(Self::Caption),
            "color" => Ok(Self::Color),
            "texture" => Ok(Self::Texture),
            other => invalid(alloc::format!("unknown prompt category `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub variant_name: String,
    pub category: PromptCategory,
    pub template: String,
    /// Substitution used when the caller does not provide one.
    pub fill: Option<String>,
}

impl PromptTemplate {
    pub fn new(
        variant_name: &str,
        category: PromptCategory,
        template: &str,
        fill: Option<&str>,
    ) -> Result<Self> {
        let slots = template.matches(SLOT).count();
        if slots != category.slots() {
            return invalid(alloc::format!(
                "template `{template}` has {slots} slots, {category} needs {}",
                category.slots()
            ));
        }
        if variant_name.is_empty() {
            return invalid("variant name must not be empty");
        }
        Ok(Self {
            variant_name: variant_name.to_string(),
            category,
            template: template.to_string(),
            fill: fill.map(|f| f.to_string()),
        })
    }
}

/// Renders a template. Caption templates return the substitution unchanged.
pub fn render_prompt(template: &PromptTemplate, substitution: Option<&str>) -> Result<String> {
    let sub = substitution.filter(|s| !s.is_empty()).or(template.fill.as_deref());
    match (template.category, sub) {
        (PromptCategory::Caption, Some(caption)) => Ok(caption.to_string()),
        (_, Some(s)) => Ok(template.template.replacen(SLOT, s, 1)),
        (_, None) => invalid(alloc::format!(
            "template `{}` needs a substitution",
            template.variant_name
        )),
    }
}

/// Parses `variant_name | category | template | fill` lines; `#` starts a comment.
pub fn parse_prompt_suite(text: &str) -> Result<Vec<PromptTemplate>> {
    let mut out: Vec<PromptTemplate> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        if !(3..=4).contains(&fields.len()) {
            return invalid(alloc::format!("line {}: expected 3 or 4 `|` separated fields", lineno + 1));
        }
        let category: PromptCategory = fields[1].parse()?;
        let fill = fields.get(3).copied().filter(|f| !f.is_empty());
        let t = PromptTemplate::new(fields[0], category, fields[2], fill)?;
        if out.iter().any(|p| p.variant_name == t.variant_name) {
            return invalid(alloc::format!("duplicate variant `{}`", t.variant_name));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn default_prompt_suite() -> Vec<PromptTemplate> {
    parse_prompt_suite(DEFAULT_PROMPT_SUITE).expect("shipped suite parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn find(name: &str) -> PromptTemplate {
        default_prompt_suite().into_iter().find(|p| p.variant_name == name).unwrap()
    }

    #[test]
    fn shipped_suite_reproduces_table_wording() {
        let expected = [
            ("color_prompt_1", "This is a picture of a vivid red background"),
            ("color_prompt_2", "This is a picture of a vivid green background"),
            ("color_prompt_3", "This is a picture of a vivid blue background"),
            ("color_prompt_4", "This is a picture of a vivid colorful background"),
            ("texture_prompt_1", "This is a picture of textures in the background"),
            ("texture_prompt_2", "This is a picture of intricately textured background"),
            ("texture_prompt_3", "This is a picture of colorful textured background"),
            ("texture_prompt_4", "This is a photo of distorted textures in the background"),
        ];
        for (name, text) in expected {
            assert_eq!(render_prompt(&find(name), None).unwrap(), text);
        }
        assert_eq!(default_prompt_suite().len(), 10);
    }

    #[test]
    fn class_label_and_caption() {
        assert_eq!(
            render_prompt(&find("class_label"), Some("tench")).unwrap(),
            "This is a picture of a tench"
        );
        assert!(render_prompt(&find("class_label"), None).is_err());
        assert!(render_prompt(&find("class_label"), Some("")).is_err());
        let cap = "a picture of a circle on a plain background";
        assert_eq!(render_prompt(&find("caption"), Some(cap)).unwrap(), cap);
        assert!(render_prompt(&find("caption"), None).is_err());
    }

    #[test]
    fn slot_count_enforced() {
        assert!(PromptTemplate::new("x", PromptCategory::Color, "no slot", None).is_err());
        assert!(PromptTemplate::new("x", PromptCategory::Caption, "a {}", None).is_err());
        assert!(PromptTemplate::new("x", PromptCategory::Texture, "{} and {}", None).is_err());
    }

    #[test]
    fn suite_parse_errors() {
        assert!(parse_prompt_suite("a | color").is_err());
        assert!(parse_prompt_suite("a | shade | {} |").is_err());
        assert!(parse_prompt_suite("a | color | {} | red\na | color | {} | blue").is_err());
    }
}
