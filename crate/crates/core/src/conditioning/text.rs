use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::stats::PseudoLabel;

/// Per-object prompts, padded with empty strings to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextList {
    pub entries: Vec<String>,
}

impl TextList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of non-padding entries.
    pub fn num_objects(&self) -> usize {
        self.entries.iter().take_while(|e| !e.is_empty()).count()
    }

    /// Reorders the object entries; padding stays at the end.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut entries: Vec<String> = order.iter().map(|&i| self.entries[i].clone()).collect();
        entries.extend(self.entries[order.len()..].iter().cloned());
        Self { entries }
    }
}

pub fn object_prompt(class_name: &str) -> String {
    format!("a {class_name}")
}

pub fn build_text_list(pseudo: &PseudoLabel, categories: &[String], n: usize) -> Result<TextList> {
    if pseudo.len() > n {
        return Err(Error::Overflow {
            len: pseudo.len(),
            capacity: n,
        });
    }
    let mut entries = Vec::with_capacity(n);
    for a in &pseudo.annotations {
        let name = categories
            .get(a.category_id)
            .ok_or_else(|| Error::InvalidDataset(format!("category id {} out of range", a.category_id)))?;
        entries.push(object_prompt(name));
    }
    entries.resize(n, String::new());
    Ok(TextList { entries })
}

/// Sentence naming each distinct class once, e.g. "a cat and a dog in a park".
pub fn build_global_prompt(pseudo: &PseudoLabel, categories: &[String], scene_name: &str) -> String {
    let mut seen = HashSet::new();
    let names: Vec<String> = pseudo
        .annotations
        .iter()
        .filter(|a| seen.insert(a.category_id))
        .map(|a| object_prompt(categories.get(a.category_id).map(String::as_str).unwrap_or("object")))
        .collect();
    let scene = format!("a {scene_name}");
    match names.as_slice() {
        [] => scene,
        [one] => format!("{one} in {scene}"),
        [init @ .., last] => format!("{} and {last} in {scene}", init.join(", ")),
    }
}
