//! Language registry: the fixed set of ISO 639-3 codes the pipeline knows
//! about, plus the 28-language core subset used as an intermediate expansion
//! stage. The registry ships as a data file embedded in the library.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const REGISTRY_JSON: &str = include_str!("../data/language_registry.json");

/// Validated ISO 639-3 code. Construct through [`LanguageRegistry::tag`] so
/// an unknown code can never circulate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct LanguageTag(String);

impl LanguageTag {
    pub fn code(&self) -> &str {
        &self.0
    }

    /// Marker token associated with this language, e.g. `<|eng|>`.
    pub fn marker(&self) -> String {
        format!("<|{}|>", self.0)
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for LanguageTag {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let code = String::deserialize(de)?;
        LanguageRegistry::global()
            .tag(&code)
            .map_err(|_| serde::de::Error::custom(format!("unknown language code {code}")))
    }
}

#[derive(Debug, Deserialize)]
struct RegistryEntry {
    code: String,
    name: String,
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    languages: Vec<RegistryEntry>,
    subset_28: Vec<String>,
}

#[derive(Debug)]
pub struct LanguageRegistry {
    entries: Vec<RegistryEntry>,
    subset_28: BTreeSet<String>,
}

impl LanguageRegistry {
    /// The registry shipped with the library (70 languages).
    pub fn global() -> &'static LanguageRegistry {
        static REG: OnceLock<LanguageRegistry> = OnceLock::new();
        REG.get_or_init(|| {
            let file: RegistryFile =
                serde_json::from_str(REGISTRY_JSON).expect("embedded registry parses");
            let subset_28 = file.subset_28.iter().cloned().collect::<BTreeSet<_>>();
            for code in &subset_28 {
                assert!(
                    file.languages.iter().any(|e| &e.code == code),
                    "subset code {code} missing from registry"
                );
            }
            LanguageRegistry { entries: file.languages, subset_28 }
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.entries.iter().any(|e| e.code == code)
    }

    /// Validates `code` against the registry.
    pub fn tag(&self, code: &str) -> Result<LanguageTag> {
        if self.contains(code) {
            Ok(LanguageTag(code.to_string()))
        } else {
            Err(Error::UnknownLanguage(code.to_string()))
        }
    }

    pub fn tags(&self) -> Vec<LanguageTag> {
        self.entries.iter().map(|e| LanguageTag(e.code.clone())).collect()
    }

    pub fn name(&self, tag: &LanguageTag) -> &str {
        self.entries
            .iter()
            .find(|e| e.code == tag.0)
            .map(|e| e.name.as_str())
            .unwrap_or("?")
    }

    /// The 28-language core subset, in registry (alphabetical) order.
    pub fn subset_28(&self) -> Vec<LanguageTag> {
        self.entries
            .iter()
            .filter(|e| self.subset_28.contains(&e.code))
            .map(|e| LanguageTag(e.code.clone()))
            .collect()
    }

    pub fn in_subset_28(&self, tag: &LanguageTag) -> bool {
        self.subset_28.contains(&tag.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_seventy_languages() {
        let reg = LanguageRegistry::global();
        assert_eq!(reg.len(), 70);
        assert_eq!(reg.subset_28().len(), 28);
    }

    #[test]
    fn known_codes_resolve() {
        let reg = LanguageRegistry::global();
        for code in ["eng", "cmn", "deu", "yue", "swh"] {
            let tag = reg.tag(code).unwrap();
            assert_eq!(tag.code(), code);
        }
        assert_eq!(reg.tag("eng").unwrap().marker(), "<|eng|>");
    }

    #[test]
    fn unknown_code_is_an_error() {
        let err = LanguageRegistry::global().tag("xx1").unwrap_err();
        assert_eq!(err.to_string(), "unknown language code xx1");
    }

    #[test]
    fn subset_is_contained_in_registry() {
        let reg = LanguageRegistry::global();
        for tag in reg.subset_28() {
            assert!(reg.contains(tag.code()));
        }
        assert!(reg.in_subset_28(&reg.tag("eng").unwrap()));
        assert!(!reg.in_subset_28(&reg.tag("afr").unwrap()));
    }
}
