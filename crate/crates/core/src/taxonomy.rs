//! Demographic identities, descriptors and locations.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_TAXONOMY: &str = include_str!("../data/default_taxonomy.toml");
const MINI_TAXONOMY: &str = include_str!("../data/mini_taxonomy.toml");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("failed to read taxonomy file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed taxonomy config: {0}")]
    Parse(String),
    #[error("duplicate descriptor surface {0:?}")]
    DuplicateDescriptor(String),
    #[error("duplicate identity {label:?} in category {category}")]
    DuplicateIdentity {
        category: DemographicCategory,
        label: String,
    },
    #[error("descriptor {surface:?} references undeclared identity {identity:?} in {category}")]
    UnknownIdentity {
        surface: String,
        category: DemographicCategory,
        identity: String,
    },
    #[error("identity {label:?} ({category}) has no descriptors")]
    IdentityWithoutDescriptors {
        category: DemographicCategory,
        label: String,
    },
    #[error("location category {0:?} is empty")]
    EmptyLocationCategory(String),
    #[error("duplicate location {0:?}")]
    DuplicateLocation(String),
    #[error("taxonomy declares no locations")]
    NoLocations,
    #[error("unknown demographic category {0:?}")]
    UnknownCategory(String),
    #[error("category {0} has no pairing rules or identities in this taxonomy")]
    CategoryNotConfigured(DemographicCategory),
    #[error("row-wise pairing in {category} needs equal set sizes (set A: {a}, set B: {b})")]
    UnevenSets {
        category: DemographicCategory,
        a: usize,
        b: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemographicCategory {
    Gender,
    Race,
    Religions,
}

impl DemographicCategory {
    pub const ALL: [DemographicCategory; 3] = [Self::Gender, Self::Race, Self::Religions];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gender => "gender",
            Self::Race => "race",
            Self::Religions => "religions",
        }
    }

    /// Capitalised name, as used in judge prompts and reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Gender => "Gender",
            Self::Race => "Race",
            Self::Religions => "Religions",
        }
    }
}

impl fmt::Display for DemographicCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DemographicCategory {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gender" => Ok(Self::Gender),
            "race" => Ok(Self::Race),
            "religions" | "religion" => Ok(Self::Religions),
            other => Err(TaxonomyError::UnknownCategory(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Identity {
    pub category: DemographicCategory,
    pub label: String,
}

impl Identity {
    pub fn new(category: DemographicCategory, label: impl Into<String>) -> Self {
        Self {
            category,
            label: label.into(),
        }
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.label, self.category)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SetTag {
    #[serde(rename = "A")]
    SetA,
    #[serde(rename = "B")]
    SetB,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor {
    pub surface: String,
    pub identity: Identity,
    pub set_tag: SetTag,
}

impl Descriptor {
    /// First name token, used when a model abbreviates a character heading.
    pub fn first_token(&self) -> &str {
        first_name_token(&self.surface)
    }
}

pub(crate) fn first_name_token(s: &str) -> &str {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .find(|t| !t.is_empty())
        .unwrap_or("")
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Location {
    pub name: String,
    pub category: String,
}

/// How descriptors of one demographic category are combined into
/// two-character prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// i-th descriptor of set A with the i-th descriptor of set B.
    RowWise,
    /// Every unordered pair within set A, then within set B.
    WithinSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRules {
    pub pairing: Pairing,
    pub stories_per_cell: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaxonomy {
    #[serde(default)]
    categories: BTreeMap<String, CategoryRules>,
    identities: Vec<RawIdentity>,
    descriptors: Vec<RawDescriptor>,
    locations: Vec<RawLocationGroup>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIdentity {
    category: DemographicCategory,
    label: String,
    #[serde(default)]
    abbrev: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDescriptor {
    category: DemographicCategory,
    surface: String,
    identity: String,
    set: SetTag,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLocationGroup {
    category: String,
    names: Vec<String>,
}

/// Validated, immutable taxonomy.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    identities: Vec<Identity>,
    abbrevs: HashMap<Identity, String>,
    descriptors: Vec<Descriptor>,
    locations: Vec<Location>,
    location_categories: Vec<String>,
    rules: BTreeMap<DemographicCategory, CategoryRules>,
}

impl Taxonomy {
    /// The bundled taxonomy: 3 demographic categories, 87 locations in 10 categories.
    pub fn bundled() -> Self {
        load_taxonomy(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }

    /// Two identities, two location categories, three locations. Used for offline runs.
    pub fn mini() -> Self {
        load_taxonomy(MINI_TAXONOMY).expect("bundled mini taxonomy is valid")
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        load_taxonomy(&text)
    }

    pub fn identities(&self) -> &[Identity] {
        &self.identities
    }

    pub fn identities_in(&self, category: DemographicCategory) -> impl Iterator<Item = &Identity> {
        self.identities
            .iter()
            .filter(move |i| i.category == category)
    }

    pub fn descriptors(&self) -> &[Descriptor] {
        &self.descriptors
    }

    pub fn descriptors_in(
        &self,
        category: DemographicCategory,
    ) -> impl Iterator<Item = &Descriptor> {
        self.descriptors
            .iter()
            .filter(move |d| d.identity.category == category)
    }

    pub fn descriptor(&self, surface: &str) -> Option<&Descriptor> {
        self.descriptors.iter().find(|d| d.surface == surface)
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn location(&self, name: &str) -> Option<&Location> {
        self.locations.iter().find(|l| l.name == name)
    }

    /// Location categories in declaration order.
    pub fn location_categories(&self) -> &[String] {
        &self.location_categories
    }

    /// Demographic categories that have both identities and pairing rules.
    pub fn categories(&self) -> Vec<DemographicCategory> {
        DemographicCategory::ALL
            .into_iter()
            .filter(|c| self.rules.contains_key(c) && self.identities_in(*c).next().is_some())
            .collect()
    }

    pub fn rules(&self, category: DemographicCategory) -> Result<CategoryRules, TaxonomyError> {
        self.rules
            .get(&category)
            .copied()
            .ok_or(TaxonomyError::CategoryNotConfigured(category))
    }

    /// Short legend label, e.g. "f", "ME", "Bu". Falls back to the full label.
    pub fn abbreviation<'a>(&'a self, identity: &'a Identity) -> &'a str {
        self.abbrevs
            .get(identity)
            .map(String::as_str)
            .unwrap_or(&identity.label)
    }

    /// Descriptor pairs for two-character prompts, first member as listed first.
    pub fn pairs(
        &self,
        category: DemographicCategory,
    ) -> Result<Vec<(&Descriptor, &Descriptor)>, TaxonomyError> {
        let rules = self.rules(category)?;
        let in_set = |tag: SetTag| -> Vec<&Descriptor> {
            self.descriptors_in(category)
                .filter(|d| d.set_tag == tag)
                .collect()
        };
        let (a, b) = (in_set(SetTag::SetA), in_set(SetTag::SetB));
        let position = |d: &Descriptor| self.descriptors.iter().position(|x| x == d);
        let mut out = Vec::new();
        match rules.pairing {
            Pairing::RowWise => {
                if a.len() != b.len() {
                    return Err(TaxonomyError::UnevenSets {
                        category,
                        a: a.len(),
                        b: b.len(),
                    });
                }
                for (x, y) in a.into_iter().zip(b) {
                    if position(x) <= position(y) {
                        out.push((x, y));
                    } else {
                        out.push((y, x));
                    }
                }
            }
            Pairing::WithinSet => {
                for set in [a, b] {
                    for i in 0..set.len() {
                        for j in i + 1..set.len() {
                            out.push((set[i], set[j]));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Parses and validates a taxonomy from TOML text.
pub fn load_taxonomy(source: &str) -> Result<Taxonomy, TaxonomyError> {
    let raw: RawTaxonomy =
        toml::from_str(source).map_err(|e| TaxonomyError::Parse(e.to_string()))?;

    let mut rules = BTreeMap::new();
    for (name, r) in raw.categories {
        rules.insert(name.parse::<DemographicCategory>()?, r);
    }
    for cat in DemographicCategory::ALL {
        if !rules.contains_key(&cat) && raw.identities.iter().any(|i| i.category == cat) {
            let default = match cat {
                DemographicCategory::Gender => CategoryRules {
                    pairing: Pairing::RowWise,
                    stories_per_cell: 20,
                },
                _ => CategoryRules {
                    pairing: Pairing::WithinSet,
                    stories_per_cell: 10,
                },
            };
            rules.insert(cat, default);
        }
    }

    let mut identities = Vec::new();
    let mut abbrevs = HashMap::new();
    let mut seen = HashSet::new();
    for ri in raw.identities {
        let identity = Identity::new(ri.category, ri.label);
        if !seen.insert(identity.clone()) {
            return Err(TaxonomyError::DuplicateIdentity {
                category: identity.category,
                label: identity.label,
            });
        }
        if let Some(a) = ri.abbrev {
            abbrevs.insert(identity.clone(), a);
        }
        identities.push(identity);
    }

    let mut descriptors = Vec::new();
    let mut surfaces = HashSet::new();
    for rd in raw.descriptors {
        let identity = Identity::new(rd.category, rd.identity);
        if !seen.contains(&identity) {
            return Err(TaxonomyError::UnknownIdentity {
                surface: rd.surface,
                category: identity.category,
                identity: identity.label,
            });
        }
        if !surfaces.insert(rd.surface.clone()) {
            return Err(TaxonomyError::DuplicateDescriptor(rd.surface));
        }
        descriptors.push(Descriptor {
            surface: rd.surface,
            identity,
            set_tag: rd.set,
        });
    }
    for identity in &identities {
        if !descriptors.iter().any(|d| &d.identity == identity) {
            return Err(TaxonomyError::IdentityWithoutDescriptors {
                category: identity.category,
                label: identity.label.clone(),
            });
        }
    }

    if raw.locations.is_empty() {
        return Err(TaxonomyError::NoLocations);
    }
    let mut locations = Vec::new();
    let mut location_categories: Vec<String> = Vec::new();
    let mut names = HashSet::new();
    for group in raw.locations {
        if group.names.is_empty() {
            return Err(TaxonomyError::EmptyLocationCategory(group.category));
        }
        if !location_categories.contains(&group.category) {
            location_categories.push(group.category.clone());
        }
        for name in group.names {
            if !names.insert(name.clone()) {
                return Err(TaxonomyError::DuplicateLocation(name));
            }
            locations.push(Location {
                name,
                category: group.category.clone(),
            });
        }
    }

    Ok(Taxonomy {
        identities,
        abbrevs,
        descriptors,
        locations,
        location_categories,
        rules,
    })
}
