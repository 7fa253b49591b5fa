//! Attribute label space: an ordered vocabulary of pedestrian attributes,
//! their categories, and the binary vectors aligned to it.
//!
//! The bundled default vocabulary has 105 positional labels. Multiclass
//! attributes such as colors and age bands are stored pre-expanded, one label
//! per value, so a description is always a flat 0/1 vector. Label positions
//! are our own and make no claim of matching any particular detector's output
//! order.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

const DEFAULT_VOCABULARY: &str = include_str!("../assets/vocabulary.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Gender,
    Age,
    Orientation,
    Hair,
    CarriedItems,
    UpperBodyColor,
    UpperBodyType,
    LowerBodyColor,
    LowerBodyType,
    ShoeColor,
    ShoeType,
}

impl Category {
    pub const ALL: [Category; 11] = [
        Category::Gender,
        Category::Age,
        Category::Orientation,
        Category::Hair,
        Category::CarriedItems,
        Category::UpperBodyColor,
        Category::UpperBodyType,
        Category::LowerBodyColor,
        Category::LowerBodyType,
        Category::ShoeColor,
        Category::ShoeType,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Gender => "gender",
            Category::Age => "age",
            Category::Orientation => "orientation",
            Category::Hair => "hair",
            Category::CarriedItems => "carried-items",
            Category::UpperBodyColor => "upper-body-color",
            Category::UpperBodyType => "upper-body-type",
            Category::LowerBodyColor => "lower-body-color",
            Category::LowerBodyType => "lower-body-type",
            Category::ShoeColor => "shoe-color",
            Category::ShoeType => "shoe-type",
        }
    }

    /// Upper/lower body color and type change with an outfit; everything else
    /// is treated as a property of the person.
    pub fn is_cloth_related(self) -> bool {
        matches!(
            self,
            Category::UpperBodyColor
                | Category::UpperBodyType
                | Category::LowerBodyColor
                | Category::LowerBodyType
        )
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Schema(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeVocabulary {
    labels: Vec<String>,
    categories: Vec<Category>,
    index: HashMap<String, usize>,
}

impl AttributeVocabulary {
    pub fn new(entries: Vec<(String, Category)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Schema("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        let mut labels = Vec::with_capacity(entries.len());
        let mut categories = Vec::with_capacity(entries.len());
        for (i, (label, cat)) in entries.into_iter().enumerate() {
            if label.is_empty() || label.chars().any(char::is_whitespace) {
                return Err(Error::Schema(format!("invalid label `{label}`")));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate label `{label}`")));
            }
            labels.push(label);
            categories.push(cat);
        }
        Ok(Self {
            labels,
            categories,
            index,
        })
    }

    /// The bundled 105-label vocabulary.
    pub fn bundled() -> Self {
        Self::parse(DEFAULT_VOCABULARY, Path::new("<bundled vocabulary>"))
            .expect("bundled vocabulary is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parse `label<TAB>category` lines; blank and `#` lines are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(label), Some(cat), None) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::parse(origin, n + 1, "expected `label<TAB>category`"));
            };
            let cat: Category = cat
                .trim()
                .parse()
                .map_err(|e: Error| Error::parse(origin, n + 1, e.to_string()))?;
            entries.push((label.trim().to_string(), cat));
        }
        Self::new(entries).map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("{}: {msg}", origin.display())),
            other => other,
        })
    }

    pub fn to_tsv(&self) -> String {
        self.labels
            .iter()
            .zip(&self.categories)
            .map(|(l, c)| format!("{l}\t{c}\n"))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn category(&self, i: usize) -> Category {
        self.categories[i]
    }

    pub fn category_of(&self, label: &str) -> Option<Category> {
        self.index_of(label).map(|i| self.categories[i])
    }

    pub fn is_cloth_related(&self, i: usize) -> bool {
        self.categories[i].is_cloth_related()
    }

    /// Ascending indices of every cloth-related label.
    pub fn cloth_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_cloth_related(i)).collect()
    }

    pub fn indices_of(&self, cat: Category) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.categories[i] == cat)
            .collect()
    }

    /// Categories present in the vocabulary, in first-appearance order.
    pub fn categories(&self) -> Vec<Category> {
        let mut out: Vec<Category> = Vec::new();
        for &c in &self.categories {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    pub fn encode<S: AsRef<str>>(&self, names: &[S]) -> Result<AttributeVector> {
        let mut v = AttributeVector::zeros(self.len());
        for name in names {
            let name = name.as_ref();
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::Encoding(name.to_string()))?;
            v.set(i, true);
        }
        Ok(v)
    }

    pub fn decode(&self, v: &AttributeVector) -> Result<Vec<String>> {
        self.check(v)?;
        Ok(v.ones().map(|i| self.labels[i].clone()).collect())
    }

    pub fn check(&self, v: &AttributeVector) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::Alignment {
                expected: self.len(),
                actual: v.len(),
            });
        }
        Ok(())
    }
}

/// A binary vector aligned position-by-position to a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttributeVector {
    bits: Vec<bool>,
}

impl AttributeVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, value: bool) {
        self.bits[i] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Positions where `self` and `other` differ.
    pub fn diff(&self, other: &AttributeVector) -> Vec<usize> {
        self.bits
            .iter()
            .zip(&other.bits)
            .enumerate()
            .filter_map(|(i, (a, b))| (a != b).then_some(i))
            .collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Display for AttributeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for AttributeVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Argument(format!(
                    "bitstring contains `{other}`; expected only 0 and 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::from_bits)
    }
}
