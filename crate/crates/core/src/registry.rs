//! Name-keyed registries of interchangeable strategies.
//!
//! Each strategy family (description policy, noise convention, gallery
//! protocol, retention rule, augmentation) is a trait; its implementations are
//! registered under a stable name and resolved at runtime from config keys or
//! CLI flags.

use crate::error::{Error, Result};

pub type Factory<T> = fn() -> Box<T>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(&'static str, Factory<T>)>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Register `factory` under `name`. Later registrations shadow earlier ones.
    pub fn register(mut self, name: &'static str, factory: Factory<T>) -> Self {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, factory));
        self
    }

    pub fn create(&self, name: &str) -> Result<Box<T>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown {} `{}` (expected one of: {})",
                    self.kind,
                    name,
                    self.names().join(", ")
                ))
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }
}
