use std::cell::RefCell;
use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::error::{Error, Result};

/// A flat table of settings with unknown-key detection.
#[derive(Debug, Clone, Default)]
pub struct Params {
    context: String,
    table: Table,
    used: RefCell<BTreeSet<String>>,
}

impl Params {
    pub fn new(context: &str, table: Table) -> Result<Self> {
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(Error::Config(format!("{context}: nested table {k:?} is not allowed")));
        }
        Ok(Self {
            context: context.to_string(),
            table,
            used: RefCell::default(),
        })
    }

    /// Parses `key = value` lines (TOML syntax, top level only).
    pub fn parse(context: &str, text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{context}: {e}")))?;
        Self::new(context, table)
    }

    pub fn context(&self) -> &str {
        &self.context
    }

    pub fn contains(&self, key: &str) -> bool {
        self.table.contains_key(key)
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.table.insert(key.to_string(), value.into());
    }

    fn raw(&self, key: &str) -> Option<&Value> {
        let v = self.table.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v)
    }

    fn bad(&self, key: &str, what: &str) -> Error {
        Error::Config(format!("{}: key {key:?} {what}", self.context))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e| self.bad(key, &format!("has the wrong type: {e}"))),
        }
    }

    pub fn get_or<T: DeserializeOwned>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| self.bad(key, "is required"))
    }

    /// A count that may also be the string `"unlimited"`.
    pub fn get_limit(&self, key: &str, default: Option<usize>) -> Result<Option<usize>> {
        match self.raw(key) {
            None => Ok(default),
            Some(Value::String(s)) if s == "unlimited" => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(_) => Err(self.bad(key, "must be a non-negative integer or \"unlimited\"")),
        }
    }

    /// Errors on any key that was never read.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .table
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("{}: unknown keys {}", self.context, unknown.join(", "))))
        }
    }
}
