//! Name-keyed registries of interchangeable strategies.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{MmqError, Result};

type Ctor<T> = Box<dyn Fn() -> Box<T> + Send + Sync>;

/// Maps a name to a constructor of a boxed trait object.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Ctor<T>>,
}

impl<T: ?Sized> Registry<T> {
    /// `kind` names the strategy family in error messages.
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `ctor` under `name`, replacing any earlier entry.
    pub fn register(
        &mut self,
        name: &str,
        ctor: impl Fn() -> Box<T> + Send + Sync + 'static,
    ) -> &mut Self {
        self.entries.insert(name.to_string(), Box::new(ctor));
        self
    }

    pub fn create(&self, name: &str) -> Result<Box<T>> {
        self.entries
            .get(name)
            .map(|ctor| ctor())
            .ok_or_else(|| MmqError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.names())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }
    struct Hi;
    impl Greeter for Hi {
        fn greet(&self) -> String {
            "hi".into()
        }
    }

    #[test]
    fn create_by_name() {
        let mut r: Registry<dyn Greeter> = Registry::new("greeter");
        r.register("hi", || Box::new(Hi));
        assert_eq!(r.create("hi").unwrap().greet(), "hi");
        assert_eq!(r.names(), vec!["hi"]);
    }

    #[test]
    fn unknown_name_lists_known_ones() {
        let mut r: Registry<dyn Greeter> = Registry::new("greeter");
        r.register("hi", || Box::new(Hi));
        let err = r.create("bye").err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("bye") && msg.contains("hi"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }
}
