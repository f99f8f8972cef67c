//! String newtypes for the identifiers that flow between modules.

use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Discrete simulation time.
pub type Tick = u64;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Self {
                Self(value.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:?}", self.0)
            }
        }

        impl From<&str> for $name {
            fn from(value: &str) -> Self {
                Self(value.into())
            }
        }

        impl From<String> for $name {
            fn from(value: String) -> Self {
                Self(value)
            }
        }

        impl core::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}

string_id!(AgentId);
string_id!(EnvironmentId);
string_id!(ConversationId);
string_id!(
    /// Dotted ontology tag such as `medical.cardiology`.
    Tag
);
string_id!(
    /// Capability tag advertised by providers, e.g. `diagnose.cardiology`.
    Capability
);
string_id!(TaskId);
string_id!(RequestId);
string_id!(ContractId);
