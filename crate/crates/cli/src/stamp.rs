use serde::Serialize;
use sha2::{Digest, Sha256};

/// Provenance attached to every artifact: hash of the effective
/// configuration, the seed, and the tool version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stamp {
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub version: &'static str,
}

impl Stamp {
    pub fn new<T: Serialize>(config: &T, seed: Option<u64>) -> Stamp {
        let canonical = serde_json::to_vec(config).expect("configuration serializes");
        let digest = Sha256::digest(&canonical);
        Stamp {
            config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
            seed,
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    /// Comment lines for CSV artifacts.
    pub fn lines(&self) -> String {
        let seed = self.seed.map_or("none".to_string(), |s| s.to_string());
        format!(
            "inmass {}\nconfig_sha256={}\nseed={seed}",
            self.version, self.config_sha256
        )
    }

    /// Adds a `stamp` key to a JSON object.
    pub fn attach(&self, mut v: serde_json::Value) -> serde_json::Value {
        if let Some(obj) = v.as_object_mut() {
            obj.insert("stamp".into(), serde_json::to_value(self).expect("stamp serializes"));
        }
        v
    }
}
