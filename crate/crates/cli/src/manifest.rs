//! Run manifest: the configuration echo plus run metadata, in the same
//! sectioned format as the input, so it can be fed back as a config file.

use std::time::{SystemTime, UNIX_EPOCH};

use crate::config::{echo, RunSpec};

/// Bumped on any change of the manifest or CSV layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub spec: RunSpec,
    pub start_unix: f64,
    pub end_unix: f64,
    pub truncated: bool,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, spec: &RunSpec) -> RunManifest {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            tool_version: format!("fkdv {}", env!("CARGO_PKG_VERSION")),
            spec: spec.clone(),
            start_unix: unix_now(),
            end_unix: f64::NAN,
            truncated: false,
        }
    }

    pub fn render(&self) -> String {
        let c = &self.spec.sim;
        let seed = self.spec.seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into());
        let mut s = String::from("# fkdv run manifest\n[manifest]\n");
        s.push_str(&format!("schema_version = {}\n", self.schema_version));
        s.push_str(&format!("tool_version = {}\n", self.tool_version));
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str(&format!(
            "grid = n={} length={:?} dx={:?} k1={:?}\n",
            c.n,
            c.length,
            c.length / c.n as f64,
            2.0 * std::f64::consts::PI / c.length
        ));
        s.push_str(&format!("start_unix = {:.3}\n", self.start_unix));
        s.push_str(&format!("end_unix = {:.3}\n", self.end_unix));
        s.push_str(&format!("truncated = {}\n", self.truncated));
        s.push_str(&format!("seed = {seed}\n\n"));
        s.push_str(&echo(&self.spec));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Document;

    #[test]
    fn manifest_reparses_to_the_same_spec() {
        let doc = Document::parse(
            "alpha = -1\nt_final = 0.5\nic = random_band(3,0.5,2,1)\ntail_tol = 1e-3\n[experiment]\nl_list = 100,200,400\n",
            "t",
        )
        .unwrap();
        let spec = RunSpec::from_document(&doc).unwrap().with_seed(11);
        let mut m = RunManifest::start("simulate", &spec);
        m.end_unix = m.start_unix + 1.0;
        let text = m.render();
        assert!(text.contains("schema_version = 1"));
        let back = RunSpec::from_document(&Document::parse(&text, "manifest").unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn foreign_schema_is_rejected() {
        let text = "[manifest]\nschema_version = 99\n[run]\nalpha = 0.5\nt_final = 1\nic = gaussian(1,1,0)\n";
        assert!(RunSpec::from_document(&Document::parse(text, "t").unwrap()).is_err());
    }
}
