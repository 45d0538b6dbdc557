//! Run manifests: a flat `key=value` record of every resolved option, written
//! next to a command's outputs so a run can be reproduced bit for bit. No
//! timestamps or environment state, so reruns with equal flags produce
//! byte-identical manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use unmix3d_core::Result;

pub struct RunManifest {
    command: &'static str,
    options: Vec<(String, String)>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &'static str) -> Self {
        RunManifest {
            command,
            options: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
        }
    }

    pub fn option(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.options.push((key.to_string(), value.to_string()));
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed={seed}");
        }
        for (k, v) in &self.options {
            let _ = writeln!(s, "opt.{k}={v}");
        }
        for p in &self.inputs {
            let _ = writeln!(s, "input={}", p.display());
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output={}", p.display());
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}
