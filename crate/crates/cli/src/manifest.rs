//! Run directories with a deterministic manifest.
//!
//! `manifest.txt` records the command, versions, seed, the effective
//! configuration and a SHA-256 digest of every output; two runs with equal
//! manifests produced equal files. Wall-clock times go to `timings.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use mmunet::config::KvConfig;
use mmunet::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const TIMINGS: &str = "timings.txt";
pub const SEED_ENV: &str = "MMU_SEED";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

/// Effective configuration: `defaults`, then the file, then `MMU_SEED`
/// (only when `seed` is a known key), then `flags`.
pub fn layered_config(defaults: &KvConfig, file: Option<&Path>, known: &[&str], flags: &KvConfig) -> Result<KvConfig> {
    let mut kv = defaults.clone();
    if let Some(p) = file {
        let f = KvConfig::load(p)?;
        f.check_keys(known)?;
        kv.merge(&f);
    }
    if known.contains(&"seed") {
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            kv.set("seed", seed);
        }
    }
    flags.check_keys(known)?;
    kv.merge(flags);
    Ok(kv)
}

/// Output directory that remembers the digest of every file written.
pub struct RunDir {
    dir: PathBuf,
    outputs: Vec<(String, String)>,
    timings: Vec<(String, f64)>,
    start: Instant,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
            timings: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let bytes = bytes.as_ref();
        std::fs::write(self.path(name), bytes)?;
        self.record(name, bytes);
        Ok(())
    }

    /// Registers a file written by other means.
    pub fn record_file(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.path(name))?;
        self.record(name, &bytes);
        Ok(())
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        let digest = sha256_hex(bytes);
        match self.outputs.iter_mut().find(|(n, _)| n == name) {
            Some(e) => e.1 = digest,
            None => self.outputs.push((name.to_string(), digest)),
        }
    }

    pub fn time(&mut self, label: &str, seconds: f64) {
        self.timings.push((label.to_string(), seconds));
    }

    /// Writes `manifest.txt` and `timings.txt`.
    pub fn finish(mut self, command: &str, config: &KvConfig) -> Result<()> {
        let total = self.start.elapsed().as_secs_f64();
        self.time("total", total);
        std::fs::write(self.path(MANIFEST), render_manifest(command, config, &self.outputs))?;
        let mut t = String::new();
        for (label, s) in &self.timings {
            writeln!(t, "{label} = {s:.3}").unwrap();
        }
        std::fs::write(self.path(TIMINGS), t)?;
        Ok(())
    }
}

pub fn render_manifest(command: &str, config: &KvConfig, outputs: &[(String, String)]) -> String {
    let cfg = config.to_string();
    let mut s = String::new();
    writeln!(s, "command = {command}").unwrap();
    writeln!(s, "version = {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(s, "git = {}", env!("MMU_GIT_DESCRIBE")).unwrap();
    writeln!(s, "real = {}", std::any::type_name::<mmunet::Real>()).unwrap();
    writeln!(s, "seed = {}", config.raw("seed").unwrap_or("-")).unwrap();
    writeln!(s, "config_sha256 = {}", sha256_hex(cfg.as_bytes())).unwrap();
    s.push_str("\n[config]\n");
    s.push_str(&cfg);
    s.push_str("\n[outputs]\n");
    for (name, digest) in outputs {
        writeln!(s, "{digest}  {name}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vectors() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn flags_override_file_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "a = 1\nb = 2\n").unwrap();
        let mut defaults = KvConfig::new();
        defaults.set("a", 0);
        defaults.set("c", 9);
        let mut flags = KvConfig::new();
        flags.set("b", 5);
        let kv = layered_config(&defaults, Some(&p), &["a", "b", "c"], &flags).unwrap();
        assert_eq!(kv.to_string(), "a = 1\nb = 5\nc = 9\n");
        assert!(matches!(
            layered_config(&defaults, Some(&p), &["a"], &KvConfig::new()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn manifest_lists_outputs_and_excludes_timings() {
        let dir = tempfile::tempdir().unwrap();
        let mut kv = KvConfig::new();
        kv.set("seed", 3);
        let mut run = RunDir::create(dir.path()).unwrap();
        run.write("x.csv", "a\n").unwrap();
        run.time("step", 1.5);
        run.finish("test", &kv).unwrap();
        let m = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(m.contains("seed = 3\n"));
        assert!(m.contains(&format!("{}  x.csv", sha256_hex(b"a\n"))));
        assert!(!m.contains("1.5"));
        let t = std::fs::read_to_string(dir.path().join(TIMINGS)).unwrap();
        assert!(t.starts_with("step = 1.500\n"));
    }
}
