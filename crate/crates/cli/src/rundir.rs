//! Run directories: config echo, stamp and log file for every invocation.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use ecm_core::RunConfig;

pub const OUTPUT_ROOT_ENV: &str = "ECM_OUTPUT_ROOT";

pub fn version_stamp() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("ECM_GIT_DESCRIBE"))
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `explicit` if given, otherwise a fresh `<root>/<command>-<time>` directory.
    pub fn create(command: &str, root: &Path, explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            fs::create_dir_all(p).with_context(|| format!("cannot create run directory {}", p.display()))?;
            return Ok(Self { path: p.to_path_buf() });
        }
        fs::create_dir_all(root).with_context(|| format!("cannot create output root {}", root.display()))?;
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        for k in 0.. {
            let path = root.join(format!("{command}-{secs}-{k}"));
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("cannot create {}", path.display())),
            }
        }
        unreachable!()
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes `config.txt` (parseable echo) and `run.json` (command line, seed, version).
    pub fn record(&self, cfg: &RunConfig, argv: &[String], seed: u64) -> Result<()> {
        fs::write(self.file("config.txt"), cfg.echo()).context("cannot write config echo")?;
        let stamp = serde_json::json!({
            "argv": argv,
            "seed": seed,
            "version": version_stamp(),
        });
        fs::write(self.file("run.json"), serde_json::to_string_pretty(&stamp)? + "\n").context("cannot write run stamp")?;
        Ok(())
    }
}

/// Sends log lines to stderr and to a file.
#[derive(Clone)]
struct Tee(Arc<Mutex<File>>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        self.0.lock().expect("log file lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.lock().expect("log file lock").flush()
    }
}

pub fn init_logging(path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee(Arc::new(Mutex::new(file))))))
        .try_init();
    Ok(())
}
