#![allow(dead_code)]

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use msdp_core::{synthetic, Corpus};

pub fn msdp() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_msdp"));
    c.env_remove("MSDP_LM_ENDPOINT").env_remove("MSDP_EMBED_ENDPOINT").env("MSDP_LOG", "error");
    c
}

pub fn run(args: &[&str]) -> Output {
    msdp().args(args).output().expect("spawn msdp")
}

#[track_caller]
pub fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "msdp {args:?} exited {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Temporary directory with a synthetic database, test set and config.
pub struct Workspace {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(db: usize, test: usize, config: &str) -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Corpus::new("db", synthetic::samples("db", db, 11)).unwrap().save(&root.join("db.jsonl")).unwrap();
        Corpus::new("test", synthetic::samples("test", test, 12)).unwrap().save(&root.join("test.jsonl")).unwrap();
        fs::write(root.join("msdp.toml"), config).unwrap();
        Workspace { _dir: dir, root }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn arg(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }
}

pub const MOCK_CONFIG: &str = "[provider.lm]\nfallback = \"copy_knowledge\"\n[provider.embed]\ndim = 64\n[run]\ndatabase = \"db.jsonl\"\nindex = \"idx/db\"\n";

/// `msdp serve --port 0`; killed on drop.
pub struct Server {
    child: Child,
    pub base: String,
}

impl Server {
    pub fn start(config: &Path) -> Server {
        let mut child = msdp()
            .args(["serve", "--config", &config.to_string_lossy(), "--port", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn msdp serve");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected serve output {line:?}"))
            .to_owned();
        Server { child, base }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.child.kill().ok();
        self.child.wait().ok();
    }
}
