#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn rpk(dir: &Path, args: &[&str]) -> Run {
    let out: Output = Command::new(env!("CARGO_BIN_EXE_rpk")).current_dir(dir).args(args).output().expect("spawn rpk");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Writes `<stem>.cfg.toml` and builds `<stem>.toml` / `<stem>.rpkw`.
pub fn build(dir: &Path, stem: &str, config: &str) -> Run {
    let cfg = format!("{stem}.cfg.toml");
    write(dir, &cfg, config);
    rpk(dir, &["build", "--config", &cfg, "--graph", &format!("{stem}.toml"), "--weights", &format!("{stem}.rpkw")])
}

pub fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

pub const CONV: &str = "seed = 1\n[block]\nkind = \"conv\"\nin_channels = 3\nout_channels = 16\nkernel = 3\n";
pub const CSP_REP: &str = "seed = 3\n[block]\nkind = \"csp-reversed\"\nchannels = 16\nrep = true\n";
pub const ELAN: &str =
    "seed = 5\n[block]\nkind = \"elan\"\nin_channels = 16\nbranch_channels = 8\ndepth = 2\ntransition_channels = 16\n";

pub const SCENE: &str = r#"image_size = [64, 64]
num_classes = 2
seed = 4

[[levels]]
stride = 8
anchors = [[12, 16], [19, 36], [40, 28]]

[[gts]]
class_id = 0
cx = 0.3
cy = 0.4
w = 0.25
h = 0.3

[[gts]]
class_id = 1
cx = 0.7
cy = 0.65
w = 0.35
h = 0.2
"#;
