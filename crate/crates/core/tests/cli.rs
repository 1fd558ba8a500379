use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use orn_core::dataset::{write_idx, LabeledImageSet, Provenance};
use orn_core::image::Gray;
use orn_core::Tensor;

fn orn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orn"))
        .args(args)
        .output()
        .expect("spawn orn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = orn(args);
    assert!(
        o.status.success(),
        "orn {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

/// Writes a small 28×28 digit-like set in the raw MNIST layout.
fn synthetic_mnist(dir: &Path, train: usize, test: usize) {
    let make = |count: usize, offset: usize| {
        let images = Tensor::from_fn(&[count, 28, 28], |i| {
            let label = (i[0] + offset) % 10;
            let (y, x) = (i[1] as isize - 14, i[2] as isize - 14);
            let on = match label % 3 {
                0 => y.abs() < 2 && x.abs() < 3 + label as isize,
                1 => (x - y).abs() < 2 && x.abs() < 3 + label as isize,
                _ => x * x + y * y < (4 + label as isize).pow(2),
            };
            if on { 1.0 } else { 0.0 }
        });
        let labels = (0..count).map(|i| ((i + offset) % 10) as u8).collect();
        LabeledImageSet::new(images, labels, Provenance::default()).unwrap()
    };
    fs::create_dir_all(dir).unwrap();
    write_idx(&make(train, 0), dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")).unwrap();
    write_idx(&make(test, 3), dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte")).unwrap();
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: String,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        synthetic_mnist(&root.join("mnist"), 40, 20);
        let data = root.join("mnist").display().to_string();
        Self { _tmp: tmp, root, data }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }
}

#[test]
fn build_data_is_reproducible() {
    let ws = Workspace::new();
    let (a, b) = (ws.path("a"), ws.path("b"));
    let first = ok(&["build-data", "--data-dir", &ws.data, "--variant", "rot+", "--seed", "4", "--out", &a]);
    let second = ok(&["build-data", "--data-dir", &ws.data, "--variant", "rot_plus", "--seed", "4", "--out", &b]);
    let digests = |s: &str| s.lines().filter(|l| !l.starts_with("metadata")).map(|l| l.split_whitespace().next().unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(digests(&first), digests(&second));
    assert_eq!(digests(&first).len(), 4);
    let train = fs::read(Path::new(&a).join("rot_plus-train-images-idx3-ubyte")).unwrap();
    assert_eq!(train.len(), 16 + 8 * 40 * 28 * 28);
    let other = ok(&["build-data", "--data-dir", &ws.data, "--variant", "rot+", "--seed", "5", "--out", &ws.path("c")]);
    assert_ne!(digests(&first), digests(&other));
}

#[test]
fn usage_errors_exit_with_one() {
    let ws = Workspace::new();
    let o = orn(&["build-data", "--data-dir", &ws.data, "--variant", "spiral", "--out", &ws.path("x")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("spiral"));
    assert_eq!(orn(&["train", "--set", "learning_rate=1"]).status.code(), Some(1));
    assert_eq!(orn(&["frobnicate"]).status.code(), Some(1));
    let cfg = ws.path("bad.cfg");
    fs::write(&cfg, "epochs = 2\nmomentum = 0.9\n").unwrap();
    assert_eq!(orn(&["train", "--config", &cfg]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let ws = Workspace::new();
    let o = orn(&["eval", "--checkpoint", &ws.path("missing.ckpt"), "--data-dir", &ws.data]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(ws.path("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(orn(&["eval", "--checkpoint", &ws.path("junk.ckpt"), "--data-dir", &ws.data]).status.code(), Some(2));
    let o = orn(&["build-data", "--data-dir", &ws.path("nowhere"), "--out", &ws.path("x")]);
    assert_eq!(o.status.code(), Some(2));
}

fn train_args<'a>(ws: &'a Workspace, out: &'a str, epochs: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--network", "baseline", "--encoding", "none", "--variant", "rot", "--seed", "2",
        "--epochs", epochs, "--data-dir", &ws.data, "--out", out,
        "--set", "batch_size=8", "--set", "validation_size=8",
    ]
}

#[test]
fn train_resume_and_eval() {
    let ws = Workspace::new();
    let run = ws.path("run");
    let printed = ok(&train_args(&ws, &run, "2"));
    assert!(printed.contains("error rate"));
    let metrics = fs::read_to_string(Path::new(&run).join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    for f in ["config.txt", "last.ckpt", "best.ckpt", "eval.txt", "eval-confusion.csv"] {
        assert!(Path::new(&run).join(f).exists(), "{f}");
    }

    let mut resumed = train_args(&ws, &run, "3");
    resumed.push("--resume");
    ok(&resumed);
    let metrics = fs::read_to_string(Path::new(&run).join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4, "{metrics}");

    let straight = ws.path("straight");
    ok(&train_args(&ws, &straight, "3"));
    assert_eq!(
        fs::read(Path::new(&run).join("last.ckpt")).unwrap(),
        fs::read(Path::new(&straight).join("last.ckpt")).unwrap(),
        "resumed run must match an uninterrupted one"
    );

    let ckpt = Path::new(&run).join("best.ckpt").display().to_string();
    let report = ok(&["eval", "--checkpoint", &ckpt, "--data-dir", &ws.data, "--variant", "rot", "--seed", "2", "--limit", "12"]);
    assert!(report.contains("samples 12"), "{report}");
}

#[test]
fn visualize_renders_orientation_grid() {
    let ws = Workspace::new();
    let run = ws.path("orn");
    ok(&[
        "train", "--network", "orn8", "--encoding", "oralign", "--epochs", "1", "--data-dir", &ws.data,
        "--out", &run, "--set", "batch_size=8",
    ]);
    let ckpt = Path::new(&run).join("last.ckpt").display().to_string();
    let blank = ws.path("blank.pgm");
    Gray { width: 28, height: 28, pixels: vec![0; 28 * 28] }.save(&blank).unwrap();
    let out = ws.path("viz");
    ok(&["visualize", "--checkpoint", &ckpt, "--image", &blank, "--layer", "0", "--feature", "1", "--out", &out]);
    let grid = Gray::load(Path::new(&out).join("layer0-feature1.pgm")).unwrap();
    assert_eq!((grid.width, grid.height), (8 * 29 - 1, 28));
    for t in 0..8 {
        let first = grid.pixels[t * 29];
        for y in 0..28 {
            for x in 0..28 {
                assert_eq!(grid.pixels[y * grid.width + t * 29 + x], first, "tile {t} is not uniform");
            }
        }
    }

    ok(&["visualize", "--checkpoint", &ckpt, "--data-dir", &ws.data, "--index", "3", "--sweep", "--out", &out]);
    let full = Gray::load(Path::new(&out).join("layer0.pgm")).unwrap();
    assert_eq!((full.width, full.height), (8 * 29 - 1, 4 * 29 - 1));
    let sweep = fs::read_to_string(Path::new(&out).join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 8 * 32);

    let o = orn(&["visualize", "--checkpoint", &ckpt, "--image", &blank, "--layer", "99", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_command_reports_each_network() {
    let o = orn(&["gradcheck", "--spec", "input=1x3x3 orientations=4 | orconv(2,3,0) | relu | gmaxpool | orpooling | fc(3) | softmax"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("custom"));
    assert_eq!(orn(&["gradcheck", "--spec", "input=1x3x3 | softmax"]).status.code(), Some(1));
}
