use std::process::{Command, Output};

use supergnet::model_file::Model;
use supergnet::reference_models::{ink_model, ink_text, InkSide};

fn run(args: &[&str], stdin: Option<&str>) -> Output {
    use std::io::Write;
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_supergnet"));
    cmd.args(args)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped());
    let mut child = cmd.spawn().unwrap();
    {
        let mut pipe = child.stdin.take().unwrap();
        if let Some(s) = stdin {
            pipe.write_all(s.as_bytes()).unwrap();
        }
    }
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const INK_BDF: &str = "STARTFONT 2.1\nFONTBOUNDINGBOX 8 8 0 0\nSTARTCHAR a\nENCODING 35\nBBX 8 8 0 0\nBITMAP\nFF\nFF\nFF\nFF\nFF\nFF\nFF\nFF\nENDCHAR\nSTARTCHAR b\nENCODING 46\nBBX 8 8 0 0\nBITMAP\n00\n00\n00\n00\n00\n00\n00\n00\nENDCHAR\nENDFONT\n";

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        ink_model().save(&dir.path().join("ink.gnfc")).unwrap();
        std::fs::write(dir.path().join("ink.bdf"), INK_BDF).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }
}

#[test]
fn classify_prints_label_and_reference_timings() {
    let fx = Fixture::new();
    let (model, font) = (fx.path("ink.gnfc"), fx.path("ink.bdf"));
    let text = ink_text(InkSide::Right, 0xABCDEF);
    let o = run(&["classify", "--model", &model, "--mode", "cjk", "--font", &font, &text], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.starts_with("label=right index=1"), "{s}");
    assert!(s.contains("device reference ms: preprocess 6 inference 15 total 21"));
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    let model = fx.path("ink.gnfc");
    assert_eq!(run(&["--help"], None).status.code(), Some(0));
    assert_eq!(run(&["--version"], None).status.code(), Some(0));
    assert_eq!(run(&[], None).status.code(), Some(1));
    assert_eq!(run(&["classify", "--model", &model], None).status.code(), Some(1));
    assert_eq!(run(&["classify", "--model", &model, "--grid", "9", "x"], None).status.code(), Some(1));
    assert_eq!(run(&["classify", "--model", &model, "--canvas", "112", "x"], None).status.code(), Some(1));
    assert_eq!(run(&["classify", "--model", &fx.path("none"), "x"], None).status.code(), Some(3));

    let junk = fx.path("junk.gnfc");
    std::fs::write(&junk, b"not a model").unwrap();
    let o = run(&["validate", "--model", &junk], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));

    let bad_font = fx.path("bad.bdf");
    std::fs::write(&bad_font, "STARTFONT 2.1\n").unwrap();
    assert_eq!(run(&["classify", "--model", &model, "--font", &bad_font, "x"], None).status.code(), Some(2));

    let csv = fx.path("bad.csv");
    std::fs::write(&csv, "3,a,b\n").unwrap();
    assert_eq!(run(&["eval", "--model", &model, "--data", &csv], None).status.code(), Some(2));
    assert_eq!(run(&["eval", "--model", &model, "--data", &fx.path("nope.csv")], None).status.code(), Some(2));
}

#[test]
fn eval_json_and_limit() {
    let fx = Fixture::new();
    let (model, font) = (fx.path("ink.gnfc"), fx.path("ink.bdf"));
    let csv = fx.path("d.csv");
    let rows: String = (0..6)
        .map(|i| {
            let side = if i % 2 == 0 { InkSide::Left } else { InkSide::Right };
            format!("{},\"{}\",\"ignored\"\n", side.class_index() + 1, ink_text(side, i + 1))
        })
        .collect();
    std::fs::write(&csv, rows).unwrap();
    let o = run(
        &["eval", "--model", &model, "--data", &csv, "--mode", "cjk", "--font", &font, "--field", "title", "--limit", "4", "--json"],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["total"], 4);
    assert_eq!(v["accuracy"], 1.0);
    assert_eq!(v["confusion"], serde_json::json!([[2, 0], [0, 2]]));
}

#[test]
fn repl_over_stdin() {
    let fx = Fixture::new();
    let (model, font) = (fx.path("ink.gnfc"), fx.path("ink.bdf"));
    let img = fx.path("last.pgm");
    let input = format!("{}\n:dump {img}\n:quit\n", ink_text(InkSide::Left, 3));
    let o = run(&["repl", "--model", &model, "--mode", "cjk", "--font", &font], Some(&input));
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 2);
    assert!(std::fs::read(&img).unwrap().starts_with(b"P5\n224 224\n255\n"));
    // end of input without :quit is also a clean exit
    assert_eq!(run(&["repl", "--model", &model], Some("hello\n")).status.code(), Some(0));
}

#[test]
fn render_writes_pgm_and_png() {
    let fx = Fixture::new();
    let pgm = fx.path("a.pgm");
    let o = run(&["render", "--out", &pgm, "hello", "world"], None);
    assert_eq!(o.status.code(), Some(0));
    let bytes = std::fs::read(&pgm).unwrap();
    assert_eq!(bytes.len(), b"P5\n224 224\n255\n".len() + 224 * 224);
    let png = fx.path("a.png");
    assert_eq!(run(&["render", "--out", &png, "hello", "world"], None).status.code(), Some(0));
    let a = supergnet::image_io::import_image(&bytes, 3).unwrap();
    let b = supergnet::image_io::import_image(&std::fs::read(&png).unwrap(), 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(run(&["render", "--out", &fx.path("a.bmp"), "x"], None).status.code(), Some(1));
}

#[test]
fn report_validate_arch_and_init() {
    let fx = Fixture::new();
    let arch = fx.path("default.cfg");
    let o = run(&["arch"], None);
    std::fs::write(&arch, &o.stdout).unwrap();
    let o = run(&["report", "--arch", &arch, "--json"], None);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["paper_bytes"], 2_865_888);
    assert_eq!(v["fits_budget"], true);
    assert_eq!(run(&["validate", "--arch", &arch], None).status.code(), Some(0));

    let bad = fx.path("bad.cfg");
    std::fs::write(&bad, "scale_divisor=2\n").unwrap();
    assert_eq!(run(&["validate", "--arch", &bad], None).status.code(), Some(3));
    std::fs::write(&bad, "colour=blue\n").unwrap();
    assert_eq!(run(&["validate", "--arch", &bad], None).status.code(), Some(2));

    let desk = fx.path("desk.cfg");
    std::fs::write(&desk, run(&["arch", "--desk", "--classes", "2"], None).stdout).unwrap();
    let model = fx.path("desk.gnfc");
    let o = run(&["init", "--out", &model, "--arch", &desk, "--labels", "neg,pos", "--seed", "9"], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = Model::load(std::path::Path::new(&model)).unwrap();
    assert_eq!(m.labels, vec!["neg", "pos"]);
    assert_eq!(run(&["validate", "--model", &model], None).status.code(), Some(0));
    let o = run(&["classify", "--model", &model, "hello"], None);
    assert!(stdout(&o).starts_with("label=neg") || stdout(&o).starts_with("label=pos"));
    assert_eq!(
        run(&["init", "--out", &model, "--arch", &desk, "--labels", "a,b,c"], None).status.code(),
        Some(1)
    );
}
