use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const FAST: &str = r#"
[codec]
max_iters_iframe = 150
max_iters_pframe = 100
conv_window = 20
lr0 = 0.01
lr_halving_period = 100

[codec.gsp_iframe]
interval = 10
span = 50

[codec.gsp_pframe]
interval = 10
span = 30

[quant]
kmeans_iters = 10
finetune_iters = 10
finetune_eval_every = 5
"#;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/coffee_64.png")
}

fn pgsvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgsvc"))
        .args(args)
        .env("PGSVC_THREADS", "1")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pgsvc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    pgsvc(args).status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("fast.toml");
        fs::write(&config, FAST).unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn encode(&self, input: &Path, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec![
            "encode",
            s(input),
            "-o",
            s(&out),
            "-c",
            s(&self.config),
            "-n",
            "300",
            "--layers",
            "3",
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn encode_decode_truncate_eval() {
    let ws = Workspace::new();
    let stream = ws.encode(&fixture(), "a.pgsv", &["--seed", "5"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ws.path("a.pgsv.json")).unwrap()).unwrap();
    assert_eq!(report["frames"], 1);
    assert_eq!(report["config"]["codec"]["total_budget"], 300);
    assert_eq!(report["level_bytes"].as_array().unwrap().len(), 3);

    // Same seed, single thread: identical stream.
    let again = ws.encode(&fixture(), "b.pgsv", &["--seed", "5"]);
    assert_eq!(fs::read(&stream).unwrap(), fs::read(&again).unwrap());

    for level in 0..3 {
        let l = level.to_string();
        ok(&[
            "decode",
            s(&stream),
            "--level",
            &l,
            "-o",
            s(&ws.path(&format!("full{level}.png"))),
        ]);
    }
    ok(&["decode", s(&stream), "-o", s(&ws.path("default.png"))]);
    assert_eq!(
        fs::read(ws.path("default.png")).unwrap(),
        fs::read(ws.path("full2.png")).unwrap()
    );

    let cut = ws.path("cut1.pgsv");
    ok(&["truncate", s(&stream), "--level", "1", "-o", s(&cut)]);
    ok(&["decode", s(&cut), "--level", "1", "-o", s(&ws.path("cut1.png"))]);
    assert_eq!(
        fs::read(ws.path("cut1.png")).unwrap(),
        fs::read(ws.path("full1.png")).unwrap()
    );
    // The cut stream only has two levels; its default level is 1.
    ok(&["decode", s(&cut), "-o", s(&ws.path("cut_default.png"))]);
    assert_eq!(
        fs::read(ws.path("cut_default.png")).unwrap(),
        fs::read(ws.path("full1.png")).unwrap()
    );
    assert_eq!(
        code(&["decode", s(&cut), "--level", "2", "-o", s(&ws.path("x.png"))]),
        5
    );

    let base = ws.path("base.pgsv");
    let base2 = ws.path("base2.pgsv");
    ok(&["truncate", s(&stream), "--level", "0", "-o", s(&base)]);
    ok(&["truncate", s(&base), "--level", "0", "-o", s(&base2)]);
    assert_eq!(fs::read(&base).unwrap(), fs::read(&base2).unwrap());
    assert!(fs::metadata(&base).unwrap().len() < fs::metadata(&cut).unwrap().len());

    let csv_path = ws.path("eval.csv");
    ok(&["eval", s(&stream), s(&fixture()), "-o", s(&csv_path)]);
    let text = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "budget,level,bytes,psnr_db,ms_ssim,frames");
    assert_eq!(lines.len(), 4);
    let psnr: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert!(psnr.iter().all(|p| p.is_finite() && *p > 10.0), "{psnr:?}");

    // A decoded frame as its own reference scores the PSNR cap.
    let out = ok(&["eval", s(&base), s(&ws.path("full0.png"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let p: f64 = row[3].parse().unwrap();
    assert!(p > 50.0, "{text}");
}

fn write_yuv(path: &Path, w: usize, h: usize, frames: usize) {
    let mut bytes = Vec::new();
    for t in 0..frames {
        for y in 0..h {
            for x in 0..w {
                bytes.push(((x * 9 + y * 5 + t * 3) % 256) as u8);
            }
        }
        bytes.extend(std::iter::repeat_n(100 + t as u8, (w / 2) * (h / 2)));
        bytes.extend(std::iter::repeat_n(140, (w / 2) * (h / 2)));
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn yuv_frame_limit_and_output() {
    let ws = Workspace::new();
    let yuv = ws.path("in.yuv");
    write_yuv(&yuv, 16, 16, 3);
    let stream = ws.path("v.pgsv");
    ok(&[
        "encode",
        s(&yuv),
        "-o",
        s(&stream),
        "-c",
        s(&ws.config),
        "-n",
        "60",
        "--size",
        "16x16",
        "--frames",
        "2",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ws.path("v.pgsv.json")).unwrap()).unwrap();
    assert_eq!(report["frames"], 2);
    assert_eq!(report["training"].as_array().unwrap().len(), 2);

    let out = ws.path("out.yuv");
    ok(&["decode", s(&stream), "-o", s(&out)]);
    assert_eq!(fs::metadata(&out).unwrap().len(), 2 * (16 * 16 + 2 * 8 * 8));
    let dir = ws.path("frames");
    ok(&["decode", s(&stream), "--level", "0", "-o", s(&dir)]);
    assert!(dir.join("frame_0000.png").exists() && dir.join("frame_0001.png").exists());

    // The decoded YUV is a valid two-frame reference.
    let out = ok(&["eval", s(&stream), s(&ws.path("out.yuv")), "--levels", "2"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
    // Frame-count mismatch.
    assert_eq!(code(&["eval", s(&stream), s(&yuv)]), 3);
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    let missing = ws.path("missing.png");
    assert_eq!(code(&["encode", s(&missing), "-o", s(&ws.path("o.pgsv"))]), 2);
    let not_png = ws.path("junk.png");
    fs::write(&not_png, b"not an image").unwrap();
    assert_eq!(code(&["encode", s(&not_png), "-o", s(&ws.path("o.pgsv"))]), 2);

    let yuv = ws.path("in.yuv");
    write_yuv(&yuv, 16, 16, 1);
    assert_eq!(code(&["encode", s(&yuv), "-o", s(&ws.path("o.pgsv"))]), 3);
    assert_eq!(
        code(&["encode", s(&yuv), "-o", s(&ws.path("o.pgsv")), "--size", "15x16"]),
        3
    );

    let junk = ws.path("junk.pgsv");
    fs::write(&junk, b"PGSB\x01\x00garbage").unwrap();
    assert_eq!(code(&["decode", s(&junk), "-o", s(&ws.path("j.png"))]), 5);
    assert_eq!(
        code(&["truncate", s(&junk), "--level", "0", "-o", s(&ws.path("j.pgsv"))]),
        5
    );
    assert_eq!(
        code(&["decode", s(&ws.path("nothing.pgsv")), "-o", s(&ws.path("j.png"))]),
        2
    );

    let bad = ws.path("bad.toml");
    fs::write(&bad, "[codec]\nsplats = 3\n").unwrap();
    assert_eq!(
        code(&["encode", s(&fixture()), "-o", s(&ws.path("o.pgsv")), "-c", s(&bad)]),
        1
    );
    assert_eq!(
        code(&["encode", s(&fixture()), "-o", s(&ws.path("o.pgsv")), "--layers", "0"]),
        1
    );
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["--help"]), 0);

    // A runaway learning rate blows the loss up.
    let out = ws.path("div.pgsv");
    let c = code(&[
        "encode",
        s(&yuv),
        "-o",
        s(&out),
        "-c",
        s(&ws.config),
        "--size",
        "16x16",
        "-n",
        "30",
        "--lr",
        "1e30",
    ]);
    assert_eq!(c, 4);
    assert!(!out.exists());
}

#[test]
fn rd_curve_grid() {
    let ws = Workspace::new();
    let csv_path = ws.path("rd.csv");
    ok(&[
        "rd-curve",
        s(&fixture()),
        "--budgets",
        "300,600",
        "--baseline",
        "sequential",
        "-o",
        s(&csv_path),
        "-c",
        s(&ws.config),
    ]);
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["method", "budget", "level", "bytes", "psnr_db", "ms_ssim", "frames", "status"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    let ours: Vec<_> = rows.iter().filter(|r| &r[0] == "pgsvc").collect();
    let seq: Vec<_> = rows.iter().filter(|r| &r[0] == "sequential").collect();
    assert_eq!(ours.len(), 6);
    assert_eq!(seq.len(), 6);
    assert!(rows.iter().all(|r| &r[7] == "ok"));
    for level in 0..3 {
        let bytes: Vec<u64> = ours
            .iter()
            .filter(|r| r[2].parse::<usize>().unwrap() == level)
            .map(|r| r[3].parse().unwrap())
            .collect();
        assert_eq!(bytes.len(), 2);
        assert!(bytes[0] < bytes[1], "level {level}: {bytes:?}");
    }
    let dat = fs::read_to_string(ws.path("rd_pgsvc_level2.dat")).unwrap();
    assert_eq!(dat.lines().count(), 3);
    assert!(ws.path("rd_sequential_level0.dat").exists());
}
