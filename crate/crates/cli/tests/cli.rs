use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lvc_core::codecnets::{Codec, ModelWeights};
use lvc_core::evalkit::{
    load_png_dir, load_y4m, psnr, read_rd_csv, write_png_dir, Chroma, VideoClip,
};
use lvc_core::training::synthetic_dataset;

fn lvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvc"))
        .args(args)
        .output()
        .expect("spawn lvc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

/// Key/value pairs of the stats line starting with `prefix`.
fn record(out: &str, prefix: &str) -> BTreeMap<String, String> {
    let line = out
        .lines()
        .find(|l| l.starts_with(prefix))
        .unwrap_or_else(|| panic!("no `{prefix}` line in\n{out}"));
    line.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn num(r: &BTreeMap<String, String>, key: &str) -> f64 {
    r[key].parse().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn clip(&self, name: &str, seed: u64, frames: usize) -> PathBuf {
        let data = synthetic_dataset(seed, 1, 32, 32, frames);
        let clip = VideoClip::new(data[0].clone(), (25, 1), Chroma::Rgb).unwrap();
        let p = self.path(name);
        write_png_dir(&clip, &p).unwrap();
        p
    }

    fn weights(&self, name: &str, lambda_index: usize, seed: u64) -> PathBuf {
        let p = self.path(name);
        ModelWeights::init(&Codec::default(), lambda_index, seed)
            .save(&p)
            .unwrap();
        p
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn encode_decode_round_trip_reproduces_reported_quality() {
    let fx = Fixture::new();
    let clip = fx.clip("clip", 1, 4);
    let w = fx.weights("w.rplw", 2, 1);
    let bits = fx.path("clip.rplv");
    let enc = ok(lvc(&[
        "encode",
        "--input",
        s(&clip),
        "--output",
        s(&bits),
        "--weights",
        s(&w),
        "--gop",
        "3",
    ]));

    let summary = record(&enc, "summary");
    let size = std::fs::metadata(&bits).unwrap().len();
    assert_eq!(num(&summary, "bytes"), size as f64);
    assert_eq!(
        num(&summary, "bpp"),
        (8 * size) as f64 / (32 * 32 * 4) as f64
    );

    let out = fx.path("decoded");
    let dec = ok(lvc(&[
        "decode",
        "--input",
        s(&bits),
        "--output",
        s(&out),
        "--weights",
        s(&w),
    ]));
    assert_eq!(record(&dec, "summary")["frames"], "4");
    let decoded = load_png_dir(&out).unwrap();
    let source = load_png_dir(&clip).unwrap();
    assert_eq!(decoded.len(), 4);
    let types: Vec<_> = enc.lines().filter(|l| l.starts_with("frame=")).collect();
    for (i, line) in types.iter().enumerate() {
        let r = record(line, "frame=");
        assert_eq!(r["type"], if i % 3 == 0 { "I" } else { "P" });
        let p = psnr(&source.frames[i], &decoded.frames[i]).unwrap();
        assert_eq!(p, num(&r, "psnr"), "frame {i}");
    }

    let y4m = fx.path("decoded.y4m");
    ok(lvc(&[
        "decode",
        "--input",
        s(&bits),
        "--output",
        s(&y4m),
        "--weights",
        s(&w),
    ]));
    assert_eq!(load_y4m(&y4m).unwrap().len(), 4);
}

#[test]
fn missing_weights_exit_2_without_output() {
    let fx = Fixture::new();
    let clip = fx.clip("clip", 2, 2);
    let bits = fx.path("out.rplv");
    let o = lvc(&[
        "encode",
        "--input",
        s(&clip),
        "--output",
        s(&bits),
        "--weights",
        s(&fx.path("none.rplw")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!bits.exists());
    assert!(String::from_utf8_lossy(&o.stderr).contains("none.rplw"));
}

#[test]
fn corrupt_magic_exit_2() {
    let fx = Fixture::new();
    let clip = fx.clip("clip", 3, 2);
    let w = fx.weights("w.rplw", 2, 3);
    let bits = fx.path("clip.rplv");
    ok(lvc(&[
        "encode",
        "--input",
        s(&clip),
        "--output",
        s(&bits),
        "--weights",
        s(&w),
    ]));
    let mut bytes = std::fs::read(&bits).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&bits, bytes).unwrap();
    let out = fx.path("out");
    let o = lvc(&[
        "decode",
        "--input",
        s(&bits),
        "--output",
        s(&out),
        "--weights",
        s(&w),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn mismatched_weights_are_detected_by_checksum() {
    let fx = Fixture::new();
    let clip = fx.clip("clip", 4, 2);
    let w2 = fx.weights("w2.rplw", 2, 4);
    let w3 = fx.weights("w3.rplw", 3, 4);
    let bits = fx.path("clip.rplv");
    ok(lvc(&[
        "encode",
        "--input",
        s(&clip),
        "--output",
        s(&bits),
        "--weights",
        s(&w2),
    ]));
    let out = fx.path("out");
    let o = lvc(&[
        "decode",
        "--input",
        s(&bits),
        "--output",
        s(&out),
        "--weights",
        s(&w3),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
    assert!(!out.exists());

    let o = lvc(&[
        "encode",
        "--input",
        s(&clip),
        "--output",
        s(&bits),
        "--weights",
        s(&w2),
        "--lambda-index",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    let o = lvc(&["encode", "--input", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let o = lvc(&["train", "--output", "/tmp/x", "--lambda-index", "5"]);
    assert_eq!(o.status.code(), Some(2));
    let fx = Fixture::new();
    let o = lvc(&[
        "train",
        "--output",
        s(&fx.path("no/such/dir/w.rplw")),
        "--iters",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_then_bdrate() {
    let fx = Fixture::new();
    let a = fx.clip("seq_a", 5, 2);
    let b = fx.clip("seq_b", 6, 2);
    let weights: Vec<PathBuf> = (0..5)
        .map(|i| fx.weights(&format!("w{i}.rplw"), i, 10 + i as u64))
        .collect();
    let csv = fx.path("rd.csv");
    let mut args = vec![
        "eval",
        "--output",
        s(&csv),
        "--input",
        s(&a),
        "--input",
        s(&b),
    ];
    for w in &weights {
        args.extend(["--weights", s(w)]);
    }
    let out = ok(lvc(&args));
    assert_eq!(record(&out, "summary")["points"], "10");
    let rows = read_rd_csv(&csv).unwrap();
    for seq in ["seq_a", "seq_b"] {
        assert_eq!(rows.iter().filter(|r| r.sequence == seq).count(), 5);
    }
    assert!(csv.with_extension("svg").exists());

    // Distinct synthetic curves with strictly increasing rate.
    let curve = fx.path("curve.csv");
    let mut text = String::from("sequence,lambda,bpp,psnr,ms_ssim\n");
    for (i, (bpp, q)) in [
        (0.1, 30.0),
        (0.2, 33.0),
        (0.4, 36.0),
        (0.8, 39.0),
        (1.6, 42.0),
    ]
    .iter()
    .enumerate()
    {
        text += &format!("s,{},{bpp},{q},{}\n", 512 * (i + 1), 0.9 + 0.01 * i as f64);
    }
    std::fs::write(&curve, text).unwrap();
    let out = ok(lvc(&["bdrate", "--anchor", s(&curve), "--test", s(&curve)]));
    let r = record(&out, "sequence=s");
    assert_eq!(r["bd_rate_psnr"], "0.000");
    assert_eq!(r["bd_rate_ms_ssim"], "0.000");
    assert_eq!(record(&out, "average")["bd_rate_psnr"], "0.000");

    let o = lvc(&[
        "bdrate",
        "--anchor",
        s(&curve),
        "--test",
        s(&fx.path("missing.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let fx = Fixture::new();
    let run = |name: &str, seed: &str| {
        let p = fx.path(name);
        let out = ok(lvc(&[
            "train",
            "--output",
            s(&p),
            "--seed",
            seed,
            "--iters",
            "3",
            "--pframes",
            "1",
            "--batch-size",
            "1",
            "--synthetic-clips",
            "2",
            "--synthetic-size",
            "16",
            "--log-every",
            "1",
        ]));
        assert_eq!(out.lines().filter(|l| l.starts_with("iter=")).count(), 3);
        std::fs::read(p).unwrap()
    };
    let a = run("a.rplw", "7");
    let b = run("b.rplw", "7");
    let c = run("c.rplw", "8");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(fx.path("a.rplw.opt").exists());
}
