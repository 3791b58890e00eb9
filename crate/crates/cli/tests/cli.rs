mod common;

use std::fs;

use common::{emojich, fixtures, fresh_copy, ok, toy_run};
use emojich::imaging;

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["generate"],
        &["generate", "--caption", "кот", "--top-p", "x"],
    ] {
        let out = emojich(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn missing_checkpoint_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = emojich(dir.path(), &["generate", "--caption", "кот"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-codec"), "{err}");
}

#[test]
fn bad_sampling_values_are_rejected() {
    let out = emojich(
        toy_run(),
        &[
            "generate",
            "--caption",
            "кот",
            "--top-p",
            "1.5",
            "--out",
            "/nonexistent/x",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = |out: &std::path::Path| {
        vec![
            "generate",
            "--caption",
            "улыбающийся кот",
            "--batch",
            "4",
            "--seed",
            "7",
            "--out",
        ]
        .into_iter()
        .map(String::from)
        .chain([out.to_str().unwrap().to_string()])
        .collect::<Vec<_>>()
    };
    let run = toy_run();
    let ra = ok(
        run,
        &args(&a).iter().map(String::as_str).collect::<Vec<_>>(),
    );
    let rb = ok(
        run,
        &args(&b).iter().map(String::as_str).collect::<Vec<_>>(),
    );
    assert_eq!(ra["id"], rb["id"]);
    let (ma, mb) = (
        fs::read(a.join("generation.jsonl")).unwrap(),
        fs::read(b.join("generation.jsonl")).unwrap(),
    );
    assert_eq!(ma, mb);
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 4);
    for i in 0..4 {
        let f = format!("img_{i:03}.png");
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap());
        let img = imaging::read_png(a.join(&f)).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
    }
    let other = tmp.path().join("c");
    let mut c = args(&other);
    c[6] = "8".into();
    ok(run, &c.iter().map(String::as_str).collect::<Vec<_>>());
    assert_ne!(
        fs::read(a.join("generation.jsonl")).unwrap(),
        fs::read(other.join("generation.jsonl")).unwrap()
    );
}

#[test]
fn segment_and_export_three_stickers() {
    let tmp = tempfile::tempdir().unwrap();
    let run = fresh_copy(&tmp.path().join("run"));
    let r = |a: &[&str]| ok(&run, a);
    let gen = r(&["generate", "--caption", "сердце", "--batch", "4"]);
    let gen_dir = run.join(gen["dir"].as_str().unwrap());
    let seg = r(&[
        "segment",
        "--generation",
        gen_dir.to_str().unwrap(),
        "--indices",
        "0,2,3",
    ]);
    let records = seg["records"].as_array().unwrap();
    assert_eq!(records.len(), 3);
    assert!(seg["model"].is_null());
    for rec in records {
        assert_eq!(rec["regime"], "fallback");
        assert_eq!(rec["provenance"]["caption"], "сердце");
    }
    let seg_dir = run.join(seg["dir"].as_str().unwrap());
    let pack = r(&[
        "export-pack",
        "--name",
        "hearts",
        "--segments",
        seg_dir.to_str().unwrap(),
    ]);
    let stickers = pack["pack"]["stickers"].as_array().unwrap();
    assert_eq!(stickers.len(), 3);
    let pack_dir = run.join(pack["dir"].as_str().unwrap());
    for s in stickers {
        let img = imaging::read_png(pack_dir.join(s["file"].as_str().unwrap())).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (512, 512, 4));
    }
    let prov: serde_json::Value =
        serde_json::from_slice(&fs::read(pack_dir.join("provenance.json")).unwrap()).unwrap();
    let indices: Vec<u64> = prov["stickers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["provenance"]["index"].as_u64().unwrap())
        .collect();
    assert_eq!(indices, vec![0, 2, 3]);
    assert!(prov["stickers"][0]["provenance"]["seed"].is_u64());

    let archive = fs::File::open(run.join(pack["archive"]["path"].as_str().unwrap())).unwrap();
    let mut names: Vec<String> = tar::Archive::new(archive)
        .entries()
        .unwrap()
        .map(|e| e.unwrap().path().unwrap().display().to_string())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "hearts/provenance.json",
            "hearts/sticker_00.png",
            "hearts/sticker_01.png",
            "hearts/sticker_02.png"
        ]
    );

    let bad = emojich(
        &run,
        &[
            "export-pack",
            "--name",
            "../x",
            "--segments",
            seg_dir.to_str().unwrap(),
        ],
    );
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn segment_plain_inputs_matches_fallback_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let input = fixtures().join("segmentation/disk.png");
    let out = tmp.path().join("seg");
    let seg = ok(
        &tmp.path().join("run"),
        &[
            "segment",
            "--input",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    let rec = &seg["records"][0];
    let (_, _, mask) = imaging::read_gray_png(
        out.join(
            rec["mask"]["path"]
                .as_str()
                .unwrap()
                .rsplit('/')
                .next()
                .unwrap(),
        ),
    )
    .unwrap();
    let (_, _, golden) =
        imaging::read_gray_png(fixtures().join("segmentation/disk_mask.png")).unwrap();
    assert_eq!(mask, golden);
}

#[test]
fn rerank_and_fid() {
    let tmp = tempfile::tempdir().unwrap();
    let run = fresh_copy(&tmp.path().join("run"));
    let gen = ok(&run, &["generate", "--caption", "кот", "--batch", "3"]);
    let gen_dir = run.join(gen["dir"].as_str().unwrap());
    let ranked = ok(
        &run,
        &[
            "rerank",
            "--generation",
            gen_dir.to_str().unwrap(),
            "--d-model",
            "32",
            "--layers",
            "1",
            "--heads",
            "2",
            "--d-ff",
            "64",
            "--t-text",
            "16",
            "--epochs",
            "1",
        ],
    );
    let ranked = ranked.as_array().unwrap();
    assert_eq!(ranked.len(), 3);
    let losses: Vec<f64> = ranked.iter().map(|r| r["loss"].as_f64().unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[0] <= w[1]));
    let fid = ok(
        &run,
        &["eval-fid", "--generation", gen_dir.to_str().unwrap()],
    );
    assert!(fid["frechet"].as_f64().unwrap() >= 0.0);
    assert_eq!(fid["generated"], 3);
}

#[test]
fn train_seg_writes_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = fresh_copy(&tmp.path().join("run"));
    let rep = ok(
        &run,
        &[
            "train-seg",
            "--epochs",
            "2",
            "--max-rounds",
            "2",
            "--input-side",
            "16",
        ],
    );
    assert!(!rep["rounds"].as_array().unwrap().is_empty());
    assert!(run.join("checkpoints/seg.ckpt").is_file());
    let gen = ok(&run, &["generate", "--caption", "кот", "--batch", "2"]);
    let seg = ok(
        &run,
        &[
            "segment",
            "--generation",
            run.join(gen["dir"].as_str().unwrap()).to_str().unwrap(),
        ],
    );
    assert!(seg["model"].is_string());
}
