use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dipformer::checkpoint::load_checkpoint;
use dipformer::data::{load_manifest, make_batch, read_manifest, read_png};
use dipformer::model::DipFormer;

fn dipformer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dipformer"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &str = "model.stage_channels=8,16\nmodel.stage_heads=1,2\nmodel.decoder_channels=16\nmodel.decoder_hidden=16\ntrain.lr0=0.001\n";

/// Synthetic data plus a briefly trained checkpoint.
fn trained(dir: &Path) -> PathBuf {
    ok(&dipformer(&["synth", "--out", "data", "--count", "4", "--seed", "3"], dir));
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    ok(&dipformer(
        &["train", "--data", "data/manifest.tsv", "--out", "run", "--config", "tiny.cfg", "--steps", "8", "--seed", "1"],
        dir,
    ));
    dir.join("run/model.ckpt")
}

#[test]
fn mask_matches_library_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let entry = &read_manifest(&dir.path().join("data/manifest.tsv")).unwrap()[2];
    let (rgb, depth) = (entry.rgb.to_str().unwrap(), entry.depth.to_str().unwrap());
    let out = dipformer(
        &["infer", "--checkpoint", "run/model.ckpt", "--rgb", rgb, "--depth", depth, "--out-mask", "m.png", "--out-labels", "l.png"],
        dir.path(),
    );
    ok(&out);

    let (cfg, store) = load_checkpoint::<f32>(&ckpt).unwrap();
    let n_cls = cfg.n_cls;
    let model = DipFormer::new(cfg).unwrap();
    let sample = &load_manifest(&dir.path().join("data/manifest.tsv"), None).unwrap()[2];
    let batch = make_batch::<f32>(&[sample]).unwrap();
    let expected = model.predict(&store, &batch.rgb, &batch.depth).unwrap();

    let labels = read_png(&dir.path().join("l.png")).unwrap();
    assert!(labels.samples.iter().zip(&expected).all(|(&a, &b)| a == b as u16));
    // the palette is injective, so the colored mask decodes to the same labels
    let mask = read_png(&dir.path().join("m.png")).unwrap();
    let palette: Vec<[u16; 3]> = (0..n_cls as u8)
        .map(|c| {
            let i = expected.iter().position(|&l| l == c);
            i.map_or([u16::MAX; 3], |i| [mask.samples[3 * i], mask.samples[3 * i + 1], mask.samples[3 * i + 2]])
        })
        .collect();
    for (i, &l) in expected.iter().enumerate() {
        let px = [mask.samples[3 * i], mask.samples[3 * i + 1], mask.samples[3 * i + 2]];
        assert_eq!(palette.iter().position(|c| *c == px), Some(l as usize));
    }
}

#[test]
fn attention_row_is_a_distribution() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let entry = &read_manifest(&dir.path().join("data/manifest.tsv")).unwrap()[0];
    let (rgb, depth) = (entry.rgb.to_str().unwrap(), entry.depth.to_str().unwrap());
    for (stage, query) in [("1", "0"), ("2", "37")] {
        let stdout = ok(&dipformer(
            &[
                "infer", "--checkpoint", "run/model.ckpt", "--rgb", rgb, "--depth", depth, "--out-mask", "m.png", "--out-attn",
                "a.png", "--stage", stage, "--query", query,
            ],
            dir.path(),
        ));
        let sum: f64 = stdout.split("row_sum=").nth(1).unwrap().trim().parse().unwrap();
        assert!((sum - 1.0).abs() <= 1e-6, "{stdout}");
        let img = read_png(&dir.path().join("a.png")).unwrap();
        assert_eq!((img.width, img.channels), (7 * 32, 3));
    }
    let far = dipformer(
        &["infer", "--checkpoint", "run/model.ckpt", "--rgb", rgb, "--depth", depth, "--out-mask", "m.png", "--out-attn", "a.png", "--query", "5000"],
        dir.path(),
    );
    assert_eq!(far.status.code(), Some(2));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let entry = &read_manifest(&dir.path().join("data/manifest.tsv")).unwrap()[0];
    let rgb = entry.rgb.to_str().unwrap();

    let missing = dipformer(
        &["infer", "--checkpoint", "run/model.ckpt", "--rgb", rgb, "--depth", "absent_depth.png", "--out-mask", "m.png"],
        dir.path(),
    );
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent_depth.png"));

    ok(&dipformer(&["synth", "--out", "big", "--count", "1", "--size", "128"], dir.path()));
    let big = read_manifest(&dir.path().join("big/manifest.tsv")).unwrap().remove(0);
    let wrong_size = dipformer(
        &[
            "infer", "--checkpoint", "run/model.ckpt", "--rgb", big.rgb.to_str().unwrap(), "--depth", big.depth.to_str().unwrap(),
            "--out-mask", "m.png",
        ],
        dir.path(),
    );
    assert_eq!(wrong_size.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&wrong_size.stderr).contains("config error"));

    assert_eq!(dipformer(&["bench", "--sizes", ""], dir.path()).status.code(), Some(2));
    assert_eq!(dipformer(&["bench", "--sizes", "40"], dir.path()).status.code(), Some(2));
    assert_eq!(dipformer(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(dipformer(&["synth", "--out", "x", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(dipformer(&["gradcheck"], dir.path()).status.code(), Some(2));

    std::fs::write(dir.path().join("bad.cfg"), "stage_channels=8\n").unwrap();
    let unprefixed = dipformer(&["train", "--data", "data/manifest.tsv", "--out", "r2", "--config", "bad.cfg"], dir.path());
    assert_eq!(unprefixed.status.code(), Some(2));
}

#[test]
fn gradcheck_names_the_corrupted_op() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dipformer(&["gradcheck", "--ops"], dir.path());
    assert_eq!(clean.status.code(), Some(0));
    let broken = dipformer(&["gradcheck", "--ops", "--inject-fault", "conv2d"], dir.path());
    assert_eq!(broken.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&broken.stderr);
    assert!(stderr.contains("FAILED conv2d: tensor") && stderr.contains("index"), "{stderr}");
    assert!(!stderr.lines().any(|l| !l.contains("conv2d")));
    let e2e = dipformer(&["gradcheck", "--end-to-end"], dir.path());
    assert_eq!(e2e.status.code(), Some(0));
}

#[test]
fn bench_reports_fixed_kv_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(&dipformer(&["bench", "--sizes", "64,128"], dir.path()));
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let col = |name: &str| rows[0].iter().position(|h| *h == name).unwrap();
    for row in &rows[1..] {
        assert_eq!(row[col("kv_tokens_s1")], "49");
    }
    let ratio: f64 = rows[2][col("decoder_ratio")].parse().unwrap();
    assert!((ratio - 4.0).abs() <= 0.05);
}
