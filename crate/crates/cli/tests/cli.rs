use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mugennet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mugennet"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_train_eval_predict_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = mugennet(&["synth", "--n", "20", "--res", "64x48", "--seed", "3", "--out", "data"], dir);
    assert!(o.status.success(), "{o:?}");
    assert!(dir.join("data/manifest.json").exists());
    assert_eq!(fs::read_dir(dir.join("data/images")).unwrap().count(), 20);

    let cfg = r#"{"preset": "desk", "epochs": 1, "batch_size": 4, "seed": 3,
                  "data": {"dir": {"path": "data"}}, "checkpoint": "run/model.ckpt"}"#;
    fs::write(dir.join("run.json"), cfg).unwrap();
    let o = mugennet(&["train", "--config", "run.json", "--ablate", "mm"], dir);
    assert!(o.status.success(), "{o:?}");
    for f in ["model.ckpt", "model.ckpt.json", "model.ckpt.log.json", "model.ckpt.run.json"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }

    let o = mugennet(&["eval", "--checkpoint", "run/model.ckpt", "--data", "data", "--out", "report.csv", "--split", "test"], dir);
    assert!(o.status.success(), "{o:?}");
    let csv = fs::read_to_string(dir.join("report.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "dataset,model,n,mDice,mIoU,MAE,wFbeta,Smeasure,Emeasure");
    assert!(lines[1].starts_with("data,model,2,"), "{csv}");

    let o = mugennet(
        &["predict", "--checkpoint", "run/model.ckpt", "--image", "data/images/00000.png", "--out", "p.png", "--mask", "m.png"],
        dir,
    );
    assert!(o.status.success(), "{o:?}");
    for f in ["p.png", "m.png"] {
        let img = image_dims(&dir.join(f));
        assert_eq!(img, (64, 48));
    }

    let o = mugennet(&["bench", "--checkpoint", "run/model.ckpt", "--frames", "3"], dir);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("frames=3"), "{out}");
    assert!(out.contains("model,epochs,lr,time_min,fps,mDice\nmodel,1,1e-4,"), "{out}");
}

fn image_dims(path: &Path) -> (u32, u32) {
    // PNG IHDR: width and height are big-endian u32 at bytes 16..24.
    let b = fs::read(path).unwrap();
    (u32::from_be_bytes(b[16..20].try_into().unwrap()), u32::from_be_bytes(b[20..24].try_into().unwrap()))
}

#[test]
fn gradcheck_one_module() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mugennet(&["gradcheck", "--module", "decoder_ag"], tmp.path());
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("PASS attention_gate") && out.contains("1 of 1 cases passed"), "{out}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("bad.json"), r#"{"lr": -1.0}"#).unwrap();
    assert_eq!(mugennet(&["train", "--config", "bad.json"], dir).status.code(), Some(2));
    fs::write(dir.join("none.json"), r#"{"branches": {"transformer": false, "cnn": false}}"#).unwrap();
    assert_eq!(mugennet(&["train", "--config", "none.json"], dir).status.code(), Some(2));
    assert_eq!(mugennet(&["train", "--config", "missing.json"], dir).status.code(), Some(2));
    assert_eq!(mugennet(&["gradcheck", "--module", "nope"], dir).status.code(), Some(2));

    fs::write(dir.join("dir.json"), r#"{"data": {"dir": {"path": "nowhere"}}}"#).unwrap();
    assert_eq!(mugennet(&["train", "--config", "dir.json"], dir).status.code(), Some(3));
    assert_eq!(mugennet(&["bench", "--checkpoint", "missing.ckpt"], dir).status.code(), Some(3));
}
