use std::process::Command;

fn fogsight(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fogsight"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "seed = 1\nbogus = 2\n").unwrap();
    let out = fogsight(dir.path(), &["synth", "--config", "bad.toml", "--out", "d"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn seed_flag_names_the_run_and_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[scene]\nwidth = 16\nheight = 16\nmin_object_size = 3\nmax_object_size = 5\n\
               [ood_scene]\nwidth = 16\nheight = 16\nmin_object_size = 3\nmax_object_size = 5\n\
               [dataset]\ntrain = 2\nval = 1\ntest = 2\nood_test = 0\n\
               [train]\nepochs = 1\nattention_epochs = 1\n";
    std::fs::write(dir.path().join("c.toml"), cfg).unwrap();
    for seed in ["1", "2"] {
        let data = format!("data{seed}");
        let manifest = format!("{data}/manifest.jsonl");
        let steps = [
            vec!["synth", "--out", data.as_str()],
            vec!["train", "--manifest", manifest.as_str(), "--out", "p.json"],
            vec!["eval", "--manifest", manifest.as_str(), "--params", "p.json"],
        ];
        for mut args in steps {
            args.extend(["--config", "c.toml", "--seed", seed]);
            let out = fogsight(dir.path(), &args);
            assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        }
        assert!(dir.path().join(format!("runs/seed-{seed}/report.json")).is_file());
        assert!(dir.path().join(format!("runs/seed-{seed}/timings.json")).is_file());
    }
    let a = std::fs::read(dir.path().join("data1/foggy/test-00000.png")).unwrap();
    let b = std::fs::read(dir.path().join("data2/foggy/test-00000.png")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn missing_params_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = fogsight(dir.path(), &["dehaze", "--params", "nope.json", "--input", "x.png", "--output", "y.png"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}
