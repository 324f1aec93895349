use std::path::Path;
use std::process::{Command, Output};

fn ipdm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipdm")).args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const MAPPING: &str =
    "condition=Cote\ninspector=Inspecteur\nyear=Annee\nstructure=Structure\nelement=Element\ncategory=Categorie\n";

fn write_db(dir: &Path, name: &str, rows: &[(&str, &str, &str, u32, &str, &str)]) {
    let mut s = String::from("Structure,Categorie,Element,Annee,Inspecteur,Cote\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.0, r.1, r.2, r.3, r.4, r.5));
    }
    std::fs::write(dir.join(name), s).unwrap();
}

const OLD: &[(&str, &str, &str, u32, &str, &str)] = &[
    ("130", "beams", "1", 2001, "A", "92"),
    ("130", "beams", "1", 2004, "B", "88"),
    ("130", "beams", "1", 2007, "A", "85"),
    ("130", "beams", "2", 2002, "C", "80"),
    ("130", "beams", "2", 2006, "B", "74"),
    ("212", "decks", "1", 2003, "A", ""),
    ("212", "decks", "1", 2005, "C", "77"),
];

const NEW: &[(&str, &str, &str, u32, &str, &str)] = &[
    ("130", "beams", "1", 2010, "B", "83"),
    ("130", "beams", "2", 2009, "A", "71"),
    ("212", "decks", "1", 2009, "B", "73"),
];

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ipdm(&["generate", "--frobnicate"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&ipdm(&["dance"], tmp.path())), 1);
    assert_eq!(code(&ipdm(&[], tmp.path())), 1);
    let o = ipdm(&["--help"], tmp.path());
    assert_eq!(code(&o), 0);
    let help = String::from_utf8_lossy(&o.stdout);
    for verb in [
        "ingest",
        "preprocess",
        "analyze-element",
        "generate",
        "train",
        "train-interventions",
        "verify",
        "validate",
        "serve",
    ] {
        assert!(help.contains(verb), "{verb} missing from help");
    }
    // Missing --out and missing inputs are user errors.
    assert_eq!(code(&ipdm(&["generate"], tmp.path())), 1);
    assert_eq!(code(&ipdm(&["train", "--data", "nowhere", "--out", "p"], tmp.path())), 1);
    assert_eq!(code(&ipdm(&["generate", "--config", "none.cfg", "--out", "d"], tmp.path())), 1);
    std::fs::write(tmp.path().join("bad.cfg"), "time_span=60\nwarp=9\n").unwrap();
    assert_eq!(code(&ipdm(&["generate", "--config", "bad.cfg", "--out", "d"], tmp.path())), 1);
    assert_eq!(code(&ipdm(&["generate", "--threads", "0", "--out", "d"], tmp.path())), 1);
}

#[test]
fn ingest_analyze_preprocess_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_db(d, "old.csv", OLD);
    let mut all = OLD.to_vec();
    all.extend_from_slice(NEW);
    write_db(d, "new.csv", &all);
    std::fs::write(d.join("map.cfg"), MAPPING).unwrap();

    let o = ipdm(&["ingest", "--csv", "old.csv", "--mapping", "map.cfg", "--out", "old"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("old/index.txt").is_file());
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("old/ingest_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rows"], 7);
    assert_eq!(summary["missing"], 1);
    assert_eq!(code(&ipdm(&["ingest", "--csv", "new.csv", "--mapping", "map.cfg", "--out", "new"], d)), 0);

    let o = ipdm(
        &["analyze-element", "--store", "old", "--bridge", "130", "--element", "1", "--forecast", "10", "--out", "a"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("a/analysis.csv")).unwrap();
    assert!(csv.starts_with("year,kind,condition_mean,condition_low,condition_high,"));
    assert_eq!(csv.lines().filter(|l| l.contains(",forecast,")).count(), 10);
    let png = std::fs::read(d.join("a/analysis.png")).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    let o = ipdm(&["analyze-element", "--store", "old", "--bridge", "130", "--element", "9", "--out", "a"], d);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("element not found"));

    assert_eq!(code(&ipdm(&["preprocess", "--store", "old", "--out", "old2"], d)), 0);
    for f in ["index.txt", "store.json", "bridge_130.json", "bridge_212.json"] {
        assert_eq!(
            std::fs::read(d.join("old").join(f)).unwrap(),
            std::fs::read(d.join("old2").join(f)).unwrap(),
            "{f}"
        );
    }

    // Default parameters on the store's scale.
    let p = ipdm_service::ops::default_params(ipdm_core::domain::ConditionScale::default());
    ipdm_core::train::save_params(&d.join("p.ipdm"), &p).unwrap();
    let o = ipdm(&["validate", "--old", "old", "--new", "new", "--params", "p.ipdm", "--out", "val"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("val/validation.json")).unwrap()).unwrap();
    assert_eq!(v["n_new"], 3);
    assert!(v["total_loglik"].as_f64().unwrap().is_finite());
    let inn = std::fs::read_to_string(d.join("val/innovations.csv")).unwrap();
    assert_eq!(inn.lines().count(), 4);

    // No new inspections is a user error.
    let o = ipdm(&["validate", "--old", "old", "--new", "old", "--params", "p.ipdm", "--out", "val2"], d);
    assert_eq!(code(&o), 1);
}

#[test]
fn generate_train_interventions() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("j.cfg"),
        "time_span=40\nn_series=150\nn_inspectors=6\nsigma_v_min=1\nsigma_v_max=3\n\
         jump_type=repair\njump_d_cond=10\njump_d_speed=1\njump_d_accel=0\njump_fraction=1\njump_year_min=15\njump_year_max=25\n",
    )
    .unwrap();
    let o = ipdm(&["generate", "--config", "j.cfg", "--seed", "4", "--out", "ds"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("ds/interventions.csv").is_file());
    let o = ipdm(&["train", "--data", "ds", "--max-iter", "5", "--out", "p"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let params = std::fs::read_dir(d.join("p"))
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .find(|p| p.extension().is_some_and(|x| x == "ipdm"))
        .unwrap();
    let o = ipdm(&["train-interventions", "--data", "ds", "--params", params.to_str().unwrap(), "--out", "fx"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("fx/effects.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "type_id,d_cond,d_speed,d_accel,var_cond,var_speed,var_accel");
    assert!(csv.lines().nth(1).unwrap().starts_with("repair,"));
    let p = ipdm_core::train::load_params(&d.join("fx").join(params.file_name().unwrap())).unwrap();
    assert_eq!(p.effects.len(), 1);
}
