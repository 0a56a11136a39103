use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use podsr::pipeline::{smoke_config, Method, Pipeline};
use podsr::Error;

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn smoke_run_is_complete_and_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    Pipeline::open(smoke_config(&a)).unwrap().run_all().unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "smoke run took {elapsed:.1}s");
    Pipeline::open(smoke_config(&b)).unwrap().run_all().unwrap();

    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ta {
        // the manifest carries wall-clock timings and output paths
        if name == "manifest.json" {
            continue;
        }
        assert!(bytes == &tb[name], "{name} differs between identical runs");
    }
    for want in [
        "data/train_hr.fst",
        "pod/basis.bin",
        "train/podiff_k8.ckpt",
        "sample/podiff_k8/latent.fst",
        "eval/podiff_k8/metrics.csv",
        "eval/podiff_k8/reliability.csv",
        "eval/podiff_k8/sweep.csv",
        "eval/rbf/metrics.csv",
        "report/summary.csv",
    ] {
        assert!(ta.contains_key(want), "missing {want}");
    }
    let summary = String::from_utf8(ta["report/summary.csv"].clone()).unwrap();
    assert!(summary.starts_with("method,metric,value\n"));
    assert!(summary.contains("podiff_k8,coverage_0.9,"));

    let manifest: serde_json::Value = serde_json::from_slice(&ta["manifest.json"]).unwrap();
    let stages = manifest["stages"].as_object().unwrap();
    let recorded: Vec<&str> = stages
        .values()
        .flat_map(|s| s["outputs"].as_object().unwrap().keys().map(String::as_str))
        .collect();
    for name in ta.keys().filter(|n| *n != "manifest.json") {
        assert!(
            recorded.contains(&name.as_str()),
            "{name} not attributed in the manifest"
        );
    }
}

#[test]
fn stages_need_their_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(smoke_config(dir.path())).unwrap();
    let err = p.fit_pod().unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    p.gen_data().unwrap();
    p.fit_pod().unwrap();
    let err = p.evaluate(Method::Podiff, 8).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn tampered_input_is_reported_as_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(smoke_config(dir.path())).unwrap();
    p.gen_data().unwrap();
    let path = dir.path().join("data/train_hr.fst");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    let err = p.fit_pod().unwrap_err();
    assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
}
