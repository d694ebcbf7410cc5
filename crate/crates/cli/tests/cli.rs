//! End-to-end CLI behavior: exit codes, file outputs, determinism.

use std::path::{Path, PathBuf};
use std::process::Command;

fn clmrc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clmrc"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("clmrc-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn unknown_flag_is_usage_error_exit_2() {
    let status = clmrc().args(["stats", "--no-such-flag"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_usage_error_exit_2() {
    let status = clmrc().args(["frobnicate"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn missing_input_is_runtime_error_exit_1() {
    let status = clmrc()
        .args(["stats", "--train-file", "/no/such/file.json"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&status.stderr);
    assert!(stderr.contains("error:"), "stderr was {stderr}");
}

#[test]
fn delta_out_of_range_is_usage_error() {
    let status = clmrc()
        .args(["align", "--delta", "9"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
}

#[test]
fn gen_synthetic_twice_is_byte_identical() {
    let dir_a = tmp_dir("gen-a");
    let dir_b = tmp_dir("gen-b");
    for dir in [&dir_a, &dir_b] {
        let status = clmrc()
            .args([
                "gen-synthetic",
                "--seed",
                "7",
                "--num",
                "100",
                "--out",
                dir.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(status.status.success(), "{:?}", status);
    }
    for file in ["target.json", "source.json", "bilingual.jsonl", "dict.tsv"] {
        assert_eq!(
            read(&dir_a.join(file)),
            read(&dir_b.join(file)),
            "{file} differs between identical runs"
        );
    }
    std::fs::remove_dir_all(&dir_a).ok();
    std::fs::remove_dir_all(&dir_b).ok();
}

#[test]
fn evaluate_perfect_predictions_scores_100() {
    let dir = tmp_dir("eval");
    let gen = clmrc()
        .args([
            "gen-synthetic",
            "--seed",
            "3",
            "--num",
            "20",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(gen.status.success());

    // Gold predictions straight from the answers.
    let body = std::fs::read_to_string(dir.join("target.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&body).unwrap();
    let mut predictions = serde_json::Map::new();
    for article in parsed["data"].as_array().unwrap() {
        for paragraph in article["paragraphs"].as_array().unwrap() {
            for qa in paragraph["qas"].as_array().unwrap() {
                predictions.insert(
                    qa["id"].as_str().unwrap().to_string(),
                    qa["answers"][0]["text"].clone(),
                );
            }
        }
    }
    let pred_path = dir.join("predictions.json");
    std::fs::write(
        &pred_path,
        serde_json::to_string_pretty(&predictions).unwrap(),
    )
    .unwrap();

    let output = clmrc()
        .args([
            "evaluate",
            "--dev-file",
            dir.join("target.json").to_str().unwrap(),
            "--predictions",
            pred_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(
        stdout.contains("EM 100.0000 F1 100.0000"),
        "stdout was {stdout}"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gradcheck_primitives_exits_zero() {
    let output = clmrc()
        .args(["gradcheck", "--model", "primitives", "--seeds", "1"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}

#[test]
fn align_snaps_predictions_to_substrings() {
    let dir = tmp_dir("align");
    let gen = clmrc()
        .args([
            "gen-synthetic",
            "--seed",
            "11",
            "--num",
            "15",
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(gen.status.success());

    let body = std::fs::read_to_string(dir.join("target.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&body).unwrap();
    let mut predictions = serde_json::Map::new();
    for article in parsed["data"].as_array().unwrap() {
        for paragraph in article["paragraphs"].as_array().unwrap() {
            for qa in paragraph["qas"].as_array().unwrap() {
                // A corrupted copy of the answer: prefix garbage.
                let answer = qa["answers"][0]["text"].as_str().unwrap();
                predictions.insert(
                    qa["id"].as_str().unwrap().to_string(),
                    serde_json::Value::String(format!("zz {answer}")),
                );
            }
        }
    }
    let pred_path = dir.join("noisy_predictions.json");
    std::fs::write(
        &pred_path,
        serde_json::to_string_pretty(&predictions).unwrap(),
    )
    .unwrap();

    let out_dir = dir.join("aligned");
    let output = clmrc()
        .args([
            "align",
            "--dev-file",
            dir.join("target.json").to_str().unwrap(),
            "--predictions",
            pred_path.to_str().unwrap(),
            "--delta",
            "3",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");

    let aligned: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("aligned_predictions.json")).unwrap(),
    )
    .unwrap();
    let passages: Vec<String> = parsed["data"][0]["paragraphs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["context"].as_str().unwrap().to_string())
        .collect();
    for (_, value) in aligned.as_object().unwrap() {
        let text = value.as_str().unwrap();
        assert!(
            passages.iter().any(|p| p.contains(text)),
            "aligned output {text:?} is not a passage substring"
        );
    }
    std::fs::remove_dir_all(&dir).ok();
}
