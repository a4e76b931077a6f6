use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn streamasr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamasr")).args(args).output().expect("binary runs")
}

fn stdout(args: &[&str]) -> String {
    let out = streamasr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = "\
# tiny model for fast runs
task.vocab = 4
task.input_dim = 6
task.max_len = 3
corpus.train = 12
corpus.test = 4
model.d_model = 8
model.d_ff = 16
model.heads = 2
model.encoder_blocks = 2
model.decoder_blocks = 1
model.lookahead = 1
model.eps_dec = 1
train.epochs = 1
train.finetune_epochs = 1
";

#[test]
fn latency_arithmetic() {
    let rsa = ["latency", "--plan", "rsa", "--lookahead", "1", "--layers", "12", "--frame-ms", "40"];
    assert_eq!(stdout(&rsa), "480 ms\n");
    assert_eq!(stdout(&["latency", "--plan", "dcn", "--lookahead", "16", "--layers", "3"]), "640 ms\n");
    let dec = stdout(&["latency", "--plan", "dcn", "--lookahead", "12", "--eps-dec", "8"]);
    assert_eq!(dec, "480 ms\ndecoder look-ahead 320 ms\ntotal 800 ms\n");
    let json: serde_json::Value =
        serde_json::from_str(&stdout(&["latency", "--plan", "csa", "--chunk", "4", "--frames", "8", "--json"])).unwrap();
    assert_eq!(json["hop_frames"], 2);
}

#[test]
fn dcn_mask_dump_golden() {
    let golden = "plan dcn frames 4\nnon-causal queries\nNC..\nNNC.\nNNNC\nNNNN\ncausal queries\nC...\nNC..\nNNC.\nNNNC\n";
    assert_eq!(stdout(&["mask-dump", "--plan", "dcn", "--lookahead", "1", "--frames", "4"]), golden);
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = streamasr(&["latency", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = streamasr(&["mask-dump", "--frames", "4", "--set", "model.plan=sideways"]);
    assert!(!out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "model.heads = three\n").unwrap();
    let out = streamasr(&["latency", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_and_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = d.join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let c = p(&conf);
    stdout(&["gen-corpus", "--config", c, "--out", p(&d.join("data"))]);
    let train = d.join("data/train.json");
    let test = d.join("data/test.json");
    stdout(&["train", "--config", c, "--corpus", p(&train), "--out", p(&d.join("pre"))]);
    assert_eq!(fs::read_to_string(d.join("pre/metrics.jsonl")).unwrap().lines().count(), 1);
    stdout(&[
        "finetune", "--config", c, "--checkpoint", p(&d.join("pre")), "--corpus", p(&train), "--out", p(&d.join("ft")),
        "--eps-dec", "2",
    ]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ft/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["model"]["decoder"]["eps_dec"], 2);

    let ft = d.join("ft");
    let ck = p(&ft);
    let offline = stdout(&["decode", "--config", c, "--checkpoint", ck, "--manifest", p(&test)]);
    let streamed = stdout(&["decode", "--config", c, "--checkpoint", ck, "--manifest", p(&test), "--streaming", "--push-frames", "3"]);
    let finals = |s: &str| -> Vec<String> { s.lines().filter(|l| l.contains("\"final\":true")).map(String::from).collect() };
    assert_eq!(finals(&offline).len(), 4);
    assert_eq!(finals(&offline), finals(&streamed));
    assert!(streamed.lines().count() >= offline.lines().count());

    let decoded = d.join("decoded.jsonl");
    fs::write(&decoded, &streamed).unwrap();
    stdout(&["delay-report", "--config", c, "--decoded", p(&decoded), "--manifest", p(&test), "--out", p(&d.join("delays"))]);
    for f in ["delays.csv", "delays.json", "delays.dat"] {
        assert!(d.join("delays").join(f).exists());
    }

    let empty = d.join("empty.json");
    fs::write(&empty, r#"{"vocabulary": ["a", "b", "c", "d"], "utterances": []}"#).unwrap();
    assert_eq!(stdout(&["decode", "--config", c, "--checkpoint", ck, "--manifest", p(&empty)]), "");
}
