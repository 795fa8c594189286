// SPDX-License-Identifier: MIT OR Apache-2.0

//! Loading the on-disk interfaces the exporter produces: bundles, weight
//! containers, tokenizer files, JSONL datasets and reference logits.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use circuit_align::model::reference::{
    check_reference_logits, verify_checksums, ReferenceLogits, CHECKSUM_FILE, REFERENCE_FILE, REFERENCE_TOLERANCE,
};
use circuit_align::model::safetensors::{self, StoredTensor};
use circuit_align::model::{manifest, ModelBundle, Tokenizer};
use circuit_align::task::{gen_ioi, gen_numeral_sequences, load_external_jsonl, load_jsonl, save_jsonl, TaskTag};
use circuit_align::toy::{build_model, write_fixtures, IdleStyle, PlantedSpec};
use circuit_align::Error;

const BUNDLES: [&str; 4] = ["toy_teacher", "toy_student_high", "toy_student_medium", "toy_student_low"];

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn shipped_bundles_load_and_echo_their_config() {
    let t = ModelBundle::load_dir(&fixture("toy_teacher")).unwrap();
    assert_eq!((t.config.n_layers, t.config.n_heads, t.config.d_model), (6, 4, 64));
    assert_eq!(t.name, "toy_teacher");
    for name in &BUNDLES[1..] {
        let s = ModelBundle::load_dir(&fixture(name)).unwrap();
        assert_eq!((s.config.n_layers, s.config.n_heads, s.config.d_head), (2, 2, 32));
    }
    let raw: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fixture("toy_teacher").join("config.json")).unwrap()).unwrap();
    assert_eq!(serde_json::to_value(&t.config).unwrap(), raw);
}

#[test]
fn shipped_bundles_match_the_builder() {
    let specs = [
        PlantedSpec::teacher(),
        PlantedSpec::student(IdleStyle::Base),
        PlantedSpec::student(IdleStyle::Rotated),
        PlantedSpec::student(IdleStyle::Orthogonal),
    ];
    for (name, spec) in BUNDLES.iter().zip(specs) {
        let loaded = ModelBundle::load_dir(&fixture(name)).unwrap();
        let built = build_model(&spec).unwrap();
        assert_eq!(loaded.digest, built.digest, "{name}");
        let tokens = [0, 4, 34, 35, 2, 36];
        assert_eq!(loaded.logits(&tokens).unwrap(), built.logits(&tokens).unwrap());
    }
}

#[test]
fn regenerated_fixtures_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_fixtures(dir.path()).unwrap();
    assert_eq!(written.len(), BUNDLES.len());
    for name in BUNDLES {
        for file in ["config.json", "model.safetensors", "vocab.json", "merges.txt", REFERENCE_FILE, CHECKSUM_FILE] {
            let shipped = std::fs::read(fixture(name).join(file)).unwrap();
            let fresh = std::fs::read(dir.path().join(name).join(file)).unwrap();
            assert!(shipped == fresh, "{name}/{file} differs from a fresh export");
        }
    }
}

#[test]
fn shipped_bundles_pass_checksums_and_reference_logits() {
    for name in BUNDLES {
        let dir = fixture(name);
        let verified = verify_checksums(&dir).unwrap();
        assert_eq!(verified.len(), 5, "{name}");
        let model = ModelBundle::load_dir(&dir).unwrap();
        let reference = ReferenceLogits::read(&dir.join(REFERENCE_FILE)).unwrap();
        assert_eq!(reference.prompts.len(), 5);
        let check = check_reference_logits(&model, &reference, REFERENCE_TOLERANCE).unwrap();
        assert!(check.passed(), "{name}: {check:?}");
        assert!(check.max_abs_diff() <= REFERENCE_TOLERANCE);
    }
}

#[test]
fn reference_check_rejects_drifted_logits_and_foreign_tokenization() {
    let model = ModelBundle::load_dir(&fixture("toy_teacher")).unwrap();
    let mut reference = ReferenceLogits::read(&fixture("toy_teacher").join(REFERENCE_FILE)).unwrap();
    reference.prompts[2].logits[7] += 2e-3;
    let check = check_reference_logits(&model, &reference, REFERENCE_TOLERANCE).unwrap();
    assert!(!check.passed());
    assert!(!check.prompts[2].max_abs_diff.is_nan() && check.prompts[2].max_abs_diff > REFERENCE_TOLERANCE);
    assert!(check.prompts.iter().enumerate().all(|(i, p)| i == 2 || p.max_abs_diff == 0.0));

    let mut reference = ReferenceLogits::read(&fixture("toy_teacher").join(REFERENCE_FILE)).unwrap();
    reference.prompts[0].token_ids.reverse();
    let p = &check_reference_logits(&model, &reference, REFERENCE_TOLERANCE).unwrap().prompts[0];
    assert!(!p.tokenization_agrees);

    reference.prompts[1].logits.pop();
    assert!(matches!(
        check_reference_logits(&model, &reference, REFERENCE_TOLERANCE),
        Err(Error::DimensionMismatch(_))
    ));
}

fn toy_tensors() -> (ModelBundle, BTreeMap<String, StoredTensor>) {
    let m = build_model(&PlantedSpec::student(IdleStyle::Base)).unwrap();
    let tensors = m.weights.to_tensors(&m.config);
    (m, tensors)
}

fn write_bundle(dir: &Path, m: &ModelBundle, tensors: &BTreeMap<String, StoredTensor>) {
    m.save_dir(dir).unwrap();
    std::fs::write(dir.join("model.safetensors"), safetensors::write(tensors).unwrap()).unwrap();
}

#[test]
fn prefixed_names_and_tied_or_separate_unembedding_load() {
    let (m, tensors) = toy_tensors();
    let names: Vec<String> = manifest(&m.config).into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().all(|n| tensors.contains_key(n)));

    let dir = tempfile::tempdir().unwrap();
    let mut prefixed: BTreeMap<String, StoredTensor> =
        tensors.iter().map(|(k, v)| (format!("transformer.{k}"), v.clone())).collect();
    prefixed.insert("h.0.attn.bias".into(), StoredTensor::new(vec![1], vec![0.0]));
    write_bundle(dir.path(), &m, &prefixed);
    let loaded = ModelBundle::load_dir(dir.path()).unwrap();
    let tokens = [0, 3, 4, 5];
    assert_eq!(loaded.logits(&tokens).unwrap(), m.logits(&tokens).unwrap());

    let mut separate = tensors.clone();
    let wte = tensors["wte.weight"].clone();
    separate.insert("lm_head.weight".into(), StoredTensor::new(wte.shape.clone(), wte.data.iter().map(|x| 2.0 * x).collect()));
    write_bundle(dir.path(), &m, &separate);
    let untied = ModelBundle::load_dir(dir.path()).unwrap();
    assert!(untied.weights.unembedding.is_some());
    assert_ne!(untied.logits(&tokens).unwrap(), m.logits(&tokens).unwrap());
}

#[test]
fn weight_errors_name_the_tensor() {
    let (m, tensors) = toy_tensors();
    let dir = tempfile::tempdir().unwrap();

    let mut missing = tensors.clone();
    missing.remove("h.1.mlp.c_fc.bias");
    write_bundle(dir.path(), &m, &missing);
    match ModelBundle::load_dir(dir.path()) {
        Err(Error::Tensor { name, .. }) => assert_eq!(name, "h.1.mlp.c_fc.bias"),
        other => panic!("expected tensor error, got {other:?}"),
    }

    let mut reshaped = tensors.clone();
    let t = reshaped.get_mut("h.0.attn.c_proj.weight").unwrap();
    t.shape = vec![t.shape[1], t.shape[0] / 2, 2];
    write_bundle(dir.path(), &m, &reshaped);
    match ModelBundle::load_dir(dir.path()) {
        Err(Error::Tensor { name, reason }) => {
            assert_eq!(name, "h.0.attn.c_proj.weight");
            assert!(reason.contains("shape"), "{reason}");
        }
        other => panic!("expected tensor error, got {other:?}"),
    }

    let mut poisoned = tensors;
    poisoned.get_mut("ln_f.weight").unwrap().data[3] = f32::NAN;
    assert!(matches!(safetensors::write(&poisoned).and_then(|b| safetensors::read(&b)), Err(Error::Tensor { .. })));
}

#[test]
fn half_precision_containers_widen_to_f32() {
    let half_vals = [1.0f32, -2.5, 0.125];
    let mut payload = Vec::new();
    for v in half_vals {
        payload.extend_from_slice(&half::f16::from_f32(v).to_le_bytes());
    }
    for v in half_vals {
        payload.extend_from_slice(&half::bf16::from_f32(v).to_le_bytes());
    }
    let header = br#"{"a":{"dtype":"F16","shape":[3],"data_offsets":[0,6]},"b":{"dtype":"BF16","shape":[3],"data_offsets":[6,12]},"__metadata__":{"format":"pt"}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header);
    bytes.extend_from_slice(&payload);
    let read = safetensors::read(&bytes).unwrap();
    assert_eq!(read["a"].data, half_vals);
    assert_eq!(read["b"].data, half_vals);
    assert_eq!(read["a"].shape, vec![3]);
}

#[test]
fn missing_and_malformed_files_are_load_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(ModelBundle::load_dir(dir.path()), Err(Error::Load(_))));

    let (m, tensors) = toy_tensors();
    write_bundle(dir.path(), &m, &tensors);
    let mut cfg: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("config.json")).unwrap()).unwrap();
    cfg["d_head"] = serde_json::json!(7);
    std::fs::write(dir.path().join("config.json"), cfg.to_string()).unwrap();
    assert!(matches!(ModelBundle::load_dir(dir.path()), Err(Error::Load(_))));

    write_bundle(dir.path(), &m, &tensors);
    std::fs::write(dir.path().join("model.safetensors"), b"\x05\0\0\0\0\0\0\0{bad}").unwrap();
    assert!(ModelBundle::load_dir(dir.path()).is_err());
}

#[test]
fn byte_pair_tokenizer_round_trips_through_its_files() {
    let mut vocab: HashMap<String, u32> = HashMap::new();
    let symbols = ["<|endoftext|>", "l", "o", "w", "e", "r", "Ġ", "lo", "low", "er", "Ġlow", "Ġlower", ".", "n", "Ġn"];
    for (i, s) in symbols.iter().enumerate() {
        vocab.insert(s.to_string(), i as u32);
    }
    let merges = vec![
        ("l".to_string(), "o".to_string()),
        ("lo".to_string(), "w".to_string()),
        ("e".to_string(), "r".to_string()),
        ("Ġ".to_string(), "low".to_string()),
        ("Ġlow".to_string(), "er".to_string()),
        ("Ġ".to_string(), "n".to_string()),
    ];
    let tok = Tokenizer::new(vocab, merges).unwrap();
    let dir = tempfile::tempdir().unwrap();
    tok.write_dir(dir.path()).unwrap();
    let back = Tokenizer::from_dir(dir.path()).unwrap();
    for text in ["low lower.", "<|endoftext|>lower low", " n low"] {
        let ids = back.encode(text).unwrap();
        assert_eq!(ids, tok.encode(text).unwrap());
        assert_eq!(back.decode(&ids), text);
    }
    assert_eq!(back.encode("low lower").unwrap(), vec![8, 11]);
    assert!(matches!(back.encode("zebra"), Err(Error::InvalidArgument(_))));

    std::fs::write(dir.path().join("merges.txt"), "#version: 0.2\nl o\nbroken\n").unwrap();
    assert!(matches!(Tokenizer::from_dir(dir.path()), Err(Error::Parse { line: 3, .. })));
}

#[test]
fn jsonl_datasets_round_trip_byte_for_byte() {
    let m = ModelBundle::load_dir(&fixture("toy_teacher")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for ds in [gen_numeral_sequences(25, 4, &m.tokenizer).unwrap(), gen_ioi(25, 4, &m.tokenizer).unwrap()] {
        let path = dir.path().join(format!("{}.jsonl", ds.task.name()));
        save_jsonl(&ds, &path).unwrap();
        let back = load_jsonl(&path, &m.tokenizer).unwrap();
        assert_eq!(back.task, ds.task);
        assert_eq!(back.examples.len(), 25);
        for (a, b) in ds.examples.iter().zip(&back.examples) {
            assert_eq!(a.prompt_tokens, b.prompt_tokens);
            assert_eq!((a.correct_token, a.incorrect_token), (b.correct_token, b.incorrect_token));
        }
        let again = dir.path().join("again.jsonl");
        save_jsonl(&back, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}

#[test]
fn external_jsonl_is_hashed_by_content_and_rejects_bad_rows() {
    let m = ModelBundle::load_dir(&fixture("toy_teacher")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ext.jsonl");
    std::fs::write(&path, "{\"prompt\":\" 3 4\",\"correct\":\" 5\",\"incorrect\":\" 4\"}\n\n{\"prompt\":\" 7\",\"correct\":\" 8\",\"incorrect\":\" 1\"}\n").unwrap();
    let ds = load_external_jsonl(&path, &m.tokenizer).unwrap();
    assert_eq!((ds.task, ds.len()), (TaskTag::External, 2));
    assert_eq!(ds.examples[0].prompt_tokens[0], m.tokenizer.bos_id().unwrap());

    let other = dir.path().join("other.jsonl");
    std::fs::write(&other, "{\"prompt\":\" 3 4\",\"correct\":\" 5\",\"incorrect\":\" 6\"}\n{\"prompt\":\" 7\",\"correct\":\" 8\",\"incorrect\":\" 1\"}\n").unwrap();
    assert_ne!(load_external_jsonl(&other, &m.tokenizer).unwrap().content_hash, ds.content_hash);

    std::fs::write(&other, "{\"prompt\":\" 3\",\"correct\":\" 5\",\"incorrect\":\" 6\"}\n{\"prompt\":\" 3\"}\n").unwrap();
    assert!(matches!(load_external_jsonl(&other, &m.tokenizer), Err(Error::Parse { line: 2, .. })));
    std::fs::write(&other, "{\"prompt\":\" 3\",\"correct\":\" 5\",\"incorrect\":\" 5\"}\n").unwrap();
    assert!(matches!(load_external_jsonl(&other, &m.tokenizer), Err(Error::Parse { line: 1, .. })));
}
