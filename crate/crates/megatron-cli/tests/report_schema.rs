//! Validate generated reports against the published schema file with a
//! small draft-07 subset checker (types, required, additionalProperties,
//! items, numeric bounds).

use serde_json::Value;
use std::path::Path;
use std::process::Command;

fn validate(schema: &Value, value: &Value, path: &str, errors: &mut Vec<String>) {
    if let Some(t) = schema.get("type").and_then(Value::as_str) {
        let ok = match t {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "number" => value.is_number(),
            "integer" => value.is_u64() || value.is_i64(),
            "string" => value.is_string(),
            "boolean" => value.is_boolean(),
            other => panic!("unsupported schema type {other}"),
        };
        if !ok {
            errors.push(format!("{path}: expected {t}, got {value}"));
            return;
        }
    }
    if let Some(min) = schema.get("minimum").and_then(Value::as_f64) {
        if let Some(v) = value.as_f64() {
            if v < min {
                errors.push(format!("{path}: {v} below minimum {min}"));
            }
        }
    }
    if let Some(max) = schema.get("maximum").and_then(Value::as_f64) {
        if let Some(v) = value.as_f64() {
            if v > max {
                errors.push(format!("{path}: {v} above maximum {max}"));
            }
        }
    }
    if let Some(obj) = value.as_object() {
        if let Some(required) = schema.get("required").and_then(Value::as_array) {
            for name in required {
                let name = name.as_str().unwrap();
                if !obj.contains_key(name) {
                    errors.push(format!("{path}: missing required key `{name}`"));
                }
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        let strict = schema.get("additionalProperties") == Some(&Value::Bool(false));
        for (k, v) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(sub) => validate(sub, v, &format!("{path}.{k}"), errors),
                None if strict => errors.push(format!("{path}: unexpected key `{k}`")),
                None => {}
            }
        }
    }
    if let (Some(arr), Some(items)) = (value.as_array(), schema.get("items")) {
        for (i, v) in arr.iter().enumerate() {
            validate(items, v, &format!("{path}[{i}]"), errors);
        }
    }
}

#[test]
fn generated_report_validates_against_published_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.toml");
    std::fs::write(
        &config,
        r#"
seed = 3
target_label = 1
[dataset]
classes = [0, 1]
train_per_class = 16
test_per_class = 6
[surrogate_model]
image_size = 16
patch_size = 4
n_layers = 1
n_heads = 2
embed_dim = 16
mlp_ratio = 2
[victim_model]
image_size = 16
patch_size = 4
n_layers = 1
n_heads = 2
embed_dim = 16
mlp_ratio = 2
[surrogate_train]
epochs = 1
learning_rate = 0.1
batch_size = 8
[victim_train]
epochs = 1
learning_rate = 0.1
batch_size = 8
[trigger]
width = 4
height = 4
top = 4
left = 4
max_iters = 2
lr = 0.01
[poison]
steps = 1
lr = 0.1
poison_count = 2
k = 2
[poison.mode]
kind = "any-to-one"
[evaluation]
shifts = [0, 1]
[defense]
enabled = true
drop_rate = 0.25
shuffle = true
"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("run");
    let status = Command::new(env!("CARGO_BIN_EXE_megatron"))
        .args([
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../docs/attack_report.schema.json");
    let schema: Value =
        serde_json::from_str(&std::fs::read_to_string(schema_path).unwrap()).unwrap();
    let report: Value = serde_json::from_str(
        &std::fs::read_to_string(out_dir.join("report.json")).unwrap(),
    )
    .unwrap();
    let mut errors = Vec::new();
    validate(&schema, &report, "$", &mut errors);
    assert!(errors.is_empty(), "schema violations: {errors:#?}");
}
