use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use lwi_cli::config::ExperimentConfig;
use lwi_core::continual::RunConfig;
use serde_json::Value;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn schema() -> Value {
    serde_json::from_str(&std::fs::read_to_string(configs_dir().join("schema.json")).unwrap()).unwrap()
}

fn resolve<'a>(schema: &'a Value, node: &'a Value) -> &'a Value {
    match node.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let name = r.trim_start_matches("#/$defs/");
            &schema["$defs"][name]
        }
        None => node,
    }
}

fn property_names(node: &Value) -> BTreeSet<String> {
    node["properties"].as_object().map(|m| m.keys().cloned().collect()).unwrap_or_default()
}

/// Collects `path` of every key in `doc` that the schema does not declare.
fn undeclared(schema: &Value, node: &Value, doc: &Value, path: &str, out: &mut Vec<String>) {
    let node = resolve(schema, node);
    let Some(obj) = doc.as_object() else { return };
    if let Some(variants) = node.get("oneOf").and_then(Value::as_array) {
        let kind = obj.get("kind").cloned().unwrap_or(Value::Null);
        let chosen = variants
            .iter()
            .map(|v| resolve(schema, v))
            .find(|v| v["properties"]["kind"]["const"] == kind);
        match chosen {
            Some(v) => undeclared(schema, v, doc, path, out),
            None => out.push(format!("{path}.kind")),
        }
        return;
    }
    for (key, value) in obj {
        let child = format!("{path}.{key}");
        match node["properties"].get(key) {
            Some(sub) => undeclared(schema, sub, value, &child, out),
            None => out.push(child),
        }
    }
}

#[test]
fn shipped_configs_load_and_match_the_schema() {
    let schema = schema();
    for name in ["desk.toml", "paper.toml"] {
        let path = configs_dir().join(name);
        let cfg = ExperimentConfig::from_path(&path).unwrap_or_else(|e| panic!("{name}: {}", e.message));
        assert_eq!(cfg.run.train.seed, cfg.seed);
        let doc: Value = toml::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let mut missing = Vec::new();
        undeclared(&schema, &schema, &doc, "", &mut missing);
        assert!(missing.is_empty(), "{name}: keys not in schema: {missing:?}");
    }
}

#[test]
fn desk_file_matches_the_built_in_desk_profile() {
    let cfg = ExperimentConfig::from_path(&configs_dir().join("desk.toml")).unwrap();
    assert_eq!(cfg.run, RunConfig::desk());
}

#[test]
fn schema_declares_every_run_setting() {
    let schema = schema();
    let run = serde_json::to_value(RunConfig::desk()).unwrap();
    let defs = &schema["$defs"];

    let mut train: BTreeSet<String> = run["train"].as_object().unwrap().keys().cloned().collect();
    train.remove("seed");
    assert_eq!(train, property_names(&defs["train"]));

    let fusion = run["fusion"].as_object().unwrap();
    assert_eq!(fusion.keys().cloned().collect::<BTreeSet<_>>(), property_names(&defs["fusion"]));
    for section in ["policy", "match"] {
        let keys: BTreeSet<String> = fusion[section].as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, property_names(&defs["fusion"]["properties"][section]), "{section}");
    }

    let synthetic = property_names(&defs["synthetic"]);
    for key in ["dim", "classes_per_task", "tasks", "samples_per_class", "cluster_spread", "separation"] {
        assert!(synthetic.contains(key), "{key}");
    }
}
