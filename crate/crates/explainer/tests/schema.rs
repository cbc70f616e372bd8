use explainer::ExperimentConfig;
use serde_json::Value;

const SCHEMA: &str = include_str!("../config.schema.json");

fn type_matches(ty: &Value, v: &Value) -> bool {
    let one = |t: &str| match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "integer" => v.is_u64() || v.is_i64(),
        "number" => v.is_number(),
        "null" => v.is_null(),
        _ => false,
    };
    match ty {
        Value::String(t) => one(t),
        Value::Array(ts) => ts.iter().any(|t| t.as_str().is_some_and(one)),
        _ => false,
    }
}

/// Walks the schema alongside a serialized config; every key must be
/// described, typed and, outside arrays, carry the config's value as default.
fn check(schema: &Value, value: &Value, path: &str, in_array: bool, errors: &mut Vec<String>) {
    if !path.is_empty() && schema.get("description").is_none() && !in_array {
        errors.push(format!("{path}: no description"));
    }
    if !type_matches(&schema["type"], value) {
        errors.push(format!("{path}: type {} does not admit {value}", schema["type"]));
    }
    if !in_array && !path.is_empty() && !value.is_object() && schema.get("default") != Some(value) {
        errors.push(format!("{path}: default {:?} differs from {value}", schema.get("default")));
    }
    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            errors.push(format!("{path}: {value} not in enum"));
        }
    }
    match value {
        Value::Object(map) => {
            let props = schema["properties"].as_object().cloned().unwrap_or_default();
            if schema["additionalProperties"] != Value::Bool(false) {
                errors.push(format!("{path}: additional properties allowed"));
            }
            for k in props.keys().filter(|k| !map.contains_key(*k)) {
                errors.push(format!("{path}.{k}: in schema but not in config"));
            }
            for (k, v) in map {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match props.get(k) {
                    Some(s) => check(s, v, &p, in_array, errors),
                    None => errors.push(format!("{p}: missing from schema")),
                }
            }
        }
        Value::Array(items) => {
            for item in items {
                check(&schema["items"], item, &format!("{path}[]"), true, errors);
            }
        }
        _ => {}
    }
}

#[test]
fn published_schema_matches_the_defaults() {
    let schema: Value = serde_json::from_str(SCHEMA).unwrap();
    let defaults = serde_json::to_value(ExperimentConfig::default()).unwrap();
    let mut errors = Vec::new();
    check(&schema, &defaults, "", false, &mut errors);
    assert!(errors.is_empty(), "{}", errors.join("\n"));
}

#[test]
fn schema_sections_are_the_config_sections() {
    let schema: Value = serde_json::from_str(SCHEMA).unwrap();
    let keys: Vec<&String> = schema["properties"].as_object().unwrap().keys().collect();
    let mut keys: Vec<&str> = keys.iter().map(|k| k.as_str()).collect();
    keys.sort();
    assert_eq!(keys, ["data", "eval", "explainer", "losses", "paths", "performer", "seed", "train"]);
}
