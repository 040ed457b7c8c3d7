//! Structural validation of report JSON against the shipped schema.
//!
//! This is deliberately not a general JSON Schema engine: it walks the
//! subset the shipped schema uses — `type` (scalar or list), `required`,
//! `properties`, `items`, and `$ref` into `definitions` — which is enough to
//! catch field renames or type drift between the report structs and the
//! published contract.

use serde_json::Value;

/// The schema the emitted benchmark report must satisfy.
pub const BENCH_REPORT_SCHEMA: &str = include_str!("../assets/bench-report.schema.json");

/// Checks `value` against `schema`, returning the path of the first
/// violation.
pub fn validate(value: &Value, schema: &Value) -> Result<(), String> {
    let root = schema;
    check(value, schema, root, "$")
}

fn check(value: &Value, schema: &Value, root: &Value, path: &str) -> Result<(), String> {
    let schema = resolve_ref(schema, root, path)?;

    if let Some(ty) = schema.get("type") {
        let allowed: Vec<&str> = match ty {
            Value::String(s) => vec![s.as_str()],
            Value::Array(list) => list.iter().filter_map(Value::as_str).collect(),
            _ => return Err(format!("{path}: schema `type` must be a string or list")),
        };
        if !allowed.iter().any(|t| type_matches(value, t)) {
            return Err(format!(
                "{path}: expected one of {allowed:?}, found {}",
                type_name(value)
            ));
        }
    }

    if let Value::Object(map) = value {
        if let Some(Value::Array(required)) = schema.get("required") {
            for key in required.iter().filter_map(Value::as_str) {
                if !map.contains_key(key) {
                    return Err(format!("{path}: missing required field `{key}`"));
                }
            }
        }
        if let Some(Value::Object(props)) = schema.get("properties") {
            for (key, sub) in props {
                if let Some(v) = map.get(key) {
                    check(v, sub, root, &format!("{path}.{key}"))?;
                }
            }
        }
    }

    if let Value::Array(items) = value {
        if let Some(item_schema) = schema.get("items") {
            for (i, v) in items.iter().enumerate() {
                check(v, item_schema, root, &format!("{path}[{i}]"))?;
            }
        }
    }

    Ok(())
}

fn resolve_ref<'a>(schema: &'a Value, root: &'a Value, path: &str) -> Result<&'a Value, String> {
    match schema.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let name = r
                .strip_prefix("#/definitions/")
                .ok_or_else(|| format!("{path}: unsupported $ref `{r}`"))?;
            root.get("definitions")
                .and_then(|d| d.get(name))
                .ok_or_else(|| format!("{path}: unresolved $ref `{r}`"))
        }
        None => Ok(schema),
    }
}

fn type_matches(value: &Value, ty: &str) -> bool {
    match ty {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "number" => value.is_number(),
        "integer" => value.is_u64() || value.is_i64(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        _ => false,
    }
}

fn type_name(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}
