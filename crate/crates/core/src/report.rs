//! Byte-stable JSON run reports: keys sorted, scores rounded to nine
//! significant digits, config values serialized exactly.

use serde_json::{json, Map, Number, Value};

use crate::config::RunConfig;
use crate::error::Result;

pub const VERSION: &str = concat!("mgi ", env!("CARGO_PKG_VERSION"));
pub const SCORE_DIGITS: usize = 9;

pub const WARPED_FILE: &str = "warped.ppm";
pub const FINAL_FILE: &str = "final.ppm";
pub const REPORT_FILE: &str = "report.json";

pub fn hypothesis_file(layer: usize) -> String {
    format!("hypothesis_{layer}.ppm")
}

/// `v` rounded to `digits` significant decimal digits. Zero and non-finite
/// values pass through.
pub fn round_significant(v: f64, digits: usize) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{:.*e}", digits.max(1) - 1, v)
        .parse()
        .expect("formatted float parses")
}

fn score(v: Option<f64>) -> Value {
    v.and_then(|x| Number::from_f64(round_significant(x, SCORE_DIGITS)))
        .map_or(Value::Null, Value::Number)
}

/// Rebuilds every object with its keys in sorted order.
pub fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut entries: Vec<(String, Value)> = m.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect::<Map<_, _>>())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Pretty-printed canonical form with a trailing newline.
pub fn to_canonical_string(v: &Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&sort_keys(v.clone()))?;
    s.push('\n');
    Ok(s)
}

/// Outcome of one hypothesis as it appears in the report.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisEntry {
    pub layer: usize,
    pub code_count: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub k_n: Option<f64>,
    /// Set when inversion failed; the image file is then absent.
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct ReportInput<'a> {
    pub config: &'a RunConfig,
    pub hypotheses: Vec<HypothesisEntry>,
    pub chosen_index: Option<usize>,
    pub reference_description: Option<String>,
    pub crop_procedure: String,
    pub warped_written: bool,
    /// Set on failure; marks the report partial.
    pub error: Option<String>,
}

pub fn build_report(input: &ReportInput<'_>) -> Result<Value> {
    let hypotheses: Vec<Value> = input
        .hypotheses
        .iter()
        .map(|h| {
            let mut o = json!({
                "layer": h.layer,
                "K": h.code_count,
                "initial_loss": score(h.initial_loss),
                "final_loss": score(h.final_loss),
                "k_n": score(h.k_n),
                "image": if h.error.is_none() { Value::from(hypothesis_file(h.layer)) } else { Value::Null },
            });
            if let Some(e) = &h.error {
                o["error"] = Value::from(e.as_str());
            }
            o
        })
        .collect();
    let chosen_layer = input
        .chosen_index
        .and_then(|i| input.hypotheses.get(i))
        .map(|h| h.layer);
    let mut report = json!({
        "version": VERSION,
        "partial": input.error.is_some(),
        "config": serde_json::to_value(input.config)?,
        "hypotheses": hypotheses,
        "chosen_index": input.chosen_index,
        "chosen_layer": chosen_layer,
        "warped_image": if input.warped_written { Value::from(WARPED_FILE) } else { Value::Null },
        "final_image": if input.chosen_index.is_some() { Value::from(FINAL_FILE) } else { Value::Null },
        "selection": {
            "reference": input.reference_description,
            "crop_procedure": input.crop_procedure,
            "tie_break": "smallest composing layer",
        },
    });
    if let Some(e) = &input.error {
        report["error"] = Value::from(e.as_str());
    }
    Ok(sort_keys(report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_to_nine_digits() {
        assert_eq!(round_significant(1.234567891234, 9), 1.23456789);
        assert_eq!(round_significant(-0.000123456789876, 9), -0.000123456790);
        assert_eq!(round_significant(0.0, 9), 0.0);
        assert!(round_significant(f64::NAN, 9).is_nan());
    }

    #[test]
    fn keys_are_sorted() {
        let v = json!({"b": 1, "a": {"z": 0, "y": [ {"d": 1, "c": 2} ]}});
        let s = serde_json::to_string(&sort_keys(v)).unwrap();
        assert_eq!(s, r#"{"a":{"y":[{"c":2,"d":1}],"z":0},"b":1}"#);
    }

    #[test]
    fn partial_report_marks_error_and_missing_images() {
        let cfg = RunConfig::default();
        let input = ReportInput {
            config: &cfg,
            hypotheses: vec![HypothesisEntry {
                layer: 3,
                code_count: 30,
                initial_loss: None,
                final_loss: None,
                k_n: None,
                error: Some("boom".into()),
            }],
            chosen_index: None,
            reference_description: None,
            crop_procedure: "crops".into(),
            warped_written: true,
            error: Some("boom".into()),
        };
        let r = build_report(&input).unwrap();
        assert_eq!(r["partial"], true);
        assert_eq!(r["error"], "boom");
        assert!(r["hypotheses"][0]["image"].is_null());
        assert!(r["final_image"].is_null());
        let back: RunConfig = serde_json::from_value(r["config"].clone()).unwrap();
        assert_eq!(back, cfg);
    }
}
