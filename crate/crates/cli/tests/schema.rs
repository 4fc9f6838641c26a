//! Reports validate against the shipped JSON schema.

use misleading_core::data::{Label, Method, PredictionRecord};
use misleading_core::metrics::{subgroup_report, GroupBy};

fn validator() -> jsonschema::Validator {
    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../schema/report.schema.json")).expect("schema parses");
    jsonschema::validator_for(&schema).expect("schema compiles")
}

fn rec(i: usize, score: f64, fake: bool, key: &str) -> PredictionRecord {
    PredictionRecord {
        sample_id: format!("r{i}"),
        score,
        label: if fake { Label::Fake } else { Label::Real },
        subgroup: key.parse().unwrap(),
        method: fake.then_some(Method::DF),
    }
}

#[test]
fn reports_validate() {
    let v = validator();
    let records = vec![
        rec(0, 0.9, true, "M-W"),
        rec(1, 0.2, false, "M-W"),
        rec(2, 0.7, true, "F-B"),
        rec(3, 0.6, false, "F-B"),
        rec(4, 0.4, true, "F-A"),
    ];
    for g in [GroupBy::Subgroup, GroupBy::Method] {
        let mut r = subgroup_report(&records, 0.5, g).unwrap();
        r.meta.perturbation = Some("GB:3".into());
        let json: serde_json::Value = serde_json::from_str(&r.to_json_string()).unwrap();
        let errors: Vec<String> = v.iter_errors(&json).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{errors:?}");
    }
}

#[test]
fn schema_rejects_malformed_reports() {
    let v = validator();
    let records = vec![rec(0, 0.9, true, "M-W"), rec(1, 0.2, false, "M-W")];
    let r = subgroup_report(&records, 0.5, GroupBy::Subgroup).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&r.to_json_string()).unwrap();
    json["fairness"]["f_fpr"] = serde_json::json!(-1.0);
    assert!(!v.is_valid(&json));
    let mut json: serde_json::Value = serde_json::from_str(&r.to_json_string()).unwrap();
    json["group_by"] = serde_json::json!("race");
    assert!(!v.is_valid(&json));
}
