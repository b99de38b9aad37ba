use fedma_wasm::{calibrate, compare, staleness};
use serde_json::Value;

const ARRIVALS: &str = r#""sampled": 20, "cohort": 10, "horizon": 120,
  "delay": { "kind": "half-normal", "scale": 10.0 },
  "p": 1.0, "tau_max": 1000, "beta": 0.9, "seed": 4"#;

fn parse(text: String) -> Value {
    serde_json::from_str(&text).unwrap()
}

#[test]
fn staleness_report_has_one_entry_per_iteration() {
    let v = parse(staleness(&format!("{{ {ARRIVALS} }}")).unwrap());
    for series in ["nullity", "full_residual", "light_residual"] {
        assert_eq!(v[series].as_array().unwrap().len(), 120, "{series}");
    }
    let full = v["full_error"].as_f64().unwrap();
    let light = v["light_error"].as_f64().unwrap();
    assert!(full.is_finite() && full <= light + 1e-12, "{full} vs {light}");
}

#[test]
fn compare_returns_a_curve_per_method() {
    let req = format!(r#"{{ {ARRIVALS}, "server_lr": 1.0, "methods": ["fedbuff-momentum", "ma-full", "ma-light"] }}"#);
    let v = parse(compare(&req).unwrap());
    let curves = v.as_array().unwrap();
    assert_eq!(curves.len(), 3);
    for c in curves {
        let series = c["suboptimality"].as_array().unwrap();
        assert_eq!(series.len(), 120);
        assert!(series.iter().all(|x| x.as_f64().unwrap() >= -1e-12));
        assert_eq!(c["diverged"], false);
    }
    assert_eq!(curves[1]["method"], "ma-full");
}

#[test]
fn calibration_hits_the_requested_sensitivity() {
    let v = parse(calibrate(1.0, 1.5, 2.0).unwrap());
    assert!((v["sensitivity"].as_f64().unwrap() - 3.0).abs() < 1e-9, "{v}");
    assert!((v["noise_std"].as_f64().unwrap() - 3.0).abs() < 1e-9, "{v}");
}

#[test]
fn bad_requests_are_rejected_natively() {
    assert!(fedma_wasm::staleness_report(
        &serde_json::from_str(&format!("{{ {} }}", ARRIVALS.replace("120", "5000"))).unwrap()
    )
    .is_err());
    let empty = format!(r#"{{ {ARRIVALS}, "server_lr": 1.0, "methods": [] }}"#);
    assert!(fedma_wasm::compare_methods(&serde_json::from_str(&empty).unwrap()).is_err());
    let wide = format!("{{ {} }}", ARRIVALS.replace("\"cohort\": 10", "\"cohort\": 30"));
    assert!(fedma_wasm::staleness_report(&serde_json::from_str(&wide).unwrap()).is_err());
}
